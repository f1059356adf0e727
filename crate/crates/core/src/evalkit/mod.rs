//! Detection and localisation metrics and report emission.

mod metrics;
mod report;

pub use metrics::{
    auroc, binarise, confusion_metrics, integrate_to, iou_dice, midranks, pro_curve, pro_score, roc_curve,
    select_pixel_threshold, select_threshold, Confusion, ThresholdChoice,
};
pub use report::{
    emit_report, evaluate, histogram_svg, overlay_image, roc_svg, EvalConfig, EvalReport, GroupMetrics, Overlay,
    ScoredItem, Segmentation,
};

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("both labels are required")]
    SingleLabel,
    #[error("empty input")]
    Empty,
    #[error("no ground-truth regions")]
    NoRegions,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("malformed metrics: {0}")]
    Parse(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
