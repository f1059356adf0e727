//! Class centres, the multi-centring loss, the centred contrastive loss with
//! class-dependent temperature, and the two pretext cross-entropies.

mod centres;
mod losses;

pub use centres::{compute_centres, equidistant_centres, random_centres, CentreStrategy, ClassCentres, Embedder};
pub use losses::{
    aug_classification_loss, centre_normalize, centring_loss, contrastive_from_normalized, kappa, pmsacl_loss,
    position_loss, total_loss, ContrastiveKind, CrossEntropy, EmbeddingBatch, LossOutput, LossParts, LossSwitches,
    TemperatureSchedule, TotalLoss, NEIGHBOURS, NORM_EPS, PROB_FLOOR,
};

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("degenerate difference: embedding coincides with its centre")]
    DegenerateDifference,
    #[error("degenerate centred normalisation at sample {0}")]
    DegenerateAt(usize),
    #[error("class index {n} outside 0..{k}")]
    ClassOutOfRange { n: usize, k: usize },
    #[error("batch pairing violated: {0}")]
    Pairing(String),
    #[error("row {row} is not a probability vector (sum {sum})")]
    NotProbabilities { row: usize, sum: f64 },
    #[error("invalid temperature schedule tau={tau} alpha={alpha}")]
    Schedule { tau: f64, alpha: f64 },
    #[error("centres are frozen; replacement at epoch {epoch} is not allowed")]
    CentresFrozen { epoch: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("augmentation failed: {0}")]
    Augment(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
