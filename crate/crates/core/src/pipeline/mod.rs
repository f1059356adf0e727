//! Configuration, the synthetic dataset, and command orchestration.

mod config;
mod gradcheck;
mod run;
mod synth;

pub use config::{config_help, hex, ConfigValues};
pub use gradcheck::{gradcheck_suite, GradcheckReport};
pub use run::{
    ablation_cells, read_container, run, AblationSummary, Cell, Command, Layout, RunFlags, ScoreFile, ScoreRow, CCD_STYLE,
    DETECTORS, GRADCHECK_TOL_F32, GRADCHECK_TOL_F64, SCORES_MAGIC,
};
pub use synth::{
    inject_lesions, lesion_contrast, synth_generate, DatasetOnDisk, Label, LesionStyle, ManifestEntry, Split, SynthConfig,
    SynthSummary, MANIFEST,
};

use std::path::PathBuf;

use crate::detect::DetectError;
use crate::encoder::EncoderError;
use crate::evalkit::EvalError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),
    #[error("artifact: {0}")]
    Artifact(String),
    #[error("config hash mismatch for {artifact}: expected {expected}, found {found} (pass --allow-hash-mismatch to proceed)")]
    HashMismatch { artifact: String, expected: String, found: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
