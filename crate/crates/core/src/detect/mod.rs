//! PaDiM-style Gaussian patch modelling and IGD-lite on top of a pretrained
//! encoder.

mod igd;
mod padim;
mod ssim;

pub use igd::{
    combine_score, estimate_head, gaussian_head, igd_fit, patch_corners, reconstruction_loss, GaussianHead, IgdConfig,
    IgdModel, IgdScore, RecLoss, IGD_MAGIC, SIGMA2_FLOOR,
};
pub use padim::{
    cholesky, extract_patch_features, grid_from_maps, padim_fit, padim_score, whitened_sq_norm, AnomalyScoreMap,
    GaussianPatchModel, PatchGrid, MODEL_MAGIC,
};
pub use ssim::{msssim, msssim_grad, scale_weights, SCALE_WEIGHTS, WINDOW};

use crate::encoder::EncoderError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("feature map {coarse:?} does not divide the finest map {fine:?} by an integer stride")]
    MisalignedStrides { fine: (usize, usize), coarse: (usize, usize) },
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("covariance is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("image side {side} too small for {scales} MS-SSIM scales (need {need})")]
    TooSmall { side: usize, scales: usize, need: usize },
    #[error("model has not been fitted")]
    Untrained,
    #[error("wrong artifact type: {0}")]
    WrongArtifact(String),
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[cfg(test)]
mod tests;
