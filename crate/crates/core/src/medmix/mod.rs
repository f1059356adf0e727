//! Weak views and MedMix pseudo-lesion synthesis.

mod batch;
mod colour;
mod config;
mod cutpaste;
mod deform;
mod export;
mod strategies;
mod weak;

pub use batch::{augment_for_class, make_pretrain_batch, AugmentedSample};
pub use colour::{colour_jitter, greyscale};
pub use config::{AugConfig, Jitter, WeakConfig};
pub use cutpaste::{medmix, MedMixOutput};
pub use deform::{deform_patch, fisheye, horizontal_wave, wave_shift};
pub use export::export_corpus;
pub use strategies::{
    strategy_by_name, Cutout, GaussianNoise, MedMix, Permutation, Rotation, StrongAugment, STRATEGY_NAMES,
};
pub use weak::weak_augment;

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum MedMixError {
    #[error("patch {h}x{w} is too small to warp (minimum 4x4)")]
    PatchTooSmall { h: usize, w: usize },
    #[error("donor pool is empty")]
    EmptyDonorPool,
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
