//! Convolutional encoder with projection head, pretext heads, decoder,
//! hand-written reverse mode and the SGD pre-training loop.

mod layers;
mod nets;
mod optim;
mod stack;
mod train;

pub use layers::{elu, sigmoid, softmax, softmax_backward, upsample_nearest, Affine, Conv2d};
pub use nets::{Arch, DecoderNet, DecoderTrace, EncoderNet, EncoderTrace, HeadNets, Params};
pub use optim::Sgd;
pub use stack::{add_params, sample_patch_pair, PatchPair, Stack, StackResult, View, NEIGHBOUR_OFFSETS};
pub use train::{pretrain, Checkpoint, EpochLosses, PretrainConfig, CHECKPOINT_MAGIC};

use crate::numerics::NumericsError;
use crate::pmsacl::LossError;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward without matching forward: {0}")]
    BackwardMismatch(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {terms}")]
    NonFiniteLoss { epoch: usize, batch: usize, terms: String },
    #[error("epoch {epoch}, batch {batch}: {message}")]
    AtBatch { epoch: usize, batch: usize, message: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
