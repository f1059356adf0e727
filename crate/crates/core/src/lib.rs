//! Multi-centred contrastive pre-training with MedMix pseudo-lesions, plus
//! the PaDiM and IGD-lite anomaly detectors and their evaluation harness.
//!
//! Numeric code is generic over [`numerics::Scalar`] (`f32` for training,
//! `f64` for oracles); the aliases below fix the common instantiations.

pub mod detect;
pub mod encoder;
pub mod evalkit;
pub mod imaging;
pub mod medmix;
pub mod numerics;
pub mod pipeline;
pub mod pmsacl;

pub use numerics::{RngStream, Scalar, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Encoder32 = encoder::EncoderNet<f32>;
pub type Encoder64 = encoder::EncoderNet<f64>;
pub type Heads32 = encoder::HeadNets<f32>;
pub type Centres32 = pmsacl::ClassCentres<f32>;
