//! Unsupervised feature alignment for one-class fleet condition monitoring.
//!
//! A target unit with a short healthy history is paired with a source unit
//! with a long one. A shared feature extractor is trained so that features
//! from both units are indistinguishable (via a shared variational
//! auto-encoder, a homothety loss on inter-point distances, an adversarial
//! origin discriminator, or combinations thereof), then a closed-form
//! one-class extreme learning machine monitors the aligned features with a
//! percentile-derived decision threshold.
//!
//! Core math is generic over the floating-point type through [`Scalar`];
//! `f64` aliases are provided at the crate root and are what the trainer,
//! fleet harness and CLI use by default.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod discriminators;
pub mod elm;
pub mod error;
pub mod extractors;
pub mod fleet;
pub mod losses;
pub mod optim;
pub mod scalar;
pub mod seed;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision aliases. The paper-scale networks are tiny, so 64-bit
/// floats are the default everywhere; `f32` remains available through the
/// generic types.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type UnitDataset64 = data::UnitDataset<f64>;
pub type TrainedModel64 = trainer::TrainedModel<f64>;
