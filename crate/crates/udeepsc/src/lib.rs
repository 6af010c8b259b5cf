//! Unified multi-task semantic communication at desk scale.
//!
//! One model serves six tasks across three modalities (image, text, speech).
//! Per-modality semantic encoders feed a noise-adaptive dynamic channel
//! encoder that prunes feature vectors, a unified vector-quantization
//! codebook represents the survivors as indices, the quantized features cross
//! an AWGN channel, and a unified multi-exit decoder with per-task certainty
//! modules produces early-exit predictions.
//!
//! The crate is generic over the scalar type via [`scalar::Scalar`]:
//! training runs in `f32`, gradient checks and oracles in `f64`. Concrete
//! aliases for the default training precision live at the crate root.

pub mod autodiff;
pub mod backbone;
pub mod channel;
pub mod checkpoint;
pub mod cli;
pub mod codebook;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod multiexit;
pub mod nn;
pub mod scalar;
pub mod selection;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
pub use features::{FeatureSequence, Modality};
pub use scalar::Scalar;

/// Default scalar type for training and evaluation.
pub type Real = f32;

/// Feature sequence at the default precision.
pub type Features = features::FeatureSequence<Real>;

/// Tape at the default precision.
pub type TapeR = autodiff::Tape<Real>;
