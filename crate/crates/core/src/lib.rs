//! Sound event localization and detection from first-order Ambisonics audio
//! and mouth keypoints, with cross-modal distillation from an audio-only
//! teacher into an audio-visual student and multi-level feature mixing.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! verification); the aliases below fix the common instantiations.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod distill;
pub mod error;
pub mod features;
pub mod metrics;
pub mod mixaug;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod train;
pub mod visual;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model32 = backbone::Model<f32>;
pub type Model64 = backbone::Model<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type Dataset32 = train::Dataset<f32>;
pub type Dataset64 = train::Dataset<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
pub type Waveform32 = features::FoaWaveform<f32>;
pub type Waveform64 = features::FoaWaveform<f64>;
