//! Anomalous sound detection toolkit.
//!
//! The pipeline mirrors a classification-based machine-condition monitor:
//! audio clips are converted to 128-bin log-mel spectrograms ([`dsp`]),
//! augmented with frequency/time masking, encoded by a small ViT-style
//! transformer ([`model`]) whose attention projections accept low-rank
//! adapters ([`lora`]), and trained against an angular-margin classification
//! proxy task ([`objective`], [`optim`]). Anomaly scores come from a
//! dual-domain 1-nearest-neighbour cosine back-end ([`detect`]) and are
//! evaluated with AUC / partial-AUC / harmonic-mean metrics ([`metrics`]).
//!
//! All numeric code is generic over the scalar type via [`Real`]
//! (`f32` for fast pipeline runs, `f64` for high-precision checks).

pub mod ablate;
pub mod config;
pub mod data;
pub mod detect;
pub mod dsp;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

/// Single-precision spectrogram, the default for pipeline runs.
pub type Spectrogram32 = dsp::Spectrogram<f32>;
/// Double-precision spectrogram, used where oracle-grade accuracy matters.
pub type Spectrogram64 = dsp::Spectrogram<f64>;
/// Single-precision encoder weights.
pub type EncoderWeights32 = model::EncoderWeights<f32>;
/// Double-precision encoder weights.
pub type EncoderWeights64 = model::EncoderWeights<f64>;
/// Single-precision clip embedding.
pub type Embedding32 = model::Embedding<f32>;
/// Double-precision clip embedding.
pub type Embedding64 = model::Embedding<f64>;
