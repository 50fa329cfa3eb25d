//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("clip shorter than one window ({n_samples} samples < {win}-sample window)")]
    ClipTooShort { n_samples: usize, win: usize },

    #[error("waveform contains non-finite samples")]
    NonFiniteSamples,

    #[error("empty waveform")]
    EmptyWaveform,

    #[error("spectrogram is empty")]
    EmptySpectrogram,

    #[error("mask policy exceeds spectrogram dimensions: {what}")]
    PolicyExceedsDims { what: String },

    #[error("feature stats dimension mismatch: stats have {stats} bins, spectrogram has {bins}")]
    StatsDimMismatch { stats: usize, bins: usize },

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: String,
        expected: String,
        got: String,
    },

    #[error("zero or non-finite vector where a direction is required")]
    ZeroVector,

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty reference set")]
    EmptyReferenceSet,

    #[error("missing {domain} domain in the training embedding store")]
    MissingDomain { domain: String },

    #[error("missing test labels: {0}")]
    MissingLabels(String),

    #[error("metric needs both classes: {0}")]
    EmptyClass(String),

    #[error("harmonic mean requires strictly positive inputs, got {0}")]
    NonPositiveHmeanInput(f64),

    #[error("proxy classification task is degenerate: only one class in the manifest")]
    SingleClass,

    #[error("LoRA plan selects no sites")]
    PlanSelectsNoSites,

    #[error("adapter site out of range: layer {layer} with {n_layers} encoder layers")]
    AdapterSiteOutOfRange { layer: usize, n_layers: usize },

    #[error("adapter set does not match the checkpoint: {0}")]
    AdapterMismatch(String),

    #[error("checkpoint already carries merged adapters; merging again would double the update")]
    AlreadyMerged,

    #[error("non-finite gradient in tensor {name}; aborting optimizer step")]
    NonFiniteGradient { name: String },

    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },

    #[error("machine {machine}: component at {freq_hz} Hz is at or above Nyquist ({nyquist_hz} Hz)")]
    NyquistViolation {
        machine: String,
        freq_hz: f64,
        nyquist_hz: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn malformed(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
