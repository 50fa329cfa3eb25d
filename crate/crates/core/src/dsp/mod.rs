//! Signal front-end: waveform framing, log-mel features, masking
//! augmentation, and per-bin standardization.

pub mod cache;
pub mod mel;
pub mod specaug;
pub mod wav;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub use mel::{frame_count, hz_to_mel, logmel, mel_to_hz, LogmelConfig, MelFilterbank};
pub use specaug::{specaug, SpecAugPolicy};
pub use wav::{read_wav, write_wav, SAMPLE_RATE};

/// Mono audio clip with its sample rate.
#[derive(Debug, Clone)]
pub struct Waveform<T: Real> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Real> Waveform<T> {
    /// Wraps samples after checking they are non-empty and finite.
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyWaveform);
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteSamples);
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Time-frequency feature matrix, one row per frame, one column per mel bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram<T: Real> {
    pub frames: Array2<T>,
    pub hop_seconds: f64,
    pub window_seconds: f64,
}

impl<T: Real> Spectrogram<T> {
    /// Number of frames.
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    /// Number of mel bins.
    pub fn n_bins(&self) -> usize {
        self.frames.ncols()
    }
}

/// Per-bin mean and standard deviation fitted on the training split.
#[derive(Debug, Clone)]
pub struct FeatureStats<T: Real> {
    pub mean: Array1<T>,
    pub std: Array1<T>,
}

impl<T: Real> FeatureStats<T> {
    /// Fits per-bin statistics over every frame of the given spectrograms.
    ///
    /// Accumulates in double precision; the population convention (divide by
    /// the frame count, not count-1) is used for the standard deviation.
    pub fn fit(spectrograms: &[Spectrogram<T>]) -> Result<Self> {
        let n_bins = spectrograms
            .first()
            .ok_or(Error::EmptyBatch)?
            .n_bins();
        let mut count = 0u64;
        let mut sum = vec![0.0f64; n_bins];
        let mut sum_sq = vec![0.0f64; n_bins];
        for s in spectrograms {
            if s.n_bins() != n_bins {
                return Err(Error::shape("feature stats input", n_bins, s.n_bins()));
            }
            for row in s.frames.axis_iter(Axis(0)) {
                for (b, &v) in row.iter().enumerate() {
                    let v = v.to64();
                    sum[b] += v;
                    sum_sq[b] += v * v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptySpectrogram);
        }
        let n = count as f64;
        let mean: Array1<T> = sum.iter().map(|&s| T::of(s / n)).collect();
        let std: Array1<T> = sum
            .iter()
            .zip(&sum_sq)
            .map(|(&s, &sq)| {
                let var = (sq / n - (s / n) * (s / n)).max(0.0);
                T::of(var.sqrt())
            })
            .collect();
        Ok(FeatureStats { mean, std })
    }
}

/// Centers each bin on its training mean and scales by its training standard
/// deviation. A bin with zero standard deviation is only mean-subtracted.
pub fn standardize<T: Real>(s: &Spectrogram<T>, stats: &FeatureStats<T>) -> Result<Spectrogram<T>> {
    let n_bins = s.n_bins();
    if stats.mean.len() != n_bins || stats.std.len() != n_bins {
        return Err(Error::StatsDimMismatch {
            stats: stats.mean.len(),
            bins: n_bins,
        });
    }
    let mut frames = s.frames.clone();
    for mut row in frames.axis_iter_mut(Axis(0)) {
        for (b, v) in row.iter_mut().enumerate() {
            let centered = *v - stats.mean[b];
            *v = if stats.std[b] > T::zero() {
                centered / stats.std[b]
            } else {
                centered
            };
        }
    }
    Ok(Spectrogram {
        frames,
        hop_seconds: s.hop_seconds,
        window_seconds: s.window_seconds,
    })
}
