//! Log-mel spectrogram extraction: Hamming-windowed DFT power spectra pooled
//! through a triangular mel filterbank, then a floored natural log.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{Spectrogram, Waveform};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Front-end parameters. `fmax_hz = None` means the Nyquist frequency.
#[derive(Debug, Clone)]
pub struct LogmelConfig {
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: Option<f64>,
    /// Additive floor inside the log; 0 disables flooring (test mode).
    pub log_floor: f64,
}

impl Default for LogmelConfig {
    fn default() -> Self {
        LogmelConfig {
            win_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            n_mels: 128,
            fmin_hz: 0.0,
            fmax_hz: None,
            log_floor: 1e-10,
        }
    }
}

impl LogmelConfig {
    pub fn win_samples(&self, sample_rate: u32) -> usize {
        (self.win_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }
}

/// Number of full analysis windows that fit: 1 + floor((n − win)/hop).
pub fn frame_count(n_samples: usize, win: usize, hop: usize) -> Result<usize> {
    assert!(win >= 1 && hop >= 1, "window and hop must be positive");
    if n_samples < win {
        return Err(Error::ClipTooShort { n_samples, win });
    }
    Ok(1 + (n_samples - win) / hop)
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Bank of triangular filters with peak weight 1, evenly spaced on the mel
/// scale. Row `m` holds filter `m`'s weight per DFT bin.
#[derive(Debug, Clone)]
pub struct MelFilterbank<T: Real> {
    pub weights: Array2<T>,
    /// Peak frequency of each filter in Hz.
    pub centers_hz: Vec<f64>,
}

impl<T: Real> MelFilterbank<T> {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, fmin_hz: f64, fmax_hz: f64) -> Self {
        let n_bins = n_fft / 2 + 1;
        let mel_lo = hz_to_mel(fmin_hz);
        let mel_hi = hz_to_mel(fmax_hz);
        // n_mels + 2 edge points; filter m spans points m..m+2 with peak at m+1.
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = Array2::<T>::zeros((n_mels, n_bins));
        for m in 0..n_mels {
            let (lo, center, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * sample_rate as f64 / n_fft as f64;
                let w = if f > lo && f < center {
                    (f - lo) / (center - lo)
                } else if f >= center && f < hi {
                    (hi - f) / (hi - center)
                } else if f == center {
                    1.0
                } else {
                    0.0
                };
                if w > 0.0 {
                    weights[[m, k]] = T::of(w);
                }
            }
        }
        let centers_hz = edges_hz[1..=n_mels].to_vec();
        MelFilterbank { weights, centers_hz }
    }
}

fn hamming(win: usize) -> Vec<f64> {
    (0..win)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win - 1) as f64).cos())
        .collect()
}

/// Extracts the log-mel spectrogram of a clip.
pub fn logmel<T: Real>(w: &Waveform<T>, cfg: &LogmelConfig) -> Result<Spectrogram<T>> {
    if w.samples.is_empty() {
        return Err(Error::EmptyWaveform);
    }
    if w.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteSamples);
    }
    let win = cfg.win_samples(w.sample_rate);
    let hop = cfg.hop_samples(w.sample_rate);
    if cfg.n_fft < win {
        return Err(Error::InvalidConfig(format!(
            "n_fft {} shorter than the {}-sample window",
            cfg.n_fft, win
        )));
    }
    let n_frames = frame_count(w.samples.len(), win, hop)?;
    let n_bins = cfg.n_fft / 2 + 1;
    let fmax = cfg.fmax_hz.unwrap_or(w.sample_rate as f64 / 2.0);
    let fb = MelFilterbank::<T>::new(cfg.n_mels, cfg.n_fft, w.sample_rate, cfg.fmin_hz, fmax);

    let window: Vec<T> = hamming(win).into_iter().map(T::of).collect();
    let fft = FftPlanner::<T>::new().plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); cfg.n_fft];
    let mut power = Array2::<T>::zeros((n_frames, n_bins));
    for t in 0..n_frames {
        let start = t * hop;
        for i in 0..cfg.n_fft {
            let v = if i < win { w.samples[start + i] * window[i] } else { T::zero() };
            buf[i] = Complex::new(v, T::zero());
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            power[[t, k]] = buf[k].norm_sqr();
        }
    }

    let floor = T::of(cfg.log_floor);
    let mut frames = power.dot(&fb.weights.t());
    frames.mapv_inplace(|e| (e + floor).ln());
    Ok(Spectrogram {
        frames,
        hop_seconds: cfg.hop_ms / 1000.0,
        window_seconds: cfg.win_ms / 1000.0,
    })
}
