//! Spectrogram masking augmentation: random frequency bands and time spans
//! overwritten with a constant. No time warping.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Spectrogram;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Masking policy. Widths are sampled uniformly from `0..=width_max`, so a
/// mask may be empty; masks may overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecAugPolicy {
    pub freq_mask_width_max: usize,
    pub time_mask_width_max: usize,
    pub n_freq_masks: usize,
    pub n_time_masks: usize,
    /// Fill value; 0 masks the per-bin mean when applied after standardization.
    pub mask_value: f64,
}

impl Default for SpecAugPolicy {
    fn default() -> Self {
        SpecAugPolicy {
            freq_mask_width_max: 16,
            time_mask_width_max: 20,
            n_freq_masks: 2,
            n_time_masks: 2,
            mask_value: 0.0,
        }
    }
}

impl SpecAugPolicy {
    /// Upper bound on cells any draw can mask.
    pub fn cell_budget(&self, n_frames: usize, n_bins: usize) -> usize {
        self.n_freq_masks * self.freq_mask_width_max * n_frames
            + self.n_time_masks * self.time_mask_width_max * n_bins
    }
}

/// Applies the policy deterministically: the output is a pure function of
/// (input, policy, seed). Frequency masks are drawn first, then time masks;
/// each mask draws its width, then its start offset.
pub fn specaug<T: Real>(
    s: &Spectrogram<T>,
    policy: &SpecAugPolicy,
    seed: u64,
) -> Result<Spectrogram<T>> {
    let (n_frames, n_bins) = (s.n_frames(), s.n_bins());
    if n_frames == 0 || n_bins == 0 {
        return Err(Error::EmptySpectrogram);
    }
    if policy.freq_mask_width_max > n_bins {
        return Err(Error::PolicyExceedsDims {
            what: format!(
                "freq mask width max {} > {} mel bins",
                policy.freq_mask_width_max, n_bins
            ),
        });
    }
    if policy.time_mask_width_max > n_frames {
        return Err(Error::PolicyExceedsDims {
            what: format!(
                "time mask width max {} > {} frames",
                policy.time_mask_width_max, n_frames
            ),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fill = T::of(policy.mask_value);
    let mut frames = s.frames.clone();
    for _ in 0..policy.n_freq_masks {
        let width = rng.gen_range(0..=policy.freq_mask_width_max);
        let start = rng.gen_range(0..=n_bins - width);
        frames.slice_mut(ndarray::s![.., start..start + width]).fill(fill);
    }
    for _ in 0..policy.n_time_masks {
        let width = rng.gen_range(0..=policy.time_mask_width_max);
        let start = rng.gen_range(0..=n_frames - width);
        frames.slice_mut(ndarray::s![start..start + width, ..]).fill(fill);
    }
    Ok(Spectrogram {
        frames,
        hop_seconds: s.hop_seconds,
        window_seconds: s.window_seconds,
    })
}
