//! Adam with linear warmup and the fine-tuning loop.
//!
//! The trainer owns the step sequence: per-epoch seeded shuffles, fresh
//! masking noise per clip visit, gradient accumulation over a batch, and a
//! rollback to the last epoch snapshot when the loss stops being finite.
//! In adapter mode the base encoder is never written to, which is what makes
//! the frozen-base byte-identity guarantee hold trivially.

use ndarray::{Array2, ArrayD, ArrayViewD, ArrayViewMutD};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::str::FromStr;

use crate::dsp::specaug::{specaug, SpecAugPolicy};
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::lora::{LoraPlan, LoraSet};
use crate::model::{backward, forward, EncoderGrads, EncoderWeights, LoraGrads};
use crate::objective::{arcface_grad, cosine_accuracy, ArcFaceHead};
use crate::rng::{derive_seed, tag_str};
use crate::scalar::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

struct Slot<T: Real> {
    m: ArrayD<T>,
    v: ArrayD<T>,
}

/// Per-parameter Adam moments, keyed by tensor name, plus the shared step
/// counter.
pub struct AdamState<T: Real> {
    slots: BTreeMap<String, Slot<T>>,
    pub t: u64,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        AdamState { slots: BTreeMap::new(), t: 0 }
    }
}

/// One bias-corrected Adam update over a named parameter set. Gradients are
/// validated first: any non-finite value aborts the whole step before a
/// single parameter moves.
pub fn adam_step<T: Real>(
    state: &mut AdamState<T>,
    params: &mut [(String, ArrayViewMutD<'_, T>)],
    grads: &[(String, ArrayViewD<'_, T>)],
    lr: T,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("optimizer step", params.len(), grads.len()));
    }
    for ((pn, pv), (gn, gv)) in params.iter().zip(grads) {
        if pn != gn || pv.shape() != gv.shape() {
            return Err(Error::shape(
                "optimizer step",
                format!("{pn} {:?}", pv.shape()),
                format!("{gn} {:?}", gv.shape()),
            ));
        }
        if gv.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { name: gn.clone() });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::of(BETA1);
    let b2 = T::of(BETA2);
    let eps = T::of(ADAM_EPS);
    let c1 = T::one() / (T::one() - b1.powi(t));
    let c2 = T::one() / (T::one() - b2.powi(t));
    for ((name, pv), (_, gv)) in params.iter_mut().zip(grads) {
        let slot = state.slots.entry(name.clone()).or_insert_with(|| Slot {
            m: ArrayD::zeros(gv.raw_dim()),
            v: ArrayD::zeros(gv.raw_dim()),
        });
        if slot.m.shape() != gv.shape() {
            return Err(Error::shape("optimizer slot", format!("{:?}", slot.m.shape()), name.clone()));
        }
        ndarray::Zip::from(pv)
            .and(&mut slot.m)
            .and(&mut slot.v)
            .and(gv)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p = *p - lr * (*m * c1) / ((*v * c2).sqrt() + eps);
            });
    }
    Ok(())
}

/// Linear warmup to a constant peak rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if warmup_steps == 0 || warmup_steps > total_steps {
            return Err(Error::InvalidConfig(format!(
                "warmup steps {warmup_steps} must be in 1..={total_steps}"
            )));
        }
        if !(peak_lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("peak learning rate {peak_lr} is invalid")));
        }
        Ok(Schedule { peak_lr, warmup_steps, total_steps })
    }

    /// Ramps over the given fraction of `total_steps`, at least one step.
    pub fn with_warmup_fraction(peak_lr: f64, total_steps: usize, fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidConfig(format!("warmup fraction {fraction} not in [0,1]")));
        }
        let warmup = ((total_steps as f64 * fraction).round() as usize).clamp(1, total_steps.max(1));
        Schedule::new(peak_lr, warmup, total_steps)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.peak_lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Lora,
    Full,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lora" => Ok(TrainMode::Lora),
            "full" => Ok(TrainMode::Full),
            other => Err(Error::InvalidConfig(format!(
                "unknown training mode {other:?}, expected lora or full"
            ))),
        }
    }
}

/// Everything the loop needs besides the data and the model.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub arcface_scale: f64,
    pub arcface_margin: f64,
    /// Global-norm gradient clip; off by default, useful when chasing a
    /// diverging run.
    pub grad_clip: Option<f64>,
    /// Masking augmentation applied to each clip visit; `None` disables.
    pub specaug: Option<SpecAugPolicy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Lora,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            peak_lr: 5e-5,
            warmup_fraction: 0.1,
            arcface_scale: 30.0,
            arcface_margin: 0.5,
            grad_clip: None,
            specaug: Some(SpecAugPolicy::default()),
        }
    }
}

/// One standardized training clip with its class id.
#[derive(Debug, Clone)]
pub struct TrainExample<T: Real> {
    pub features: Spectrogram<T>,
    pub class: usize,
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
}

impl EpochStats {
    pub fn tsv_line(&self) -> String {
        format!("{}\t{}\t{:.10}\t{:.6}\t{:.4}", self.epoch, self.step, self.lr, self.loss, self.acc)
    }

    pub fn jsonl_line(&self) -> String {
        serde_json::to_string(self).expect("stats serialize")
    }
}

pub const LOG_HEADER: &str = "epoch\tstep\tlr\tloss\tacc";

/// Trained state plus the log. When `diverged_at` is set, the model fields
/// hold the last epoch snapshot that was still finite.
pub struct TrainOutcome<T: Real> {
    pub weights: EncoderWeights<T>,
    pub adapters: Option<LoraSet<T>>,
    pub head: ArcFaceHead<T>,
    pub log: Vec<EpochStats>,
    pub diverged_at: Option<u64>,
}

impl<T: Real> TrainOutcome<T> {
    /// Count of parameters the optimizer was allowed to touch.
    pub fn trainable_params(&self) -> usize {
        let head = self.head.weights.len();
        match &self.adapters {
            Some(set) => set.param_count() + head,
            None => self.weights.param_count() + head,
        }
    }
}

/// Fine-tunes adapters plus head (lora mode) or every parameter (full mode)
/// against the angular-margin objective.
///
/// Runs `epochs × ceil(N/batch)` serial steps with a per-epoch seeded
/// shuffle. A non-finite loss, embedding, or gradient ends training early:
/// the state rolls back to the end of the last finite epoch and
/// `diverged_at` records the offending step.
pub fn train<T: Real>(
    examples: &[TrainExample<T>],
    n_classes: usize,
    weights: EncoderWeights<T>,
    plan: Option<&LoraPlan>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidConfig("batch size and epochs must be at least 1".into()));
    }
    for ex in examples {
        if ex.class >= n_classes {
            return Err(Error::InvalidConfig(format!(
                "class id {} outside 0..{n_classes}",
                ex.class
            )));
        }
    }
    let d_model = weights.config.d_model;
    let mut adapters = match (cfg.mode, plan) {
        (TrainMode::Lora, Some(plan)) => Some(LoraSet::init(
            plan,
            weights.config.n_layers,
            d_model,
            derive_seed(cfg.seed, &[tag_str("adapters")]),
        )?),
        (TrainMode::Lora, None) => {
            return Err(Error::InvalidConfig("adapter mode requires an adapter plan".into()))
        }
        (TrainMode::Full, None) => None,
        (TrainMode::Full, Some(_)) => {
            return Err(Error::InvalidConfig("full fine-tune does not take an adapter plan".into()))
        }
    };
    let mut weights = weights;
    let mut head: ArcFaceHead<T> = ArcFaceHead::init(
        n_classes,
        d_model,
        cfg.arcface_scale,
        cfg.arcface_margin,
        derive_seed(cfg.seed, &[tag_str("head")]),
    )?;

    let n = examples.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let sched = Schedule::with_warmup_fraction(cfg.peak_lr, total_steps, cfg.warmup_fraction)?;

    let mut state: AdamState<T> = AdamState::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut snapshot = (weights.clone(), adapters.clone(), head.clone());
    let mut global_step = 0u64;
    let mut diverged_at = None;

    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[tag_str("shuffle"), epoch as u64]));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        let mut epoch_hits = 0.0f64;
        let mut last_lr = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            global_step += 1;
            let lr = sched.lr_at(global_step as usize);
            last_lr = lr;

            let mut fwds = Vec::with_capacity(batch.len());
            let mut pooled = Array2::zeros((batch.len(), d_model));
            let mut labels = Vec::with_capacity(batch.len());
            for (row, &idx) in batch.iter().enumerate() {
                let ex = &examples[idx];
                let fwd = match &cfg.specaug {
                    Some(policy) => {
                        let masked = specaug(
                            &ex.features,
                            policy,
                            derive_seed(cfg.seed, &[tag_str("specaug"), epoch as u64, idx as u64]),
                        )?;
                        forward(&masked.frames, &weights, adapters.as_ref())?
                    }
                    None => forward(&ex.features.frames, &weights, adapters.as_ref())?,
                };
                if fwd.pooled.iter().any(|v| !v.is_finite()) {
                    log::warn!("non-finite embedding at step {global_step}; rolling back");
                    (weights, adapters, head) = snapshot;
                    diverged_at = Some(global_step);
                    break 'epochs;
                }
                pooled.row_mut(row).assign(&fwd.pooled);
                labels.push(ex.class);
                fwds.push(fwd);
            }

            let (loss, obj_grads) = arcface_grad(pooled.view(), &labels, &head)?;
            if !loss.to64().is_finite() {
                log::warn!("non-finite loss at step {global_step}; rolling back");
                (weights, adapters, head) = snapshot;
                diverged_at = Some(global_step);
                break 'epochs;
            }
            let acc = cosine_accuracy(pooled.view(), &labels, &head)?;

            let mut enc_grads = EncoderGrads::zeros_like(&weights);
            let mut ad_grads = adapters.as_ref().map(LoraGrads::zeros_like);
            for (row, fwd) in fwds.iter().enumerate() {
                let d_pooled = obj_grads.d_embeddings.row(row).to_owned();
                let (g, lg) = backward(&weights, adapters.as_ref(), fwd, &d_pooled);
                enc_grads.accumulate(&g);
                if let (Some(acc_g), Some(lg)) = (ad_grads.as_mut(), lg) {
                    acc_g.accumulate(&lg);
                }
            }

            let mut head_grad = obj_grads.d_weights;
            if let Some(max_norm) = cfg.grad_clip {
                clip_gradients(
                    &mut enc_grads,
                    ad_grads.as_mut(),
                    &mut head_grad,
                    cfg.mode,
                    max_norm,
                );
            }

            let step_result = match cfg.mode {
                TrainMode::Lora => {
                    let set = adapters.as_mut().expect("lora mode has adapters");
                    let grads = ad_grads.as_ref().expect("lora mode has adapter grads");
                    let mut params: Vec<(String, ArrayViewMutD<'_, T>)> = Vec::new();
                    let mut gviews: Vec<(String, ArrayViewD<'_, T>)> = Vec::new();
                    for (ad, (da, db)) in set.adapters.iter_mut().zip(&grads.per_site) {
                        let prefix = format!("lora.{}.{}", ad.site.layer, ad.site.matrix);
                        params.push((format!("{prefix}.A"), ad.a.view_mut().into_dyn()));
                        params.push((format!("{prefix}.B"), ad.b.view_mut().into_dyn()));
                        gviews.push((format!("{prefix}.A"), da.view().into_dyn()));
                        gviews.push((format!("{prefix}.B"), db.view().into_dyn()));
                    }
                    params.push(("head.W".into(), head.weights.view_mut().into_dyn()));
                    gviews.push(("head.W".into(), head_grad.view().into_dyn()));
                    adam_step(&mut state, &mut params, &gviews, T::of(lr))
                }
                TrainMode::Full => {
                    let mut params = weights.named_views_mut();
                    let mut gviews = enc_grads.named_views();
                    params.push(("head.W".into(), head.weights.view_mut().into_dyn()));
                    gviews.push(("head.W".into(), head_grad.view().into_dyn()));
                    adam_step(&mut state, &mut params, &gviews, T::of(lr))
                }
            };
            match step_result {
                Ok(()) => {}
                Err(Error::NonFiniteGradient { name }) => {
                    log::warn!("non-finite gradient in {name} at step {global_step}; rolling back");
                    (weights, adapters, head) = snapshot;
                    diverged_at = Some(global_step);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }

            epoch_loss += loss.to64() * batch.len() as f64;
            epoch_hits += acc * batch.len() as f64;
        }

        log.push(EpochStats {
            epoch,
            step: global_step,
            lr: last_lr,
            loss: epoch_loss / n as f64,
            acc: epoch_hits / n as f64,
        });
        snapshot = (weights.clone(), adapters.clone(), head.clone());
    }

    Ok(TrainOutcome { weights, adapters, head, log, diverged_at })
}

/// Scales the active gradient set so its global L2 norm is at most
/// `max_norm`.
fn clip_gradients<T: Real>(
    enc: &mut EncoderGrads<T>,
    lora: Option<&mut LoraGrads<T>>,
    head: &mut Array2<T>,
    mode: TrainMode,
    max_norm: f64,
) {
    let mut sq = head.iter().map(|g| g.to64() * g.to64()).sum::<f64>();
    match mode {
        TrainMode::Lora => {
            if let Some(lg) = &lora {
                for (a, b) in &lg.per_site {
                    sq += a.iter().map(|g| g.to64() * g.to64()).sum::<f64>();
                    sq += b.iter().map(|g| g.to64() * g.to64()).sum::<f64>();
                }
            }
        }
        TrainMode::Full => {
            for (_, v) in enc.named_views() {
                sq += v.iter().map(|g| g.to64() * g.to64()).sum::<f64>();
            }
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return;
    }
    let c = T::of(max_norm / norm);
    head.mapv_inplace(|g| g * c);
    match mode {
        TrainMode::Lora => {
            if let Some(lg) = lora {
                lg.scale(c);
            }
        }
        TrainMode::Full => enc.scale(c),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::MatrixKind;
    use crate::model::EncoderConfig;
    use crate::objective::gaussian_matrix;

    fn scalar_views<'a>(
        p: &'a mut ndarray::Array1<f64>,
        g: &'a ndarray::Array1<f64>,
    ) -> (Vec<(String, ArrayViewMutD<'a, f64>)>, Vec<(String, ArrayViewD<'a, f64>)>) {
        (
            vec![("theta".to_string(), p.view_mut().into_dyn())],
            vec![("theta".to_string(), g.view().into_dyn())],
        )
    }

    #[test]
    fn zero_gradients_leave_parameters_alone() {
        let mut state: AdamState<f64> = AdamState::new();
        let mut p = ndarray::Array1::from_vec(vec![1.5, -2.0]);
        let g = ndarray::Array1::zeros(2);
        let before = p.clone();
        let (mut pv, gv) = scalar_views(&mut p, &g);
        adam_step(&mut state, &mut pv, &gv, 0.1).unwrap();
        drop(pv);
        assert_eq!(p, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_moves_by_almost_exactly_lr() {
        let mut state: AdamState<f64> = AdamState::new();
        let mut p = ndarray::Array1::from_vec(vec![0.0]);
        let g = ndarray::Array1::from_vec(vec![1.0]);
        let (mut pv, gv) = scalar_views(&mut p, &g);
        adam_step(&mut state, &mut pv, &gv, 0.1).unwrap();
        drop(pv);
        // Bias correction makes m̂ = v̂ = 1, so the move is lr/(1+eps).
        assert!((p[0] + 0.1 / (1.0 + ADAM_EPS)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_trace_matches_hand_rolled_adam() {
        // Minimize f(x) = x²/2 (gradient x) for three steps and compare to an
        // explicitly written update trace.
        let mut state: AdamState<f64> = AdamState::new();
        let mut p = ndarray::Array1::from_vec(vec![1.0]);
        let lr = 0.05;

        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=3u32 {
            let g = theta;
            m = BETA1 * m + (1.0 - BETA1) * g;
            v = BETA2 * v + (1.0 - BETA2) * g * g;
            let mh = m / (1.0 - BETA1.powi(t as i32));
            let vh = v / (1.0 - BETA2.powi(t as i32));
            theta -= lr * mh / (vh.sqrt() + ADAM_EPS);

            let g_arr = ndarray::Array1::from_vec(vec![p[0]]);
            let (mut pv, gv) = scalar_views(&mut p, &g_arr);
            adam_step(&mut state, &mut pv, &gv, lr).unwrap();
        }
        assert!((p[0] - theta).abs() < 1e-15, "{} vs {theta}", p[0]);
    }

    #[test]
    fn non_finite_gradient_aborts_without_touching_parameters() {
        let mut state: AdamState<f64> = AdamState::new();
        let mut p = ndarray::Array1::from_vec(vec![1.0, 2.0]);
        let g = ndarray::Array1::from_vec(vec![0.5, f64::NAN]);
        let before = p.clone();
        let (mut pv, gv) = scalar_views(&mut p, &g);
        let err = adam_step(&mut state, &mut pv, &gv, 0.1).unwrap_err();
        drop(pv);
        assert!(matches!(err, Error::NonFiniteGradient { ref name } if name == "theta"));
        assert_eq!(p, before);
        assert_eq!(state.t, 0, "aborted step must not advance the counter");
    }

    #[test]
    fn update_magnitude_is_bounded_after_warm_start() {
        let mut state: AdamState<f64> = AdamState::new();
        let mut p = gaussian_matrix::<f64>(1, 16, 1.0, 3).row(0).to_owned();
        let lr = 0.01;
        for step in 0..30u64 {
            let g = gaussian_matrix::<f64>(1, 16, 1.0, 100 + step).row(0).to_owned();
            let before = p.clone();
            let mut pv = vec![("p".to_string(), p.view_mut().into_dyn())];
            let gv = vec![("p".to_string(), g.view().into_dyn())];
            adam_step(&mut state, &mut pv, &gv, lr).unwrap();
            drop(pv);
            if state.t >= 10 {
                for (a, b) in p.iter().zip(before.iter()) {
                    assert!((a - b).abs() <= 10.0 * lr, "update {} exceeds bound", (a - b).abs());
                }
            }
        }
    }

    #[test]
    fn warmup_schedule_is_linear_then_flat() {
        let s = Schedule::new(5e-5, 10, 100).unwrap();
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(5) - 2.5e-5).abs() < 1e-20);
        assert_eq!(s.lr_at(10), 5e-5);
        assert_eq!(s.lr_at(73), 5e-5);
        assert!(Schedule::new(1.0, 0, 10).is_err());
        assert!(Schedule::new(1.0, 11, 10).is_err());
        let tenth = Schedule::with_warmup_fraction(1.0, 200, 0.1).unwrap();
        assert_eq!(tenth.warmup_steps, 20);
    }

    fn toy_config() -> EncoderConfig {
        EncoderConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            patch_frames: 2,
            patch_bins: 2,
            mlp_ratio: 2,
            max_tokens: 16,
        }
    }

    /// Two well-separated classes of 4x4 feature maps.
    fn toy_examples() -> Vec<TrainExample<f64>> {
        let mut out = Vec::new();
        for i in 0..6u64 {
            for class in 0..2usize {
                let noise = gaussian_matrix::<f64>(4, 4, 0.1, 1000 + i * 2 + class as u64);
                let frames = ndarray::Array2::from_shape_fn((4, 4), |(t, f)| {
                    let pattern = if class == 0 { (t + f) as f64 } else { (t * f) as f64 * -1.0 };
                    pattern + noise[[t, f]]
                });
                out.push(TrainExample {
                    features: Spectrogram { frames, hop_seconds: 0.01, window_seconds: 0.025 },
                    class,
                });
            }
        }
        out
    }

    fn toy_train_config(mode: TrainMode, epochs: usize) -> TrainConfig {
        TrainConfig {
            mode,
            batch_size: 4,
            epochs,
            seed: 7,
            peak_lr: 0.02,
            warmup_fraction: 0.1,
            specaug: None,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adapter_training_reduces_loss_and_freezes_the_base() {
        let weights: EncoderWeights<f64> = EncoderWeights::init(toy_config(), 11).unwrap();
        let base_digest = weights.digest();
        let plan = LoraPlan::uniform(2, &[MatrixKind::Q, MatrixKind::V], 2);
        let out = train(&toy_examples(), 2, weights, Some(&plan), &toy_train_config(TrainMode::Lora, 6))
            .unwrap();
        assert!(out.diverged_at.is_none());
        assert_eq!(out.log.len(), 6);
        assert!(out.log[5].loss < out.log[0].loss, "{:?}", out.log);
        assert_eq!(out.weights.digest(), base_digest, "base weights moved in adapter mode");
        let set = out.adapters.as_ref().unwrap();
        assert_eq!(set.adapters.len(), 4);
        assert!(set.adapters.iter().any(|ad| ad.b.iter().any(|v| *v != 0.0)));
        assert_eq!(out.trainable_params(), set.param_count() + out.head.weights.len());
    }

    #[test]
    fn full_training_updates_the_base() {
        let weights: EncoderWeights<f64> = EncoderWeights::init(toy_config(), 11).unwrap();
        let base_digest = weights.digest();
        let out =
            train(&toy_examples(), 2, weights, None, &toy_train_config(TrainMode::Full, 2)).unwrap();
        assert!(out.diverged_at.is_none());
        assert_ne!(out.weights.digest(), base_digest);
        assert_eq!(out.trainable_params(), out.weights.param_count() + out.head.weights.len());
    }

    #[test]
    fn same_seed_reproduces_the_log_byte_for_byte() {
        let run = || {
            let weights: EncoderWeights<f64> = EncoderWeights::init(toy_config(), 11).unwrap();
            let plan = LoraPlan::uniform(2, &[MatrixKind::V], 2);
            let cfg = TrainConfig {
                specaug: Some(SpecAugPolicy {
                    freq_mask_width_max: 2,
                    time_mask_width_max: 2,
                    ..SpecAugPolicy::default()
                }),
                ..toy_train_config(TrainMode::Lora, 3)
            };
            train(&toy_examples(), 2, weights, Some(&plan), &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        let lines = |o: &TrainOutcome<f64>| {
            o.log.iter().map(|s| format!("{}\n{}", s.tsv_line(), s.jsonl_line())).collect::<Vec<_>>()
        };
        assert_eq!(lines(&a), lines(&b));
        for (x, y) in a
            .adapters
            .unwrap()
            .adapters
            .iter()
            .zip(b.adapters.unwrap().adapters.iter())
        {
            assert_eq!(x.a, y.a);
            assert_eq!(x.b, y.b);
        }
    }

    #[test]
    fn divergence_rolls_back_to_the_last_finite_epoch() {
        let weights: EncoderWeights<f64> = EncoderWeights::init(toy_config(), 11).unwrap();
        let mut examples = toy_examples();
        // The poisoned clip turns its embedding non-finite the first time the
        // shuffle visits it, which must end the run via the rollback path.
        examples[0].features.frames[[0, 0]] = f64::NAN;
        let plan = LoraPlan::uniform(2, &[MatrixKind::V], 2);
        let out = train(&examples, 2, weights, Some(&plan), &toy_train_config(TrainMode::Lora, 3))
            .unwrap();
        let step = out.diverged_at.expect("poisoned clip must trigger rollback");
        assert!(step >= 1);
        // Rolled-back adapters are from an epoch boundary: either still fresh
        // (B all zero when divergence hit in epoch 1) or a finite snapshot.
        let set = out.adapters.as_ref().unwrap();
        for ad in &set.adapters {
            assert!(ad.a.iter().chain(ad.b.iter()).all(|v| v.is_finite()));
        }
        assert!(out.log.len() < 3);
    }

    #[test]
    fn mode_strings_parse() {
        assert_eq!(TrainMode::from_str("lora").unwrap(), TrainMode::Lora);
        assert_eq!(TrainMode::from_str("FULL").unwrap(), TrainMode::Full);
        assert!(TrainMode::from_str("adapter").is_err());
    }

    #[test]
    fn lora_mode_requires_a_plan_and_full_mode_rejects_one() {
        let weights: EncoderWeights<f64> = EncoderWeights::init(toy_config(), 1).unwrap();
        let cfg = toy_train_config(TrainMode::Lora, 1);
        assert!(train(&toy_examples(), 2, weights.clone(), None, &cfg).is_err());
        let plan = LoraPlan::uniform(2, &[MatrixKind::V], 2);
        let cfg = toy_train_config(TrainMode::Full, 1);
        assert!(train(&toy_examples(), 2, weights, Some(&plan), &cfg).is_err());
    }

    #[test]
    fn gradient_clipping_bounds_the_global_norm() {
        let weights: EncoderWeights<f64> = EncoderWeights::init(toy_config(), 2).unwrap();
        let mut enc = EncoderGrads::zeros_like(&weights);
        enc.patch_w.fill(3.0);
        let mut head = ndarray::Array2::from_elem((2, 8), 4.0);
        clip_gradients(&mut enc, None, &mut head, TrainMode::Full, 1.0);
        let mut sq = head.iter().map(|g| g * g).sum::<f64>();
        for (_, v) in enc.named_views() {
            sq += v.iter().map(|g| g * g).sum::<f64>();
        }
        assert!((sq.sqrt() - 1.0).abs() < 1e-9);
    }
}
