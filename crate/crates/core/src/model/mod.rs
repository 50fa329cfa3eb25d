//! Patch-based transformer encoder over log-mel spectrograms.
//!
//! The spectrogram is cut into 16×16 patches (time padded by repeating the
//! last frame), each patch linearly projected to `d_model` and tagged with a
//! fixed sinusoidal position code. A stack of pre-norm attention/MLP blocks
//! follows; the clip embedding is the mean of the final-norm tokens.
//!
//! Attention projections accept low-rank adapters, and the whole stack has a
//! hand-derived reverse pass validated against finite differences.

pub mod checkpoint;

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};

use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraSet, MatrixKind};
use crate::objective::gaussian_matrix;
use crate::rng::{derive_seed, tag_str};
use crate::scalar::Real;

const LN_EPS: f64 = 1e-5;
const GELU_C1: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C2: f64 = 0.044_715;

/// Encoder architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub patch_frames: usize,
    pub patch_bins: usize,
    pub mlp_ratio: usize,
    pub max_tokens: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 12,
            d_model: 48,
            n_heads: 4,
            patch_frames: 16,
            patch_bins: 16,
            mlp_ratio: 4,
            max_tokens: 2048,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::InvalidConfig("encoder needs at least one layer".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.patch_frames == 0 || self.patch_bins == 0 {
            return Err(Error::InvalidConfig("patch dimensions must be positive".into()));
        }
        if self.mlp_ratio == 0 || self.max_tokens == 0 {
            return Err(Error::InvalidConfig("mlp_ratio and max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_frames * self.patch_bins
    }

    pub fn d_mlp(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Dense parameter count of an encoder with this architecture.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let patch_dim = self.patch_frames * self.patch_bins;
        let d_mlp = self.mlp_ratio * d;
        let per_layer = 2 * d + 4 * d * d + 2 * d + d * d_mlp + d_mlp + d_mlp * d + d;
        patch_dim * d + d + self.n_layers * per_layer + 2 * d
    }

    /// Tokens produced for a clip of `n_frames`×`n_bins`:
    /// ceil(T/patch_frames) · (F/patch_bins).
    pub fn token_count(&self, n_frames: usize, n_bins: usize) -> Result<usize> {
        if n_frames == 0 || n_bins == 0 {
            return Err(Error::EmptySpectrogram);
        }
        if n_bins % self.patch_bins != 0 {
            return Err(Error::shape(
                "patch grid",
                format!("bin count divisible by {}", self.patch_bins),
                n_bins,
            ));
        }
        let n_time = n_frames.div_ceil(self.patch_frames);
        let tokens = n_time * (n_bins / self.patch_bins);
        if tokens > self.max_tokens {
            return Err(Error::InvalidConfig(format!(
                "{tokens} tokens exceed max_tokens {}",
                self.max_tokens
            )));
        }
        Ok(tokens)
    }
}

/// One pre-norm transformer block's parameters.
#[derive(Debug, Clone)]
pub struct LayerWeights<T: Real> {
    pub ln1_gamma: Array1<T>,
    pub ln1_beta: Array1<T>,
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub ln2_gamma: Array1<T>,
    pub ln2_beta: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

/// Full encoder parameter set.
#[derive(Debug, Clone)]
pub struct EncoderWeights<T: Real> {
    pub config: EncoderConfig,
    pub patch_w: Array2<T>,
    pub patch_b: Array1<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_gamma: Array1<T>,
    pub final_beta: Array1<T>,
}

/// Clip embedding with its identifier.
#[derive(Debug, Clone)]
pub struct Embedding<T: Real> {
    pub clip_id: String,
    pub vector: Array1<T>,
}

impl<T: Real> EncoderWeights<T> {
    /// Seeded Gaussian init (std 0.02) for projections, identity layer norms,
    /// zero biases. Each tensor's draw depends only on (seed, tensor name).
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let dm = config.d_mlp();
        let pd = config.patch_dim();
        let mat = |name: &str, rows, cols| {
            gaussian_matrix::<T>(rows, cols, 0.02, derive_seed(seed, &[tag_str(name)]))
        };
        let layers = (1..=config.n_layers)
            .map(|l| LayerWeights {
                ln1_gamma: Array1::ones(d),
                ln1_beta: Array1::zeros(d),
                wq: mat(&format!("layer.{l}.attn.wq"), d, d),
                wk: mat(&format!("layer.{l}.attn.wk"), d, d),
                wv: mat(&format!("layer.{l}.attn.wv"), d, d),
                wo: mat(&format!("layer.{l}.attn.wo"), d, d),
                ln2_gamma: Array1::ones(d),
                ln2_beta: Array1::zeros(d),
                w1: mat(&format!("layer.{l}.mlp.w1"), dm, d),
                b1: Array1::zeros(dm),
                w2: mat(&format!("layer.{l}.mlp.w2"), d, dm),
                b2: Array1::zeros(d),
            })
            .collect();
        Ok(EncoderWeights {
            config,
            patch_w: mat("patch.w", d, pd),
            patch_b: Array1::zeros(d),
            layers,
            final_gamma: Array1::ones(d),
            final_beta: Array1::zeros(d),
        })
    }

    /// The base projection matrix at an adapter site.
    pub fn attn_weight(&self, layer_1based: usize, matrix: MatrixKind) -> &Array2<T> {
        let lw = &self.layers[layer_1based - 1];
        match matrix {
            MatrixKind::K => &lw.wk,
            MatrixKind::Q => &lw.wq,
            MatrixKind::V => &lw.wv,
        }
    }

    pub fn attn_weight_mut(&mut self, layer_1based: usize, matrix: MatrixKind) -> &mut Array2<T> {
        let lw = &mut self.layers[layer_1based - 1];
        match matrix {
            MatrixKind::K => &mut lw.wk,
            MatrixKind::Q => &mut lw.wq,
            MatrixKind::V => &mut lw.wv,
        }
    }

    /// Parameter count of the encoder proper (head excluded).
    pub fn param_count(&self) -> usize {
        self.named_views().iter().map(|(_, v)| v.len()).sum()
    }

    /// Stable (name, view) enumeration covering every tensor.
    pub fn named_views(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out: Vec<(String, ArrayViewD<'_, T>)> = Vec::new();
        out.push(("patch.w".into(), self.patch_w.view().into_dyn()));
        out.push(("patch.b".into(), self.patch_b.view().into_dyn()));
        for (i, lw) in self.layers.iter().enumerate() {
            let l = i + 1;
            out.push((format!("layer.{l}.ln1.gamma"), lw.ln1_gamma.view().into_dyn()));
            out.push((format!("layer.{l}.ln1.beta"), lw.ln1_beta.view().into_dyn()));
            out.push((format!("layer.{l}.attn.wq"), lw.wq.view().into_dyn()));
            out.push((format!("layer.{l}.attn.wk"), lw.wk.view().into_dyn()));
            out.push((format!("layer.{l}.attn.wv"), lw.wv.view().into_dyn()));
            out.push((format!("layer.{l}.attn.wo"), lw.wo.view().into_dyn()));
            out.push((format!("layer.{l}.ln2.gamma"), lw.ln2_gamma.view().into_dyn()));
            out.push((format!("layer.{l}.ln2.beta"), lw.ln2_beta.view().into_dyn()));
            out.push((format!("layer.{l}.mlp.w1"), lw.w1.view().into_dyn()));
            out.push((format!("layer.{l}.mlp.b1"), lw.b1.view().into_dyn()));
            out.push((format!("layer.{l}.mlp.w2"), lw.w2.view().into_dyn()));
            out.push((format!("layer.{l}.mlp.b2"), lw.b2.view().into_dyn()));
        }
        out.push(("final_ln.gamma".into(), self.final_gamma.view().into_dyn()));
        out.push(("final_ln.beta".into(), self.final_beta.view().into_dyn()));
        out
    }

    /// Mutable variant of [`named_views`], same order.
    pub fn named_views_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, T>)> = Vec::new();
        out.push(("patch.w".into(), self.patch_w.view_mut().into_dyn()));
        out.push(("patch.b".into(), self.patch_b.view_mut().into_dyn()));
        for (i, lw) in self.layers.iter_mut().enumerate() {
            let l = i + 1;
            out.push((format!("layer.{l}.ln1.gamma"), lw.ln1_gamma.view_mut().into_dyn()));
            out.push((format!("layer.{l}.ln1.beta"), lw.ln1_beta.view_mut().into_dyn()));
            out.push((format!("layer.{l}.attn.wq"), lw.wq.view_mut().into_dyn()));
            out.push((format!("layer.{l}.attn.wk"), lw.wk.view_mut().into_dyn()));
            out.push((format!("layer.{l}.attn.wv"), lw.wv.view_mut().into_dyn()));
            out.push((format!("layer.{l}.attn.wo"), lw.wo.view_mut().into_dyn()));
            out.push((format!("layer.{l}.ln2.gamma"), lw.ln2_gamma.view_mut().into_dyn()));
            out.push((format!("layer.{l}.ln2.beta"), lw.ln2_beta.view_mut().into_dyn()));
            out.push((format!("layer.{l}.mlp.w1"), lw.w1.view_mut().into_dyn()));
            out.push((format!("layer.{l}.mlp.b1"), lw.b1.view_mut().into_dyn()));
            out.push((format!("layer.{l}.mlp.w2"), lw.w2.view_mut().into_dyn()));
            out.push((format!("layer.{l}.mlp.b2"), lw.b2.view_mut().into_dyn()));
        }
        out.push(("final_ln.gamma".into(), self.final_gamma.view_mut().into_dyn()));
        out.push(("final_ln.beta".into(), self.final_beta.view_mut().into_dyn()));
        out
    }

    /// Order-stable hash of all tensors' single-precision bytes; two weight
    /// sets with equal digests are byte-identical at storage precision.
    pub fn digest(&self) -> u64 {
        const PRIME: u64 = 0x1000_0000_01b3;
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (name, view) in self.named_views() {
            for byte in name.as_bytes() {
                h = (h ^ *byte as u64).wrapping_mul(PRIME);
            }
            for v in view.iter() {
                for byte in (v.to64() as f32).to_le_bytes() {
                    h = (h ^ byte as u64).wrapping_mul(PRIME);
                }
            }
        }
        h
    }
}

/// Fixed sinusoidal position table, computed at double precision.
pub fn sinusoidal_positions<T: Real>(n_tokens: usize, d_model: usize) -> Array2<T> {
    Array2::from_shape_fn((n_tokens, d_model), |(pos, j)| {
        let pair = (j / 2 * 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(pair / d_model as f64);
        T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Flattens a spectrogram into per-patch rows (no projection). Time patches
/// are right-padded by repeating the last frame; ordering is time-major
/// (all frequency patches of the first time slab, then the next slab).
pub fn extract_patches<T: Real>(
    frames: &Array2<T>,
    cfg: &EncoderConfig,
) -> Result<Array2<T>> {
    let (n_frames, n_bins) = frames.dim();
    let n_tokens = cfg.token_count(n_frames, n_bins)?;
    let n_freq = n_bins / cfg.patch_bins;
    let mut patches = Array2::zeros((n_tokens, cfg.patch_dim()));
    for token in 0..n_tokens {
        let (tp, fp) = (token / n_freq, token % n_freq);
        for df in 0..cfg.patch_frames {
            let frame = (tp * cfg.patch_frames + df).min(n_frames - 1);
            for db in 0..cfg.patch_bins {
                let bin = fp * cfg.patch_bins + db;
                patches[[token, df * cfg.patch_bins + db]] = frames[[frame, bin]];
            }
        }
    }
    Ok(patches)
}

/// Projects patches to `d_model` and adds the positional code.
pub fn patchify<T: Real>(frames: &Array2<T>, w: &EncoderWeights<T>) -> Result<Array2<T>> {
    let patches = extract_patches(frames, &w.config)?;
    Ok(project_patches(&patches, w))
}

fn project_patches<T: Real>(patches: &Array2<T>, w: &EncoderWeights<T>) -> Array2<T> {
    let mut tokens = patches.dot(&w.patch_w.t());
    tokens += &w.patch_b;
    tokens += &sinusoidal_positions::<T>(tokens.nrows(), w.config.d_model);
    tokens
}

fn gelu<T: Real>(x: T) -> T {
    let x64 = x.to64();
    let u = GELU_C1 * (x64 + GELU_C2 * x64 * x64 * x64);
    T::of(0.5 * x64 * (1.0 + u.tanh()))
}

fn gelu_prime<T: Real>(x: T) -> T {
    let x64 = x.to64();
    let u = GELU_C1 * (x64 + GELU_C2 * x64 * x64 * x64);
    let t = u.tanh();
    T::of(0.5 * (1.0 + t) + 0.5 * x64 * (1.0 - t * t) * GELU_C1 * (1.0 + 3.0 * GELU_C2 * x64 * x64))
}

struct LnCache<T: Real> {
    x_hat: Array2<T>,
    invstd: Array1<T>,
}

fn layer_norm<T: Real>(x: &Array2<T>, gamma: &Array1<T>, beta: &Array1<T>) -> (Array2<T>, LnCache<T>) {
    let (n, d) = x.dim();
    let eps = T::of(LN_EPS);
    let inv_d = T::one() / T::of(d as f64);
    let mut x_hat = Array2::zeros((n, d));
    let mut invstd = Array1::zeros(n);
    let mut y = Array2::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let is = T::one() / (var + eps).sqrt();
        invstd[i] = is;
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            x_hat[[i, j]] = xh;
            y[[i, j]] = gamma[j] * xh + beta[j];
        }
    }
    (y, LnCache { x_hat, invstd })
}

/// Backward through layer norm. Returns the input gradient and accumulates
/// the parameter gradients.
fn layer_norm_backward<T: Real>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    gamma: &Array1<T>,
    d_gamma: &mut Array1<T>,
    d_beta: &mut Array1<T>,
) -> Array2<T> {
    let (n, d) = dy.dim();
    let inv_d = T::one() / T::of(d as f64);
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 0..d {
            let dxh = dy[[i, j]] * gamma[j];
            s1 += dxh;
            s2 += dxh * cache.x_hat[[i, j]];
            d_gamma[j] += dy[[i, j]] * cache.x_hat[[i, j]];
            d_beta[j] += dy[[i, j]];
        }
        for j in 0..d {
            let dxh = dy[[i, j]] * gamma[j];
            dx[[i, j]] =
                cache.invstd[i] * (dxh - s1 * inv_d - cache.x_hat[[i, j]] * s2 * inv_d);
        }
    }
    dx
}

fn softmax_rows<T: Real>(scores: &mut Array2<T>) {
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
}

/// Adapted projection of a token matrix: `X·Wᵀ + scale·(X·Aᵀ)·Bᵀ`.
fn project_tokens<T: Real>(
    x: &Array2<T>,
    w: &Array2<T>,
    adapter: Option<&LoraAdapter<T>>,
) -> Array2<T> {
    let mut out = x.dot(&w.t());
    if let Some(ad) = adapter {
        out += &(x.dot(&ad.a.t()).dot(&ad.b.t()) * ad.scale());
    }
    out
}

struct LayerCache<T: Real> {
    ln1: LnCache<T>,
    y1: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    concat: Array2<T>,
    ln2: LnCache<T>,
    y2: Array2<T>,
    h_pre: Array2<T>,
    h_act: Array2<T>,
}

/// Activations of one full forward pass, kept for the reverse pass.
pub struct Forward<T: Real> {
    patches: Array2<T>,
    layers: Vec<LayerCache<T>>,
    final_ln: LnCache<T>,
    /// Mean-pooled clip embedding.
    pub pooled: Array1<T>,
}

impl<T: Real> Forward<T> {
    pub fn n_tokens(&self) -> usize {
        self.patches.nrows()
    }
}

fn attention<T: Real>(
    y1: &Array2<T>,
    lw: &LayerWeights<T>,
    layer_1based: usize,
    adapters: Option<&LoraSet<T>>,
    cfg: &EncoderConfig,
) -> (Array2<T>, Array2<T>, Array2<T>, Vec<Array2<T>>, Array2<T>) {
    let get = |m: MatrixKind| adapters.and_then(|set| set.get(layer_1based, m));
    let q = project_tokens(y1, &lw.wq, get(MatrixKind::Q));
    let k = project_tokens(y1, &lw.wk, get(MatrixKind::K));
    let v = project_tokens(y1, &lw.wv, get(MatrixKind::V));
    let (n, dh, heads) = (y1.nrows(), cfg.d_head(), cfg.n_heads);
    let scale = T::one() / T::of((dh as f64).sqrt());
    let mut probs = Vec::with_capacity(heads);
    let mut concat = Array2::zeros((n, cfg.d_model));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t()) * scale;
        softmax_rows(&mut scores);
        let oh = scores.dot(&vh);
        concat.slice_mut(cols).assign(&oh);
        probs.push(scores);
    }
    (q, k, v, probs, concat)
}

/// Runs the encoder over a standardized spectrogram, returning the pooled
/// embedding together with every intermediate the reverse pass needs.
pub fn forward<T: Real>(
    frames: &Array2<T>,
    w: &EncoderWeights<T>,
    adapters: Option<&LoraSet<T>>,
) -> Result<Forward<T>> {
    check_adapters(w, adapters)?;
    let patches = extract_patches(frames, &w.config)?;
    let tokens = project_patches(&patches, w);
    forward_tokens(patches, tokens, w, adapters)
}

fn forward_tokens<T: Real>(
    patches: Array2<T>,
    tokens: Array2<T>,
    w: &EncoderWeights<T>,
    adapters: Option<&LoraSet<T>>,
) -> Result<Forward<T>> {
    let cfg = &w.config;
    let mut x = tokens;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (i, lw) in w.layers.iter().enumerate() {
        let (y1, ln1) = layer_norm(&x, &lw.ln1_gamma, &lw.ln1_beta);
        let (q, k, v, probs, concat) = attention(&y1, lw, i + 1, adapters, cfg);
        let x_mid = &x + &concat.dot(&lw.wo.t());
        let (y2, ln2) = layer_norm(&x_mid, &lw.ln2_gamma, &lw.ln2_beta);
        let mut h_pre = y2.dot(&lw.w1.t());
        h_pre += &lw.b1;
        let h_act = h_pre.mapv(gelu);
        let mut x_out = h_act.dot(&lw.w2.t());
        x_out += &lw.b2;
        x_out += &x_mid;
        layers.push(LayerCache { ln1, y1, q, k, v, probs, concat, ln2, y2, h_pre, h_act });
        x = x_out;
    }
    let (y_final, final_ln) = layer_norm(&x, &w.final_gamma, &w.final_beta);
    let pooled = y_final.mean_axis(Axis(0)).expect("at least one token");
    Ok(Forward { patches, layers, final_ln, pooled })
}

fn check_adapters<T: Real>(w: &EncoderWeights<T>, adapters: Option<&LoraSet<T>>) -> Result<()> {
    let Some(set) = adapters else { return Ok(()) };
    for ad in &set.adapters {
        if ad.site.layer == 0 || ad.site.layer > w.config.n_layers {
            return Err(Error::AdapterSiteOutOfRange {
                layer: ad.site.layer,
                n_layers: w.config.n_layers,
            });
        }
        let d = w.config.d_model;
        if ad.a.ncols() != d || ad.b.nrows() != d || ad.a.nrows() != ad.b.ncols() {
            return Err(Error::AdapterMismatch(format!(
                "layer {} {}: A is {:?}, B is {:?}, d_model is {d}",
                ad.site.layer,
                ad.site.matrix,
                ad.a.dim(),
                ad.b.dim()
            )));
        }
    }
    Ok(())
}

/// Deterministic clip embedding.
pub fn encode<T: Real>(
    frames: &Array2<T>,
    w: &EncoderWeights<T>,
    adapters: Option<&LoraSet<T>>,
) -> Result<Array1<T>> {
    Ok(forward(frames, w, adapters)?.pooled)
}

/// Gradients for every encoder tensor, shaped like the weights.
pub struct EncoderGrads<T: Real> {
    pub patch_w: Array2<T>,
    pub patch_b: Array1<T>,
    pub layers: Vec<LayerGrads<T>>,
    pub final_gamma: Array1<T>,
    pub final_beta: Array1<T>,
}

pub struct LayerGrads<T: Real> {
    pub ln1_gamma: Array1<T>,
    pub ln1_beta: Array1<T>,
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub ln2_gamma: Array1<T>,
    pub ln2_beta: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

/// Adapter gradients, one `(dA, dB)` pair per adapter in set order.
pub struct LoraGrads<T: Real> {
    pub per_site: Vec<(Array2<T>, Array2<T>)>,
}

impl<T: Real> EncoderGrads<T> {
    pub fn zeros_like(w: &EncoderWeights<T>) -> Self {
        EncoderGrads {
            patch_w: Array2::zeros(w.patch_w.raw_dim()),
            patch_b: Array1::zeros(w.patch_b.raw_dim()),
            layers: w
                .layers
                .iter()
                .map(|lw| LayerGrads {
                    ln1_gamma: Array1::zeros(lw.ln1_gamma.raw_dim()),
                    ln1_beta: Array1::zeros(lw.ln1_beta.raw_dim()),
                    wq: Array2::zeros(lw.wq.raw_dim()),
                    wk: Array2::zeros(lw.wk.raw_dim()),
                    wv: Array2::zeros(lw.wv.raw_dim()),
                    wo: Array2::zeros(lw.wo.raw_dim()),
                    ln2_gamma: Array1::zeros(lw.ln2_gamma.raw_dim()),
                    ln2_beta: Array1::zeros(lw.ln2_beta.raw_dim()),
                    w1: Array2::zeros(lw.w1.raw_dim()),
                    b1: Array1::zeros(lw.b1.raw_dim()),
                    w2: Array2::zeros(lw.w2.raw_dim()),
                    b2: Array1::zeros(lw.b2.raw_dim()),
                })
                .collect(),
            final_gamma: Array1::zeros(w.final_gamma.raw_dim()),
            final_beta: Array1::zeros(w.final_beta.raw_dim()),
        }
    }

    /// Adds `other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &EncoderGrads<T>) {
        self.patch_w += &other.patch_w;
        self.patch_b += &other.patch_b;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.ln1_gamma += &b.ln1_gamma;
            a.ln1_beta += &b.ln1_beta;
            a.wq += &b.wq;
            a.wk += &b.wk;
            a.wv += &b.wv;
            a.wo += &b.wo;
            a.ln2_gamma += &b.ln2_gamma;
            a.ln2_beta += &b.ln2_beta;
            a.w1 += &b.w1;
            a.b1 += &b.b1;
            a.w2 += &b.w2;
            a.b2 += &b.b2;
        }
        self.final_gamma += &other.final_gamma;
        self.final_beta += &other.final_beta;
    }

    /// Multiplies every gradient by a constant.
    pub fn scale(&mut self, c: T) {
        for (_, mut view) in self.named_views_mut() {
            view.mapv_inplace(|v| v * c);
        }
    }

    /// Same names and order as [`EncoderWeights::named_views`].
    pub fn named_views(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out: Vec<(String, ArrayViewD<'_, T>)> = Vec::new();
        out.push(("patch.w".into(), self.patch_w.view().into_dyn()));
        out.push(("patch.b".into(), self.patch_b.view().into_dyn()));
        for (i, lg) in self.layers.iter().enumerate() {
            let l = i + 1;
            out.push((format!("layer.{l}.ln1.gamma"), lg.ln1_gamma.view().into_dyn()));
            out.push((format!("layer.{l}.ln1.beta"), lg.ln1_beta.view().into_dyn()));
            out.push((format!("layer.{l}.attn.wq"), lg.wq.view().into_dyn()));
            out.push((format!("layer.{l}.attn.wk"), lg.wk.view().into_dyn()));
            out.push((format!("layer.{l}.attn.wv"), lg.wv.view().into_dyn()));
            out.push((format!("layer.{l}.attn.wo"), lg.wo.view().into_dyn()));
            out.push((format!("layer.{l}.ln2.gamma"), lg.ln2_gamma.view().into_dyn()));
            out.push((format!("layer.{l}.ln2.beta"), lg.ln2_beta.view().into_dyn()));
            out.push((format!("layer.{l}.mlp.w1"), lg.w1.view().into_dyn()));
            out.push((format!("layer.{l}.mlp.b1"), lg.b1.view().into_dyn()));
            out.push((format!("layer.{l}.mlp.w2"), lg.w2.view().into_dyn()));
            out.push((format!("layer.{l}.mlp.b2"), lg.b2.view().into_dyn()));
        }
        out.push(("final_ln.gamma".into(), self.final_gamma.view().into_dyn()));
        out.push(("final_ln.beta".into(), self.final_beta.view().into_dyn()));
        out
    }

    pub fn named_views_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, T>)> = Vec::new();
        out.push(("patch.w".into(), self.patch_w.view_mut().into_dyn()));
        out.push(("patch.b".into(), self.patch_b.view_mut().into_dyn()));
        for (i, lg) in self.layers.iter_mut().enumerate() {
            let l = i + 1;
            out.push((format!("layer.{l}.ln1.gamma"), lg.ln1_gamma.view_mut().into_dyn()));
            out.push((format!("layer.{l}.ln1.beta"), lg.ln1_beta.view_mut().into_dyn()));
            out.push((format!("layer.{l}.attn.wq"), lg.wq.view_mut().into_dyn()));
            out.push((format!("layer.{l}.attn.wk"), lg.wk.view_mut().into_dyn()));
            out.push((format!("layer.{l}.attn.wv"), lg.wv.view_mut().into_dyn()));
            out.push((format!("layer.{l}.attn.wo"), lg.wo.view_mut().into_dyn()));
            out.push((format!("layer.{l}.ln2.gamma"), lg.ln2_gamma.view_mut().into_dyn()));
            out.push((format!("layer.{l}.ln2.beta"), lg.ln2_beta.view_mut().into_dyn()));
            out.push((format!("layer.{l}.mlp.w1"), lg.w1.view_mut().into_dyn()));
            out.push((format!("layer.{l}.mlp.b1"), lg.b1.view_mut().into_dyn()));
            out.push((format!("layer.{l}.mlp.w2"), lg.w2.view_mut().into_dyn()));
            out.push((format!("layer.{l}.mlp.b2"), lg.b2.view_mut().into_dyn()));
        }
        out.push(("final_ln.gamma".into(), self.final_gamma.view_mut().into_dyn()));
        out.push(("final_ln.beta".into(), self.final_beta.view_mut().into_dyn()));
        out
    }
}

impl<T: Real> LoraGrads<T> {
    pub fn zeros_like(set: &LoraSet<T>) -> Self {
        LoraGrads {
            per_site: set
                .adapters
                .iter()
                .map(|ad| (Array2::zeros(ad.a.raw_dim()), Array2::zeros(ad.b.raw_dim())))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &LoraGrads<T>) {
        for ((a, b), (oa, ob)) in self.per_site.iter_mut().zip(&other.per_site) {
            *a += oa;
            *b += ob;
        }
    }

    pub fn scale(&mut self, c: T) {
        for (a, b) in self.per_site.iter_mut() {
            a.mapv_inplace(|v| v * c);
            b.mapv_inplace(|v| v * c);
        }
    }
}

/// Reverse pass from a gradient on the pooled embedding. Returns gradients
/// for all base tensors and, when adapters are attached, for each (A, B).
pub fn backward<T: Real>(
    w: &EncoderWeights<T>,
    adapters: Option<&LoraSet<T>>,
    fwd: &Forward<T>,
    d_pooled: &Array1<T>,
) -> (EncoderGrads<T>, Option<LoraGrads<T>>) {
    let cfg = &w.config;
    let n = fwd.patches.nrows();
    let mut grads = EncoderGrads::zeros_like(w);
    let mut lora_grads = adapters.map(LoraGrads::zeros_like);

    // Mean pool spreads the gradient evenly over tokens.
    let inv_n = T::one() / T::of(n as f64);
    let mut dy_final = Array2::zeros((n, cfg.d_model));
    for i in 0..n {
        for j in 0..cfg.d_model {
            dy_final[[i, j]] = d_pooled[j] * inv_n;
        }
    }
    let mut dx = layer_norm_backward(
        &dy_final,
        &fwd.final_ln,
        &w.final_gamma,
        &mut grads.final_gamma,
        &mut grads.final_beta,
    );

    for (i, (lw, lc)) in w.layers.iter().zip(&fwd.layers).enumerate().rev() {
        let lg = &mut grads.layers[i];
        // x_out = x_mid + MLP(LN2(x_mid)); dx arrives as d(x_out).
        let d_m = &dx;
        lg.w2 += &d_m.t().dot(&lc.h_act);
        lg.b2 += &d_m.sum_axis(Axis(0));
        let mut d_h = d_m.dot(&lw.w2);
        ndarray::Zip::from(&mut d_h).and(&lc.h_pre).for_each(|g, &h| *g *= gelu_prime(h));
        lg.w1 += &d_h.t().dot(&lc.y2);
        lg.b1 += &d_h.sum_axis(Axis(0));
        let dy2 = d_h.dot(&lw.w1);
        let mut dx_mid = layer_norm_backward(&dy2, &lc.ln2, &lw.ln2_gamma, &mut lg.ln2_gamma, &mut lg.ln2_beta);
        dx_mid += &dx;

        // x_mid = x_in + W_o·concat(heads).
        let d_attn = &dx_mid;
        lg.wo += &d_attn.t().dot(&lc.concat);
        let d_concat = d_attn.dot(&lw.wo);

        let (dh_count, dh) = (cfg.n_heads, cfg.d_head());
        let scale = T::one() / T::of((dh as f64).sqrt());
        let mut d_q = Array2::zeros((n, cfg.d_model));
        let mut d_k = Array2::zeros((n, cfg.d_model));
        let mut d_v = Array2::zeros((n, cfg.d_model));
        for h in 0..dh_count {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &lc.probs[h];
            let d_oh = d_concat.slice(cols);
            let vh = lc.v.slice(cols);
            let qh = lc.q.slice(cols);
            let kh = lc.k.slice(cols);
            let mut d_p = d_oh.dot(&vh.t());
            d_v.slice_mut(cols).assign(&p.t().dot(&d_oh));
            // Softmax backward per row: p ⊙ (dp − Σ dp⊙p).
            for r in 0..n {
                let dot = d_p.row(r).dot(&p.row(r));
                for c in 0..n {
                    d_p[[r, c]] = p[[r, c]] * (d_p[[r, c]] - dot);
                }
            }
            d_q.slice_mut(cols).assign(&(d_p.dot(&kh) * scale));
            d_k.slice_mut(cols).assign(&(d_p.t().dot(&qh) * scale));
        }

        let mut dy1 = Array2::zeros((n, cfg.d_model));
        for (matrix, d_proj, w_base, w_grad) in [
            (MatrixKind::Q, &d_q, &lw.wq, &mut lg.wq),
            (MatrixKind::K, &d_k, &lw.wk, &mut lg.wk),
            (MatrixKind::V, &d_v, &lw.wv, &mut lg.wv),
        ] {
            *w_grad += &d_proj.t().dot(&lc.y1);
            dy1 += &d_proj.dot(w_base);
            let Some(set) = adapters else { continue };
            let Some(idx) = set
                .adapters
                .iter()
                .position(|ad| ad.site.layer == i + 1 && ad.site.matrix == matrix)
            else {
                continue;
            };
            let ad = &set.adapters[idx];
            let scale = ad.scale();
            let d_proj_b = d_proj.dot(&ad.b);
            dy1 += &(d_proj_b.dot(&ad.a) * scale);
            let lgr = lora_grads.as_mut().expect("adapters imply lora grads");
            lgr.per_site[idx].0 += &(d_proj_b.t().dot(&lc.y1) * scale);
            lgr.per_site[idx].1 += &(d_proj.t().dot(&lc.y1.dot(&ad.a.t())) * scale);
        }

        let dx_in = layer_norm_backward(&dy1, &lc.ln1, &lw.ln1_gamma, &mut lg.ln1_gamma, &mut lg.ln1_beta);
        dx = dx_mid + dx_in;
    }

    // Positional codes are constants; only the projection learns.
    grads.patch_w += &dx.t().dot(&fwd.patches);
    grads.patch_b += &dx.sum_axis(Axis(0));
    (grads, lora_grads)
}
