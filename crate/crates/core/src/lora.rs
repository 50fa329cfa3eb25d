//! Low-rank adapters for the encoder's attention projections.
//!
//! An adapter adds `(alpha/r)·B·A` to a frozen base matrix, with `A` drawn
//! from a small Gaussian and `B` starting at zero so the adapted model is
//! exactly the base model at initialization. A [`LoraPlan`] describes which
//! (layer, matrix) sites get adapters, at what rank, and with optional
//! per-site rank multipliers.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::scalar::Real;

/// Attention projection a site can target. Ordering (`K < Q < V`) fixes the
/// expansion order within a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MatrixKind {
    K,
    Q,
    V,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 3] = [MatrixKind::K, MatrixKind::Q, MatrixKind::V];

    pub fn as_str(self) -> &'static str {
        match self {
            MatrixKind::K => "k",
            MatrixKind::Q => "q",
            MatrixKind::V => "v",
        }
    }
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatrixKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "k" => Ok(MatrixKind::K),
            "q" => Ok(MatrixKind::Q),
            "v" => Ok(MatrixKind::V),
            other => Err(Error::InvalidConfig(format!(
                "unknown attention matrix {other:?}, expected k, q, or v"
            ))),
        }
    }
}

/// One adapter location: a projection matrix in one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraSite {
    /// 1-based encoder layer index.
    pub layer: usize,
    pub matrix: MatrixKind,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraSite {
    /// Update scale `alpha / r` using the rank actually materialized.
    pub fn scale(&self, effective_rank: usize) -> f64 {
        self.alpha / effective_rank as f64
    }
}

/// Rank multiplier applied to sites matching the given predicates. A `None`
/// predicate matches everything.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierRule {
    pub layers: Option<Vec<usize>>,
    pub matrices: Option<Vec<MatrixKind>>,
    pub factor: f64,
}

impl MultiplierRule {
    pub fn matches(&self, layer: usize, matrix: MatrixKind) -> bool {
        self.layers.as_ref().is_none_or(|l| l.contains(&layer))
            && self.matrices.as_ref().is_none_or(|m| m.contains(&matrix))
    }
}

/// Which sites to adapt and at what rank.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPlan {
    pub layers: Vec<usize>,
    pub matrices: Vec<MatrixKind>,
    pub rank: usize,
    /// `None` resolves to the site's (multiplied) rank, making the update
    /// scale exactly 1.
    pub alpha: Option<f64>,
    pub multipliers: Vec<MultiplierRule>,
}

impl LoraPlan {
    /// Plan covering all layers and the given matrices at one rank.
    pub fn uniform(n_layers: usize, matrices: &[MatrixKind], rank: usize) -> Self {
        LoraPlan {
            layers: (1..=n_layers).collect(),
            matrices: matrices.to_vec(),
            rank,
            alpha: None,
            multipliers: Vec::new(),
        }
    }

    /// Compact human-readable form, e.g. `layers=1-4,9-12 mats=q,v r=64`.
    pub fn describe(&self) -> String {
        let mats: Vec<&str> = {
            let mut m = self.matrices.clone();
            m.sort();
            m.dedup();
            m.iter().map(|k| k.as_str()).collect()
        };
        let mut out = format!(
            "layers={} mats={} r={}",
            format_layer_set(&self.layers),
            mats.join(","),
            self.rank
        );
        for rule in &self.multipliers {
            let layers = rule
                .layers
                .as_ref()
                .map_or("*".to_string(), |l| format_layer_set(l));
            let mats = rule.matrices.as_ref().map_or("*".to_string(), |m| {
                m.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(",")
            });
            out.push_str(&format!(" x{}@[{layers}/{mats}]", rule.factor));
        }
        out
    }
}

/// Parses a layer-set spec such as `"3"`, `"1-4"`, or `"1-4,9-12"` into a
/// sorted, deduplicated list.
pub fn parse_layer_set(spec: &str) -> Result<Vec<usize>> {
    let mut layers = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        if let Some((lo, hi)) = part.split_once('-') {
            let lo: usize = lo.trim().parse().map_err(|_| bad_layer_spec(spec))?;
            let hi: usize = hi.trim().parse().map_err(|_| bad_layer_spec(spec))?;
            if lo == 0 || hi < lo {
                return Err(bad_layer_spec(spec));
            }
            layers.extend(lo..=hi);
        } else {
            let l: usize = part.parse().map_err(|_| bad_layer_spec(spec))?;
            if l == 0 {
                return Err(bad_layer_spec(spec));
            }
            layers.push(l);
        }
    }
    if layers.is_empty() {
        return Err(bad_layer_spec(spec));
    }
    layers.sort_unstable();
    layers.dedup();
    Ok(layers)
}

fn bad_layer_spec(spec: &str) -> Error {
    Error::InvalidConfig(format!(
        "bad layer set {spec:?}, expected forms like \"3\", \"1-4\", \"1-4,9-12\""
    ))
}

/// Renders a sorted layer list back to the compact range form.
pub fn format_layer_set(layers: &[usize]) -> String {
    let mut sorted = layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut parts: Vec<String> = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let start = sorted[i];
        let mut end = start;
        while i + 1 < sorted.len() && sorted[i + 1] == end + 1 {
            end = sorted[i + 1];
            i += 1;
        }
        parts.push(if start == end {
            start.to_string()
        } else {
            format!("{start}-{end}")
        });
        i += 1;
    }
    parts.join(",")
}

/// Expands a plan into concrete sites: one per (layer, matrix) pair, ordered
/// layer-major with `k < q < v` inside a layer. Multiplied ranks round half
/// up and never drop below 1.
pub fn expand_plan(plan: &LoraPlan, n_layers: usize) -> Result<Vec<LoraSite>> {
    let mut layers = plan.layers.clone();
    layers.sort_unstable();
    layers.dedup();
    for &layer in &layers {
        if layer == 0 || layer > n_layers {
            return Err(Error::AdapterSiteOutOfRange { layer, n_layers });
        }
    }
    let mut matrices = plan.matrices.clone();
    matrices.sort();
    matrices.dedup();
    if layers.is_empty() || matrices.is_empty() || plan.rank == 0 {
        return Err(Error::PlanSelectsNoSites);
    }
    let mut sites = Vec::with_capacity(layers.len() * matrices.len());
    for &layer in &layers {
        for &matrix in &matrices {
            let factor: f64 = plan
                .multipliers
                .iter()
                .filter(|rule| rule.matches(layer, matrix))
                .map(|rule| rule.factor)
                .product();
            let rank = round_half_up(plan.rank as f64 * factor).max(1);
            let alpha = plan.alpha.unwrap_or(rank as f64);
            sites.push(LoraSite { layer, matrix, rank, alpha });
        }
    }
    Ok(sites)
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Low-rank factor pair for one site. `a` is `r×d_in`, `b` is `d_out×r`, and
/// the effective update is `scale·b·a`.
#[derive(Debug, Clone)]
pub struct LoraAdapter<T: Real> {
    pub site: LoraSite,
    pub a: Array2<T>,
    pub b: Array2<T>,
}

impl<T: Real> LoraAdapter<T> {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn scale(&self) -> T {
        T::of(self.site.scale(self.rank()))
    }

    /// Dense update `scale·B·A`.
    pub fn delta_w(&self) -> Array2<T> {
        self.b.dot(&self.a) * self.scale()
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Builds one adapter: `A ~ Gaussian(0, 0.02²)` from the seed, `B = 0`. The
/// rank saturates at `min(d_in, d_out)` with a warning; the `alpha/r` scale
/// then uses the saturated rank.
pub fn init_adapter<T: Real>(
    site: &LoraSite,
    d_in: usize,
    d_out: usize,
    seed: u64,
) -> LoraAdapter<T> {
    let rank = clamp_rank(site, d_in, d_out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 0.02).expect("valid std");
    let a = Array2::from_shape_fn((rank, d_in), |_| T::of(normal.sample(&mut rng)));
    let b = Array2::zeros((d_out, rank));
    LoraAdapter { site: site.clone(), a, b }
}

fn clamp_rank(site: &LoraSite, d_in: usize, d_out: usize) -> usize {
    let cap = d_in.min(d_out);
    if site.rank > cap {
        log::warn!(
            "layer {} {}: rank {} saturates at min(d_in, d_out) = {cap}",
            site.layer,
            site.matrix,
            site.rank
        );
        cap
    } else {
        site.rank
    }
}

/// Adapted projection of a single vector: `W·x + scale·B·(A·x)`.
pub fn apply<T: Real>(
    adapter: &LoraAdapter<T>,
    w_base: &Array2<T>,
    x: &Array1<T>,
) -> Result<Array1<T>> {
    if w_base.ncols() != x.len() || adapter.a.ncols() != x.len() {
        return Err(Error::shape(
            "adapter application",
            format!("input dim {}", w_base.ncols()),
            x.len(),
        ));
    }
    if w_base.nrows() != adapter.b.nrows() {
        return Err(Error::shape(
            "adapter application",
            format!("output dim {}", w_base.nrows()),
            adapter.b.nrows(),
        ));
    }
    let low = adapter.a.dot(x);
    Ok(w_base.dot(x) + adapter.b.dot(&low) * adapter.scale())
}

/// Dense merge: `W + scale·B·A`. The base is left untouched.
pub fn merge<T: Real>(adapter: &LoraAdapter<T>, w_base: &Array2<T>) -> Result<Array2<T>> {
    let delta = adapter.delta_w();
    if delta.dim() != w_base.dim() {
        return Err(Error::shape(
            "adapter merge",
            format!("{:?}", w_base.dim()),
            format!("{:?}", delta.dim()),
        ));
    }
    Ok(w_base + &delta)
}

/// Inverse of [`merge`]: subtracts the dense update.
pub fn unmerge<T: Real>(adapter: &LoraAdapter<T>, w_merged: &Array2<T>) -> Result<Array2<T>> {
    let delta = adapter.delta_w();
    if delta.dim() != w_merged.dim() {
        return Err(Error::shape(
            "adapter unmerge",
            format!("{:?}", w_merged.dim()),
            format!("{:?}", delta.dim()),
        ));
    }
    Ok(w_merged - &delta)
}

/// Total adapter parameter count for a plan on square `d_model` projections:
/// `Σ r_eff·(d_in + d_out)` with ranks saturated at `d_model`. The
/// classification head is accounted separately by the trainer.
pub fn trainable_params(plan: &LoraPlan, n_layers: usize, d_model: usize) -> Result<usize> {
    let sites = expand_plan(plan, n_layers)?;
    Ok(sites
        .iter()
        .map(|site| site.rank.min(d_model) * (d_model + d_model))
        .sum())
}

/// The adapters for one model, in expansion order.
#[derive(Debug, Clone)]
pub struct LoraSet<T: Real> {
    pub adapters: Vec<LoraAdapter<T>>,
}

impl<T: Real> LoraSet<T> {
    /// Expands the plan and initializes every adapter with a seed derived
    /// from (seed, layer, matrix), so site order never affects draws.
    pub fn init(plan: &LoraPlan, n_layers: usize, d_model: usize, seed: u64) -> Result<Self> {
        let sites = expand_plan(plan, n_layers)?;
        let adapters = sites
            .iter()
            .map(|site| {
                let site_seed =
                    derive_seed(seed, &[site.layer as u64, site.matrix as u64]);
                init_adapter(site, d_model, d_model, site_seed)
            })
            .collect();
        Ok(LoraSet { adapters })
    }

    pub fn get(&self, layer: usize, matrix: MatrixKind) -> Option<&LoraAdapter<T>> {
        self.adapters
            .iter()
            .find(|a| a.site.layer == layer && a.site.matrix == matrix)
    }

    pub fn get_mut(&mut self, layer: usize, matrix: MatrixKind) -> Option<&mut LoraAdapter<T>> {
        self.adapters
            .iter_mut()
            .find(|a| a.site.layer == layer && a.site.matrix == matrix)
    }

    pub fn param_count(&self) -> usize {
        self.adapters.iter().map(|a| a.param_count()).sum()
    }
}
