//! Additive-angular-margin classification objective over attribute classes.
//!
//! Logits are scaled cosines against per-class weight vectors; the target
//! class additionally pays an angular margin `m` before scaling by `s`.
//! Gradients are analytic, covering the margin expansion, its fallback
//! branch, and the cosine clamp (a clamped cosine contributes no gradient).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Cosine clamp bound: |cos| ≤ 1 − CLAMP_EPS keeps the margin expansion's
/// `1/√(1−c²)` finite.
pub const CLAMP_EPS: f64 = 1e-7;

/// Classification head: one weight row per class plus the margin parameters.
#[derive(Debug, Clone)]
pub struct ArcFaceHead<T: Real> {
    /// `C×d`, one row per class.
    pub weights: Array2<T>,
    pub scale: T,
    pub margin: T,
}

impl<T: Real> ArcFaceHead<T> {
    /// Seeded Gaussian init (std 0.02) for `n_classes ≥ 2` rows.
    pub fn init(n_classes: usize, d_model: usize, scale: f64, margin: f64, seed: u64) -> Result<Self> {
        let head = ArcFaceHead {
            weights: gaussian_matrix(n_classes, d_model, 0.02, seed),
            scale: T::of(scale),
            margin: T::of(margin),
        };
        head.validate()?;
        Ok(head)
    }

    pub fn n_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes() < 2 {
            return Err(Error::SingleClass);
        }
        let s = self.scale.to64();
        let m = self.margin.to64();
        if !(s > 0.0) {
            return Err(Error::InvalidConfig(format!("scale must be positive, got {s}")));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&m) {
            return Err(Error::InvalidConfig(format!(
                "margin must lie in [0, pi/2), got {m}"
            )));
        }
        Ok(())
    }
}

pub(crate) fn gaussian_matrix<T: Real>(rows: usize, cols: usize, std: f64, seed: u64) -> Array2<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| T::of(normal.sample(&mut rng)))
}

fn clamp_cos<T: Real>(c: T) -> T {
    let hi = T::of(1.0 - CLAMP_EPS);
    let lo = T::of(-1.0 + CLAMP_EPS);
    if c > hi {
        hi
    } else if c < lo {
        lo
    } else {
        c
    }
}

fn norm<T: Real>(v: ArrayView1<T>) -> Result<T> {
    let n = v.dot(&v).sqrt();
    if !(n.is_finite() && n > T::zero()) {
        return Err(Error::ZeroVector);
    }
    Ok(n)
}

/// Clamped cosine similarity of an embedding against every class row.
pub fn cosines<T: Real>(x: ArrayView1<T>, head: &ArcFaceHead<T>) -> Result<Array1<T>> {
    if x.len() != head.weights.ncols() {
        return Err(Error::shape("head cosines", head.weights.ncols(), x.len()));
    }
    let nx = norm(x)?;
    let mut out = Array1::zeros(head.n_classes());
    for (j, row) in head.weights.axis_iter(Axis(0)).enumerate() {
        let nw = norm(row)?;
        out[j] = clamp_cos(row.dot(&x) / (nx * nw));
    }
    Ok(out)
}

/// Margin-adjusted, scaled logits for one item. The target logit is
/// `s·cos(θ_y + m)` expanded as `cosθ·cos m − sinθ·sin m`; once `θ_y + m`
/// would pass π (`cosθ_y < cos(π−m)`), the linear surrogate
/// `s·(cosθ_y − m·sin m)` takes over.
pub fn arcface_logits<T: Real>(cos: &Array1<T>, target: usize, scale: T, margin: T) -> Array1<T> {
    assert!(target < cos.len(), "target class out of range");
    let (sin_m, cos_m) = (margin.sin(), margin.cos());
    let mut logits = cos * scale;
    let c = cos[target];
    logits[target] = if c < -cos_m {
        scale * (c - margin * sin_m)
    } else {
        let sin_theta = (T::one() - c * c).sqrt();
        scale * (c * cos_m - sin_theta * sin_m)
    };
    logits
}

/// Mean negative log-softmax of the margin-adjusted logits over a batch.
pub fn arcface_loss<T: Real>(
    embeddings: ArrayView2<T>,
    labels: &[usize],
    head: &ArcFaceHead<T>,
) -> Result<T> {
    let (loss, _) = batch_pass(embeddings, labels, head, false)?;
    Ok(loss)
}

/// Gradients of [`arcface_loss`] with respect to the embeddings and the
/// class weights, with the batch loss.
pub struct ArcFaceGrads<T: Real> {
    pub d_embeddings: Array2<T>,
    pub d_weights: Array2<T>,
}

pub fn arcface_grad<T: Real>(
    embeddings: ArrayView2<T>,
    labels: &[usize],
    head: &ArcFaceHead<T>,
) -> Result<(T, ArcFaceGrads<T>)> {
    let (loss, grads) = batch_pass(embeddings, labels, head, true)?;
    Ok((loss, grads.expect("requested gradients")))
}

/// Fraction of items whose plain cosine argmax hits the label.
pub fn cosine_accuracy<T: Real>(
    embeddings: ArrayView2<T>,
    labels: &[usize],
    head: &ArcFaceHead<T>,
) -> Result<f64> {
    if embeddings.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut hits = 0usize;
    for (x, &y) in embeddings.axis_iter(Axis(0)).zip(labels) {
        let cos = cosines(x, head)?;
        let argmax = (0..cos.len())
            .max_by(|&a, &b| cos[a].partial_cmp(&cos[b]).expect("clamped cosines are finite"))
            .expect("at least two classes");
        if argmax == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / embeddings.nrows() as f64)
}

fn batch_pass<T: Real>(
    embeddings: ArrayView2<T>,
    labels: &[usize],
    head: &ArcFaceHead<T>,
    want_grads: bool,
) -> Result<(T, Option<ArcFaceGrads<T>>)> {
    let n = embeddings.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != n {
        return Err(Error::shape("label batch", n, labels.len()));
    }
    head.validate()?;
    let c_classes = head.n_classes();
    let (s, m) = (head.scale, head.margin);
    let (sin_m, cos_m) = (m.sin(), m.cos());
    let clamp_hi = T::of(1.0 - CLAMP_EPS);
    let clamp_lo = T::of(-1.0 + CLAMP_EPS);
    let inv_n = T::one() / T::of(n as f64);

    let mut w_norms = Array1::zeros(c_classes);
    for (j, row) in head.weights.axis_iter(Axis(0)).enumerate() {
        w_norms[j] = norm(row)?;
    }

    let mut total_loss = T::zero();
    let mut grads = want_grads.then(|| ArcFaceGrads {
        d_embeddings: Array2::zeros(embeddings.raw_dim()),
        d_weights: Array2::zeros(head.weights.raw_dim()),
    });

    for (i, (x, &y)) in embeddings.axis_iter(Axis(0)).zip(labels).enumerate() {
        if y >= c_classes {
            return Err(Error::InvalidConfig(format!(
                "label {y} out of range for {c_classes} classes"
            )));
        }
        let nx = norm(x)?;
        let raw: Array1<T> = Array1::from_shape_fn(c_classes, |j| {
            head.weights.row(j).dot(&x) / (nx * w_norms[j])
        });
        let cos = raw.mapv(clamp_cos);

        let fallback = cos[y] < -cos_m;
        let mut logits = &cos * s;
        logits[y] = if fallback {
            s * (cos[y] - m * sin_m)
        } else {
            let sin_theta = (T::one() - cos[y] * cos[y]).sqrt();
            s * (cos[y] * cos_m - sin_theta * sin_m)
        };

        let max = logits.iter().copied().fold(logits[0], T::max);
        if !max.is_finite() {
            return Err(Error::ZeroVector);
        }
        let exps = logits.mapv(|z| (z - max).exp());
        let denom: T = exps.iter().copied().sum();
        total_loss += denom.ln() - (logits[y] - max);

        let Some(grads) = grads.as_mut() else { continue };
        for j in 0..c_classes {
            let p = exps[j] / denom;
            let d_logit = (p - if j == y { T::one() } else { T::zero() }) * inv_n;
            // Chain through the margin expansion on the target class.
            let d_cos_adj = if j == y && !fallback {
                let sin_theta = (T::one() - cos[y] * cos[y]).sqrt();
                s * (cos_m + sin_m * cos[y] / sin_theta)
            } else {
                s
            };
            // A clamped cosine is constant in its inputs.
            if raw[j] > clamp_hi || raw[j] < clamp_lo {
                continue;
            }
            let d_cos = d_logit * d_cos_adj;
            let w = head.weights.row(j);
            let coeff_w = d_cos / (nx * w_norms[j]);
            let coeff_x = d_cos * cos[j] / (nx * nx);
            let coeff_wn = d_cos * cos[j] / (w_norms[j] * w_norms[j]);
            let mut d_emb = grads.d_embeddings.row_mut(i);
            let mut d_w = grads.d_weights.row_mut(j);
            for k in 0..x.len() {
                d_emb[k] += coeff_w * w[k] - coeff_x * x[k];
                d_w[k] += coeff_w * x[k] - coeff_wn * w[k];
            }
        }
    }

    let loss = total_loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok((loss, grads))
}
