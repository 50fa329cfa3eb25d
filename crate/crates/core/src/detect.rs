//! Nearest-neighbor anomaly scoring over per-domain reference embeddings.
//!
//! Training-clip embeddings are L2-normalized at ingestion, so cosine
//! distance reduces to `1 − dot`. A clip's anomaly score is the smaller of
//! its nearest-neighbor distances to the source-domain and target-domain
//! reference sets; exhaustive scan is the production algorithm because the
//! sets stay small.
//!
//! The arithmetic is pinned so an independently coded scan reproduces scores
//! bit for bit: norms and dots accumulate left to right in the scalar type,
//! each component is divided by the norm, and a bitwise-equal pair of
//! vectors short-circuits to distance exactly 0.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::{Domain, Label, Split};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Sequential dot product; the summation order is part of the contract.
fn dot_seq<T: Real>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        acc += *x * *y;
    }
    acc
}

fn l2_norm<T: Real>(v: ArrayView1<'_, T>) -> Result<T> {
    let n = dot_seq(v, v).sqrt();
    if n == T::zero() || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(n)
}

/// `1 − cos(a, b)`, clamped into [0, 2]. Bitwise-equal inputs return exactly
/// 0 so a reference clip always scores 0 against a set containing it.
pub fn cosine_distance<T: Real>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine distance", a.len(), b.len()));
    }
    let na = l2_norm(a)?;
    let nb = l2_norm(b)?;
    if a.iter().zip(b.iter()).all(|(x, y)| x.to64().to_bits() == y.to64().to_bits()) {
        return Ok(T::zero());
    }
    let d = T::one() - dot_seq(a, b) / (na * nb);
    Ok(d.max(T::zero()).min(T::of(2.0)))
}

/// Unit-normalized training embeddings of one domain.
#[derive(Debug, Clone)]
pub struct ReferenceSet<T: Real> {
    pub domain: Domain,
    pub clip_ids: Vec<String>,
    /// One unit row per clip.
    pub vectors: Array2<T>,
}

impl<T: Real> ReferenceSet<T> {
    /// Normalizes every embedding on the way in.
    pub fn build(domain: Domain, clips: Vec<(String, Array1<T>)>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::EmptyReferenceSet);
        }
        let dim = clips[0].1.len();
        let mut clip_ids = Vec::with_capacity(clips.len());
        let mut vectors = Array2::zeros((clips.len(), dim));
        for (i, (id, v)) in clips.into_iter().enumerate() {
            if v.len() != dim {
                return Err(Error::shape(&format!("embedding {id}"), dim, v.len()));
            }
            vectors.row_mut(i).assign(&normalize(v.view())?);
            clip_ids.push(id);
        }
        Ok(ReferenceSet { domain, clip_ids, vectors })
    }

    pub fn len(&self) -> usize {
        self.clip_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Every stored vector must be unit length to within 1e-9.
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.vectors.rows().into_iter().enumerate() {
            let n = l2_norm(row)?.to64();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "reference {} has norm {n}, expected 1",
                    self.clip_ids[i]
                )));
            }
        }
        Ok(())
    }
}

/// Divides each component by the left-to-right accumulated L2 norm.
pub fn normalize<T: Real>(v: ArrayView1<'_, T>) -> Result<Array1<T>> {
    let n = l2_norm(v)?;
    Ok(v.mapv(|x| x / n))
}

/// Distance from a query to its k nearest references: the minimum for k = 1,
/// the mean of the k smallest otherwise.
pub fn knn_min_distance<T: Real>(
    query: ArrayView1<'_, T>,
    refs: &ReferenceSet<T>,
    k: usize,
) -> Result<T> {
    if refs.is_empty() {
        return Err(Error::EmptyReferenceSet);
    }
    if k == 0 || k > refs.len() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} outside 1..={} references",
            refs.len()
        )));
    }
    let q = normalize(query)?;
    let mut dists = Vec::with_capacity(refs.len());
    for row in refs.vectors.rows() {
        let d = if q.iter().zip(row.iter()).all(|(x, y)| x.to64().to_bits() == y.to64().to_bits())
        {
            T::zero()
        } else {
            (T::one() - dot_seq(q.view(), row)).max(T::zero()).min(T::of(2.0))
        };
        dists.push(d);
    }
    if k == 1 {
        return Ok(dists.into_iter().fold(T::infinity(), T::min));
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let mut acc = T::zero();
    for d in &dists[..k] {
        acc += *d;
    }
    Ok(acc / T::of(k as f64))
}

/// A clip's anomaly score with its per-domain components.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyScore {
    pub clip_id: String,
    pub score: f64,
    pub d_source: f64,
    pub d_target: f64,
}

/// Scores one clip as the smaller of its two domain distances.
pub fn score_clip<T: Real>(
    clip_id: &str,
    query: ArrayView1<'_, T>,
    source: &ReferenceSet<T>,
    target: &ReferenceSet<T>,
    k: usize,
) -> Result<AnomalyScore> {
    let d_source = knn_min_distance(query, source, k)?.to64();
    let d_target = knn_min_distance(query, target, k)?.to64();
    Ok(AnomalyScore {
        clip_id: clip_id.to_string(),
        score: d_source.min(d_target),
        d_source,
        d_target,
    })
}

/// One line of the embedding store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub clip_id: String,
    pub machine: String,
    pub domain: Domain,
    pub split: Split,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<Label>,
    /// Proxy-task class for train clips; test clips have none.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class_id: Option<usize>,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn vector<T: Real>(&self) -> Array1<T> {
        self.values.iter().map(|&v| T::of(v)).collect()
    }
}

/// Writes the store as JSON lines, one record per clip.
pub fn write_embedding_store(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        if r.values.len() != r.dim {
            return Err(Error::shape(&format!("embedding {}", r.clip_id), r.dim, r.values.len()));
        }
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embedding_store(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let display = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: EmbeddingRecord = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(&display, format!("line {}: {e}", lineno + 1)))?;
        if r.values.len() != r.dim {
            return Err(Error::malformed(
                &display,
                format!("line {}: dim {} but {} values", lineno + 1, r.dim, r.values.len()),
            ));
        }
        out.push(r);
    }
    Ok(out)
}

/// One row of the score table.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub clip_id: String,
    pub machine: String,
    pub score: f64,
    pub d_source: f64,
    pub d_target: f64,
}

pub const SCORE_CSV_HEADER: &str = "clip_id,machine,score,d_source,d_target";

/// Writes scores as CSV. Floats print in shortest-roundtrip form, so a
/// read-back reproduces them bit for bit.
pub fn write_score_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{SCORE_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.clip_id, r.machine, r.score, r.d_source, r.d_target)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_score_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let display = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            if line.trim() != SCORE_CSV_HEADER {
                return Err(Error::malformed(&display, format!("unexpected header {line:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::malformed(
                &display,
                format!("line {}: expected 5 fields, got {}", lineno + 1, parts.len()),
            ));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::malformed(&display, format!("line {}: bad {what} {s:?}", lineno + 1)))
        };
        rows.push(ScoreRow {
            clip_id: parts[0].to_string(),
            machine: parts[1].to_string(),
            score: num(parts[2], "score")?,
            d_source: num(parts[3], "d_source")?,
            d_target: num(parts[4], "d_target")?,
        });
    }
    Ok(rows)
}
