//! Versioned binary weight container.
//!
//! Layout: magic `LNCKPT01`, u32 flags (bit 0 = adapters already merged into
//! the base), u32 tensor count, then per tensor: u32 name length, the name's
//! UTF-8 bytes, u32 rank, u32 dims, and the little-endian `f32` payload.
//! The container is self-describing: `meta.config` carries the architecture,
//! so a reader needs no side channel.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayViewD};

use crate::dsp::FeatureStats;
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraSet, LoraSite, MatrixKind};
use crate::objective::ArcFaceHead;
use crate::scalar::Real;

use super::{EncoderConfig, EncoderWeights, LayerWeights};

const MAGIC: &[u8; 8] = b"LNCKPT01";
const FLAG_MERGED: u32 = 1;

/// One stored tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_view<T: Real>(name: impl Into<String>, view: ArrayViewD<'_, T>) -> Self {
        NamedTensor {
            name: name.into(),
            dims: view.shape().to_vec(),
            data: view.iter().map(|v| v.to64() as f32).collect(),
        }
    }

    pub fn scalar_list(name: impl Into<String>, values: &[f64]) -> Self {
        NamedTensor {
            name: name.into(),
            dims: vec![values.len()],
            data: values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_array1<T: Real>(&self) -> Result<Array1<T>> {
        if self.dims.len() != 1 {
            return Err(Error::shape(&self.name, "rank 1", format!("rank {}", self.dims.len())));
        }
        Ok(self.data.iter().map(|&v| T::of(v as f64)).collect())
    }

    pub fn to_array2<T: Real>(&self) -> Result<Array2<T>> {
        if self.dims.len() != 2 {
            return Err(Error::shape(&self.name, "rank 2", format!("rank {}", self.dims.len())));
        }
        let values: Vec<T> = self.data.iter().map(|&v| T::of(v as f64)).collect();
        Array2::from_shape_vec((self.dims[0], self.dims[1]), values)
            .map_err(|_| Error::shape(&self.name, "dims matching payload", self.data.len()))
    }
}

/// A whole checkpoint in memory.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub merged: bool,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::AdapterMismatch(format!("checkpoint lacks tensor {name:?}")))
    }

    pub fn push(&mut self, tensor: NamedTensor) {
        self.tensors.push(tensor);
    }

    pub fn extend(&mut self, tensors: Vec<NamedTensor>) {
        self.tensors.extend(tensors);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        let flags = if self.merged { FLAG_MERGED } else { 0 };
        w.write_all(&flags.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            let mut expect = 1usize;
            for &d in &t.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
                expect *= d;
            }
            assert_eq!(expect, t.data.len(), "tensor {} dims disagree with payload", t.name);
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Container> {
        let mut r = BufReader::new(File::open(path)?);
        let display = path.display().to_string();
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::malformed(&display, "truncated header"))?;
        if &magic != MAGIC {
            return Err(Error::malformed(
                &display,
                format!("bad magic {:?}", String::from_utf8_lossy(&magic)),
            ));
        }
        let flags = read_u32(&mut r, &display)?;
        let count = read_u32(&mut r, &display)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r, &display)? as usize;
            if name_len > 4096 {
                return Err(Error::malformed(&display, format!("absurd name length {name_len}")));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|_| Error::malformed(&display, "truncated tensor name"))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::malformed(&display, "tensor name not UTF-8"))?;
            let rank = read_u32(&mut r, &display)? as usize;
            if rank > 8 {
                return Err(Error::malformed(&display, format!("absurd rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            let mut len = 1usize;
            for _ in 0..rank {
                let d = read_u32(&mut r, &display)? as usize;
                len = len.saturating_mul(d);
                dims.push(d);
            }
            if len > (1 << 31) {
                return Err(Error::malformed(&display, format!("tensor {name} too large")));
            }
            let mut payload = vec![0u8; len * 4];
            r.read_exact(&mut payload)
                .map_err(|_| Error::malformed(&display, format!("truncated payload for {name}")))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        Ok(Container { merged: flags & FLAG_MERGED != 0, tensors })
    }
}

fn read_u32(r: &mut impl Read, path: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::malformed(path, "truncated field"))?;
    Ok(u32::from_le_bytes(buf))
}

/// Encoder weights (with `meta.config`) as container tensors.
pub fn encoder_to_tensors<T: Real>(w: &EncoderWeights<T>) -> Vec<NamedTensor> {
    let cfg = &w.config;
    let mut out = vec![NamedTensor::scalar_list(
        "meta.config",
        &[
            cfg.n_layers as f64,
            cfg.d_model as f64,
            cfg.n_heads as f64,
            cfg.patch_frames as f64,
            cfg.patch_bins as f64,
            cfg.mlp_ratio as f64,
            cfg.max_tokens as f64,
        ],
    )];
    for (name, view) in w.named_views() {
        out.push(NamedTensor::from_view(name, view));
    }
    out
}

/// Rebuilds encoder weights from a container written by [`encoder_to_tensors`].
pub fn encoder_from_container<T: Real>(c: &Container) -> Result<EncoderWeights<T>> {
    let meta = c.require("meta.config")?;
    if meta.data.len() != 7 {
        return Err(Error::AdapterMismatch(format!(
            "meta.config holds {} values, expected 7",
            meta.data.len()
        )));
    }
    let config = EncoderConfig {
        n_layers: meta.data[0] as usize,
        d_model: meta.data[1] as usize,
        n_heads: meta.data[2] as usize,
        patch_frames: meta.data[3] as usize,
        patch_bins: meta.data[4] as usize,
        mlp_ratio: meta.data[5] as usize,
        max_tokens: meta.data[6] as usize,
    };
    config.validate()?;
    let layers = (1..=config.n_layers)
        .map(|l| {
            Ok(LayerWeights {
                ln1_gamma: c.require(&format!("layer.{l}.ln1.gamma"))?.to_array1()?,
                ln1_beta: c.require(&format!("layer.{l}.ln1.beta"))?.to_array1()?,
                wq: c.require(&format!("layer.{l}.attn.wq"))?.to_array2()?,
                wk: c.require(&format!("layer.{l}.attn.wk"))?.to_array2()?,
                wv: c.require(&format!("layer.{l}.attn.wv"))?.to_array2()?,
                wo: c.require(&format!("layer.{l}.attn.wo"))?.to_array2()?,
                ln2_gamma: c.require(&format!("layer.{l}.ln2.gamma"))?.to_array1()?,
                ln2_beta: c.require(&format!("layer.{l}.ln2.beta"))?.to_array1()?,
                w1: c.require(&format!("layer.{l}.mlp.w1"))?.to_array2()?,
                b1: c.require(&format!("layer.{l}.mlp.b1"))?.to_array1()?,
                w2: c.require(&format!("layer.{l}.mlp.w2"))?.to_array2()?,
                b2: c.require(&format!("layer.{l}.mlp.b2"))?.to_array1()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let w = EncoderWeights {
        config,
        patch_w: c.require("patch.w")?.to_array2()?,
        patch_b: c.require("patch.b")?.to_array1()?,
        layers,
        final_gamma: c.require("final_ln.gamma")?.to_array1()?,
        final_beta: c.require("final_ln.beta")?.to_array1()?,
    };
    validate_encoder_shapes(&w)?;
    Ok(w)
}

fn validate_encoder_shapes<T: Real>(w: &EncoderWeights<T>) -> Result<()> {
    let d = w.config.d_model;
    let dm = w.config.d_mlp();
    let pd = w.config.patch_dim();
    let check = |ok: bool, what: &str| {
        if ok {
            Ok(())
        } else {
            Err(Error::AdapterMismatch(format!("tensor {what} disagrees with meta.config")))
        }
    };
    check(w.patch_w.dim() == (d, pd), "patch.w")?;
    check(w.patch_b.len() == d, "patch.b")?;
    for (i, lw) in w.layers.iter().enumerate() {
        let l = i + 1;
        check(lw.wq.dim() == (d, d), &format!("layer.{l}.attn.wq"))?;
        check(lw.wk.dim() == (d, d), &format!("layer.{l}.attn.wk"))?;
        check(lw.wv.dim() == (d, d), &format!("layer.{l}.attn.wv"))?;
        check(lw.wo.dim() == (d, d), &format!("layer.{l}.attn.wo"))?;
        check(lw.ln1_gamma.len() == d && lw.ln1_beta.len() == d, &format!("layer.{l}.ln1"))?;
        check(lw.ln2_gamma.len() == d && lw.ln2_beta.len() == d, &format!("layer.{l}.ln2"))?;
        check(lw.w1.dim() == (dm, d) && lw.b1.len() == dm, &format!("layer.{l}.mlp.w1"))?;
        check(lw.w2.dim() == (d, dm) && lw.b2.len() == d, &format!("layer.{l}.mlp.w2"))?;
    }
    check(w.final_gamma.len() == d && w.final_beta.len() == d, "final_ln")?;
    Ok(())
}

/// Feature statistics as `stats.mean` / `stats.std`.
pub fn stats_to_tensors<T: Real>(stats: &FeatureStats<T>) -> Vec<NamedTensor> {
    vec![
        NamedTensor::from_view("stats.mean", stats.mean.view().into_dyn()),
        NamedTensor::from_view("stats.std", stats.std.view().into_dyn()),
    ]
}

pub fn stats_from_container<T: Real>(c: &Container) -> Result<Option<FeatureStats<T>>> {
    match (c.get("stats.mean"), c.get("stats.std")) {
        (Some(mean), Some(std)) => Ok(Some(FeatureStats {
            mean: mean.to_array1()?,
            std: std.to_array1()?,
        })),
        (None, None) => Ok(None),
        _ => Err(Error::AdapterMismatch(
            "checkpoint has one of stats.mean/stats.std but not both".into(),
        )),
    }
}

/// Classification head as `head.W` plus `head.meta` (scale, margin).
pub fn head_to_tensors<T: Real>(head: &ArcFaceHead<T>) -> Vec<NamedTensor> {
    vec![
        NamedTensor::from_view("head.W", head.weights.view().into_dyn()),
        NamedTensor::scalar_list("head.meta", &[head.scale.to64(), head.margin.to64()]),
    ]
}

pub fn head_from_container<T: Real>(c: &Container) -> Result<Option<ArcFaceHead<T>>> {
    let Some(w) = c.get("head.W") else { return Ok(None) };
    let meta = c.require("head.meta")?;
    if meta.data.len() != 2 {
        return Err(Error::AdapterMismatch("head.meta must hold (scale, margin)".into()));
    }
    Ok(Some(ArcFaceHead {
        weights: w.to_array2()?,
        scale: T::of(meta.data[0] as f64),
        margin: T::of(meta.data[1] as f64),
    }))
}

/// Adapters as `lora.<layer>.<matrix>.{A,B,alpha}` tensors.
pub fn lora_to_tensors<T: Real>(set: &LoraSet<T>) -> Vec<NamedTensor> {
    let mut out = Vec::with_capacity(set.adapters.len() * 3);
    for ad in &set.adapters {
        let prefix = format!("lora.{}.{}", ad.site.layer, ad.site.matrix);
        out.push(NamedTensor::from_view(format!("{prefix}.A"), ad.a.view().into_dyn()));
        out.push(NamedTensor::from_view(format!("{prefix}.B"), ad.b.view().into_dyn()));
        out.push(NamedTensor::scalar_list(format!("{prefix}.alpha"), &[ad.site.alpha]));
    }
    out
}

/// Collects any adapters stored in the container, ordered layer-major with
/// `k < q < v`.
pub fn lora_from_container<T: Real>(c: &Container) -> Result<Option<LoraSet<T>>> {
    let mut sites: Vec<(usize, MatrixKind)> = Vec::new();
    for t in &c.tensors {
        let Some(rest) = t.name.strip_prefix("lora.") else { continue };
        let parts: Vec<&str> = rest.split('.').collect();
        if parts.len() != 3 {
            return Err(Error::AdapterMismatch(format!("unparseable adapter tensor {:?}", t.name)));
        }
        if parts[2] != "A" {
            continue;
        }
        let layer: usize = parts[0]
            .parse()
            .map_err(|_| Error::AdapterMismatch(format!("bad layer in {:?}", t.name)))?;
        let matrix: MatrixKind = parts[1].parse()?;
        sites.push((layer, matrix));
    }
    if sites.is_empty() {
        return Ok(None);
    }
    sites.sort();
    sites.dedup();
    let mut adapters = Vec::with_capacity(sites.len());
    for (layer, matrix) in sites {
        let prefix = format!("lora.{layer}.{matrix}");
        let a: Array2<T> = c.require(&format!("{prefix}.A"))?.to_array2()?;
        let b: Array2<T> = c.require(&format!("{prefix}.B"))?.to_array2()?;
        let alpha_t = c.require(&format!("{prefix}.alpha"))?;
        if alpha_t.data.len() != 1 {
            return Err(Error::AdapterMismatch(format!("{prefix}.alpha must hold one value")));
        }
        if a.nrows() != b.ncols() {
            return Err(Error::AdapterMismatch(format!(
                "{prefix}: A rank {} vs B rank {}",
                a.nrows(),
                b.ncols()
            )));
        }
        let site = LoraSite { layer, matrix, rank: a.nrows(), alpha: alpha_t.data[0] as f64 };
        adapters.push(LoraAdapter { site, a, b });
    }
    Ok(Some(LoraSet { adapters }))
}
