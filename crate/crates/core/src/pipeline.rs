//! Command flows gluing the toolkit together: corpus generation, training,
//! embedding extraction, scoring, evaluation, and adapter merging.
//!
//! Heavy numeric work runs in single precision; scores and metrics are
//! always double. Every flow writes its resolved config next to its outputs
//! and is deterministic given (config, seed).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array1;

use crate::config::RunConfig;
use crate::data::{class_key, class_table, generate, Domain, Label, Manifest, ManifestRecord, Split};
use crate::detect::{
    score_clip, write_embedding_store, write_score_csv, EmbeddingRecord, ReferenceSet, ScoreRow,
};
use crate::dsp::cache::{read_cache, write_cache};
use crate::dsp::{logmel, read_wav, standardize, FeatureStats, Spectrogram};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::lora::{merge, MatrixKind};
use crate::metrics::{evaluate, EvalReport, LabeledScore};
use crate::model::checkpoint::{
    encoder_from_container, encoder_to_tensors, head_from_container, head_to_tensors,
    lora_from_container, lora_to_tensors, stats_from_container, stats_to_tensors, Container,
};
use crate::model::{encode, EncoderWeights};
use crate::optim::{train, TrainExample, TrainMode, TrainOutcome, LOG_HEADER};
use crate::rng::{derive_seed, tag_str};

/// Scalar for the encoder-heavy pipeline path.
pub type PipelineScalar = f32;

pub const CHECKPOINT_NAME: &str = "checkpoint.bin";
pub const TRAIN_LOG_NAME: &str = "train.log";
pub const TRAIN_JSONL_NAME: &str = "train.jsonl";
pub const SCORES_NAME: &str = "scores.csv";
pub const EVAL_TEXT_NAME: &str = "eval.txt";
pub const EVAL_CSV_NAME: &str = "eval.csv";
pub const EVAL_JSONL_NAME: &str = "eval.jsonl";

/// Generates the synthetic corpus described by the config.
pub fn run_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let manifest = generate(
        &cfg.data.machines,
        &cfg.corpus_counts(),
        cfg.data.clip_seconds,
        cfg.seed,
        out_dir,
    )?;
    cfg.echo_into(out_dir)?;
    Ok(manifest)
}

fn feature_cache_key(cfg: &RunConfig, clip_id: &str) -> Result<String> {
    let dsp_text = toml::to_string(&cfg.dsp)
        .map_err(|e| Error::InvalidConfig(format!("dsp section serialization failed: {e}")))?;
    let hash = derive_seed(tag_str(&dsp_text), &[tag_str(clip_id)]);
    Ok(format!("{clip_id}-{hash:016x}.spec"))
}

/// Log-mel features for the given records, optionally cached on disk keyed
/// by clip id and front-end settings.
pub fn extract_features(
    manifest: &Manifest,
    records: &[ManifestRecord],
    cfg: &RunConfig,
    cache_dir: Option<&Path>,
) -> Result<Vec<Spectrogram<PipelineScalar>>> {
    let mel_cfg = cfg.logmel_config();
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut features = Vec::with_capacity(records.len());
    for record in records {
        let cached = match cache_dir {
            Some(dir) => {
                let path = dir.join(feature_cache_key(cfg, &record.clip_id)?);
                if path.is_file() {
                    Some(read_cache(
                        &path,
                        mel_cfg.hop_ms / 1000.0,
                        mel_cfg.win_ms / 1000.0,
                    )?)
                } else {
                    let wave = read_wav(&manifest.resolve(record))?;
                    let spec = logmel(&wave, &mel_cfg)?;
                    write_cache(&path, &spec)?;
                    Some(spec)
                }
            }
            None => None,
        };
        let spec = match cached {
            Some(s) => s,
            None => logmel(&read_wav(&manifest.resolve(record))?, &mel_cfg)?,
        };
        features.push(spec);
    }
    Ok(features)
}

/// Train records in deterministic clip-id order.
fn split_records(manifest: &Manifest, split: Split) -> Vec<ManifestRecord> {
    let mut records: Vec<ManifestRecord> =
        manifest.records.iter().filter(|r| r.split == split).cloned().collect();
    records.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    records
}

/// Trainable-parameter count for the configured mode, reported before
/// training starts.
pub fn trainable_param_count(cfg: &RunConfig, n_classes: usize) -> Result<usize> {
    let enc = cfg.encoder_config()?;
    let head = n_classes * enc.d_model;
    match cfg.train_mode()? {
        TrainMode::Lora => {
            let plan = cfg.lora_plan()?;
            Ok(crate::lora::trainable_params(&plan, enc.n_layers, enc.d_model)? + head)
        }
        TrainMode::Full => Ok(enc.param_count() + head),
    }
}

/// What `run_train` leaves behind.
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub trainable_params: usize,
    pub n_classes: usize,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

fn write_train_logs(out_dir: &Path, outcome: &TrainOutcome<PipelineScalar>) -> Result<()> {
    let mut tsv = String::from(LOG_HEADER);
    tsv.push('\n');
    let mut jsonl = String::new();
    for stats in &outcome.log {
        tsv.push_str(&stats.tsv_line());
        tsv.push('\n');
        jsonl.push_str(&stats.jsonl_line());
        jsonl.push('\n');
    }
    std::fs::write(out_dir.join(TRAIN_LOG_NAME), tsv)?;
    std::fs::write(out_dir.join(TRAIN_JSONL_NAME), jsonl)?;
    Ok(())
}

fn write_checkpoint(
    path: &Path,
    outcome: &TrainOutcome<PipelineScalar>,
    stats: &FeatureStats<PipelineScalar>,
) -> Result<()> {
    let mut container = Container::default();
    container.extend(encoder_to_tensors(&outcome.weights));
    container.extend(stats_to_tensors(stats));
    container.extend(head_to_tensors(&outcome.head));
    if let Some(set) = &outcome.adapters {
        container.extend(lora_to_tensors(set));
    }
    container.write(path)
}

/// Fine-tunes on the manifest's train split and writes checkpoint plus logs.
/// `init_checkpoint` warm-starts the encoder (and reuses its feature stats);
/// without it the encoder starts from random init and stats are fit fresh.
///
/// On divergence the rolled-back checkpoint and logs are still written, and
/// the error reports the offending step.
pub fn run_train(
    cfg: &RunConfig,
    manifest_path: &Path,
    init_checkpoint: Option<&Path>,
    out_dir: &Path,
    cache_dir: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let manifest = Manifest::read(manifest_path)?;
    manifest.validate()?;
    let table = class_table(&manifest)?;
    let records = split_records(&manifest, Split::Train);
    if records.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let features = extract_features(&manifest, &records, cfg, cache_dir)?;

    let enc_cfg = cfg.encoder_config()?;
    let (weights, stats) = match init_checkpoint {
        Some(path) => {
            let container = Container::read(path)?;
            let weights: EncoderWeights<PipelineScalar> = encoder_from_container(&container)?;
            if weights.config != enc_cfg {
                return Err(Error::shape(
                    "encoder architecture vs config",
                    format!("{enc_cfg:?}"),
                    format!("{:?}", weights.config),
                ));
            }
            let stats = stats_from_container(&container)?.ok_or_else(|| {
                Error::malformed(path.display().to_string(), "checkpoint lacks feature stats")
            })?;
            (weights, stats)
        }
        None => {
            let weights =
                EncoderWeights::init(enc_cfg, derive_seed(cfg.seed, &[tag_str("encoder")]))?;
            let stats = FeatureStats::fit(&features)?;
            (weights, stats)
        }
    };

    let mut examples = Vec::with_capacity(records.len());
    for (record, spec) in records.iter().zip(&features) {
        let class = *table.get(&class_key(record)).ok_or_else(|| {
            Error::InvalidConfig(format!("train clip {:?} has no class", record.clip_id))
        })?;
        examples.push(TrainExample { features: standardize(spec, &stats)?, class });
    }

    let train_cfg = cfg.train_config()?;
    let plan = match train_cfg.mode {
        TrainMode::Lora => Some(cfg.lora_plan()?),
        TrainMode::Full => None,
    };
    let outcome = train(&examples, table.len(), weights, plan.as_ref(), &train_cfg)?;

    std::fs::create_dir_all(out_dir)?;
    let checkpoint = out_dir.join(CHECKPOINT_NAME);
    write_checkpoint(&checkpoint, &outcome, &stats)?;
    write_train_logs(out_dir, &outcome)?;
    cfg.echo_into(out_dir)?;

    if let Some(step) = outcome.diverged_at {
        return Err(Error::Divergence { step: step as usize });
    }
    let last = outcome.log.last();
    Ok(TrainSummary {
        checkpoint,
        trainable_params: outcome.trainable_params(),
        n_classes: table.len(),
        final_loss: last.map(|s| s.loss).unwrap_or(f64::NAN),
        final_accuracy: last.map(|s| s.acc).unwrap_or(f64::NAN),
    })
}

/// Loaded checkpoint contents ready for inference.
pub struct LoadedModel {
    pub weights: EncoderWeights<PipelineScalar>,
    pub adapters: Option<crate::lora::LoraSet<PipelineScalar>>,
    pub stats: FeatureStats<PipelineScalar>,
}

/// Reads a checkpoint and checks it against the configured architecture.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<LoadedModel> {
    let container = Container::read(checkpoint)?;
    let weights: EncoderWeights<PipelineScalar> = encoder_from_container(&container)?;
    let enc_cfg = cfg.encoder_config()?;
    if weights.config != enc_cfg {
        return Err(Error::shape(
            "encoder architecture vs config",
            format!("{enc_cfg:?}"),
            format!("{:?}", weights.config),
        ));
    }
    let stats = stats_from_container(&container)?.ok_or_else(|| {
        Error::malformed(checkpoint.display().to_string(), "checkpoint lacks feature stats")
    })?;
    let adapters = lora_from_container(&container)?;
    Ok(LoadedModel { weights, adapters, stats })
}

/// Embeds every clip of one split and writes a JSON-lines store. Returns
/// the number of records written.
pub fn run_embed(
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest_path: &Path,
    split: Split,
    out_path: &Path,
    cache_dir: Option<&Path>,
) -> Result<usize> {
    cfg.validate()?;
    let manifest = Manifest::read(manifest_path)?;
    manifest.validate()?;
    let model = load_model(cfg, checkpoint)?;
    let table = class_table(&manifest)?;
    let records = split_records(&manifest, split);
    if records.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let features = extract_features(&manifest, &records, cfg, cache_dir)?;
    let d_model = model.weights.config.d_model;
    let mut out = Vec::with_capacity(records.len());
    for (record, spec) in records.iter().zip(&features) {
        let standardized = standardize(spec, &model.stats)?;
        let pooled = encode(&standardized.frames, &model.weights, model.adapters.as_ref())?;
        out.push(EmbeddingRecord {
            clip_id: record.clip_id.clone(),
            machine: record.machine.clone(),
            domain: record.domain,
            split: record.split,
            label: match record.label {
                Label::Unknown => None,
                l => Some(l),
            },
            class_id: table.get(&class_key(record)).copied(),
            dim: d_model,
            values: pooled.iter().map(|v| v.to64()).collect(),
        });
    }
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_embedding_store(out_path, &out)?;
    Ok(out.len())
}

struct MachineRefs {
    source: ReferenceSet<f64>,
    target: ReferenceSet<f64>,
}

fn build_references(
    train_rows: &[EmbeddingRecord],
    single_detector: bool,
) -> Result<BTreeMap<String, MachineRefs>> {
    let mut grouped: BTreeMap<String, [Vec<(String, Array1<f64>)>; 2]> = BTreeMap::new();
    for row in train_rows {
        let entry = grouped.entry(row.machine.clone()).or_default();
        let idx = match row.domain {
            Domain::Source => 0,
            Domain::Target => 1,
        };
        entry[idx].push((row.clip_id.clone(), row.vector()));
    }
    let mut refs = BTreeMap::new();
    for (machine, [source, target]) in grouped {
        let (source, target) = if source.is_empty() || target.is_empty() {
            if !single_detector {
                let missing = if source.is_empty() { Domain::Source } else { Domain::Target };
                return Err(Error::MissingDomain { domain: format!("{missing} ({machine})") });
            }
            // Single-detector fallback: one combined reference set stands in
            // for both domains.
            let combined: Vec<(String, Array1<f64>)> =
                source.iter().chain(&target).cloned().collect();
            (
                ReferenceSet::build(Domain::Source, combined.clone())?,
                ReferenceSet::build(Domain::Target, combined)?,
            )
        } else {
            (
                ReferenceSet::build(Domain::Source, source)?,
                ReferenceSet::build(Domain::Target, target)?,
            )
        };
        refs.insert(machine, MachineRefs { source, target });
    }
    Ok(refs)
}

/// Scores every test clip against the per-machine, per-domain reference
/// sets and writes the score CSV.
pub fn run_score(
    cfg: &RunConfig,
    train_store: &Path,
    test_store: &Path,
    out_csv: &Path,
    single_detector: bool,
) -> Result<Vec<ScoreRow>> {
    cfg.validate()?;
    let train_rows = crate::detect::read_embedding_store(train_store)?;
    let mut test_rows = crate::detect::read_embedding_store(test_store)?;
    test_rows.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    let refs = build_references(&train_rows, single_detector)?;
    let mut rows = Vec::with_capacity(test_rows.len());
    for row in &test_rows {
        let machine_refs = refs.get(&row.machine).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "no training embeddings for machine {:?}",
                row.machine
            ))
        })?;
        let query = row.vector::<f64>();
        let score = score_clip(
            &row.clip_id,
            query.view(),
            &machine_refs.source,
            &machine_refs.target,
            cfg.detect.k,
        )?;
        rows.push(ScoreRow {
            clip_id: score.clip_id,
            machine: row.machine.clone(),
            score: score.score,
            d_source: score.d_source,
            d_target: score.d_target,
        });
    }
    if let Some(parent) = out_csv.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_score_csv(out_csv, &rows)?;
    Ok(rows)
}

/// Joins a score CSV with manifest labels and evaluates; writes the report
/// in all three formats.
pub fn run_eval(
    cfg: &RunConfig,
    score_csv: &Path,
    manifest_path: &Path,
    out_dir: &Path,
) -> Result<EvalReport> {
    cfg.validate()?;
    let rows = crate::detect::read_score_csv(score_csv)?;
    let manifest = Manifest::read(manifest_path)?;
    let by_id: BTreeMap<&str, &ManifestRecord> =
        manifest.records.iter().map(|r| (r.clip_id.as_str(), r)).collect();
    let mut per_machine: BTreeMap<String, Vec<LabeledScore>> = BTreeMap::new();
    for row in &rows {
        let record = by_id.get(row.clip_id.as_str()).ok_or_else(|| {
            Error::MissingLabels(format!("clip {:?} not in the manifest", row.clip_id))
        })?;
        if record.label == Label::Unknown {
            return Err(Error::MissingLabels(format!(
                "clip {:?} has no normal/anomaly label",
                row.clip_id
            )));
        }
        per_machine.entry(row.machine.clone()).or_default().push(LabeledScore {
            score: row.score,
            label: record.label,
            domain: record.domain,
        });
    }
    let report = evaluate(&per_machine, cfg.metrics.p, cfg.metrics.mcclish)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(EVAL_TEXT_NAME), report.render_text())?;
    std::fs::write(out_dir.join(EVAL_CSV_NAME), report.render_csv()?)?;
    std::fs::write(out_dir.join(EVAL_JSONL_NAME), report.render_jsonl()?)?;
    cfg.echo_into(out_dir)?;
    Ok(report)
}

/// Folds adapters into the dense weights and writes a merged checkpoint
/// with no adapter tensors. Merging a merged checkpoint is refused.
pub fn run_merge(checkpoint: &Path, out_path: &Path) -> Result<()> {
    let container = Container::read(checkpoint)?;
    if container.merged {
        return Err(Error::AlreadyMerged);
    }
    let mut weights: EncoderWeights<PipelineScalar> = encoder_from_container(&container)?;
    let set = lora_from_container::<PipelineScalar>(&container)?
        .ok_or_else(|| Error::AdapterMismatch("checkpoint carries no adapters to merge".into()))?;
    for adapter in &set.adapters {
        if adapter.site.layer == 0 || adapter.site.layer > weights.config.n_layers {
            return Err(Error::AdapterSiteOutOfRange {
                layer: adapter.site.layer,
                n_layers: weights.config.n_layers,
            });
        }
        let layer = &mut weights.layers[adapter.site.layer - 1];
        let slot = match adapter.site.matrix {
            MatrixKind::Q => &mut layer.wq,
            MatrixKind::K => &mut layer.wk,
            MatrixKind::V => &mut layer.wv,
        };
        *slot = merge(adapter, slot)?;
    }
    let mut out = Container { merged: true, ..Container::default() };
    out.extend(encoder_to_tensors(&weights));
    if let Some(stats) = stats_from_container::<PipelineScalar>(&container)? {
        out.extend(stats_to_tensors(&stats));
    }
    if let Some(head) = head_from_container::<PipelineScalar>(&container)? {
        out.extend(head_to_tensors(&head));
    }
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    out.write(out_path)
}
