//! Ablation grids over LoRA hyperparameters: rank sweep, matrix subsets,
//! layer ranges, and rank-multiplier strategies.
//!
//! Every cell fine-tunes from one shared pretrained base, scores the test
//! split, and reports dev/eval official scores over a machine split (the
//! lexicographically last machine is held out as eval, the rest are dev).
//! A failing cell is recorded and the grid keeps going.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{class_key, class_table, Label, Manifest, Split};
use crate::detect::score_clip;
use crate::error::{Error, Result};
use crate::lora::{format_layer_set, LoraPlan, MatrixKind, MultiplierRule};
use crate::metrics::{evaluate, hmean, LabeledScore};
use crate::model::checkpoint::{encoder_from_container, stats_from_container, Container};
use crate::model::{encode, EncoderWeights};
use crate::optim::{train, TrainConfig, TrainExample, TrainMode};
use crate::pipeline::{extract_features, PipelineScalar};
use crate::rng::{derive_seed, tag_str};
use crate::scalar::Real;

/// Which experiment grid to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Rank,
    Matrices,
    Layers,
    Multipliers,
}

impl GridKind {
    pub const ALL: [GridKind; 4] =
        [GridKind::Rank, GridKind::Matrices, GridKind::Layers, GridKind::Multipliers];

    pub fn as_str(self) -> &'static str {
        match self {
            GridKind::Rank => "rank",
            GridKind::Matrices => "matrices",
            GridKind::Layers => "layers",
            GridKind::Multipliers => "multipliers",
        }
    }

    pub fn csv_name(self) -> String {
        format!("ablate_{}.csv", self.as_str())
    }
}

impl FromStr for GridKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(GridKind::Rank),
            "matrices" => Ok(GridKind::Matrices),
            "layers" => Ok(GridKind::Layers),
            "multipliers" => Ok(GridKind::Multipliers),
            other => Err(Error::InvalidConfig(format!(
                "unknown grid {other:?}; expected rank, matrices, layers, or multipliers"
            ))),
        }
    }
}

/// One grid cell: a row label plus the adapter plan, or `None` for the full
/// fine-tune row.
#[derive(Debug, Clone)]
pub struct AblateCell {
    pub label: String,
    pub plan: Option<LoraPlan>,
}

/// Rank sweep: full fine-tune plus r in {4, 8, 16, 32, 64, 128}, keeping
/// the base plan's layers and matrices.
pub fn rank_grid(base: &LoraPlan) -> Vec<AblateCell> {
    let mut cells = vec![AblateCell { label: "full".into(), plan: None }];
    for r in [4usize, 8, 16, 32, 64, 128] {
        let mut plan = base.clone();
        plan.rank = r;
        plan.multipliers.clear();
        cells.push(AblateCell { label: format!("r={r}"), plan: Some(plan) });
    }
    cells
}

/// Matrix subsets: the seven non-empty combinations in the order k; q; v;
/// k,v; k,q; k,q,v; q,v.
pub fn matrices_grid(base: &LoraPlan) -> Vec<AblateCell> {
    use MatrixKind::{K, Q, V};
    let subsets: [&[MatrixKind]; 7] =
        [&[K], &[Q], &[V], &[K, V], &[K, Q], &[K, Q, V], &[Q, V]];
    subsets
        .iter()
        .map(|ms| {
            let mut plan = base.clone();
            plan.matrices = ms.to_vec();
            plan.multipliers.clear();
            let label =
                ms.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(",");
            AblateCell { label, plan: Some(plan) }
        })
        .collect()
}

/// Layer ranges: thirds, halves built from thirds, the complement split,
/// and all layers; seven rows total. Needs at least three layers.
pub fn layers_grid(base: &LoraPlan, n_layers: usize) -> Result<Vec<AblateCell>> {
    if n_layers < 3 {
        return Err(Error::InvalidConfig(format!(
            "layer-range grid needs at least 3 encoder layers, got {n_layers}"
        )));
    }
    let t1 = n_layers.div_ceil(3);
    let t2 = (2 * n_layers).div_ceil(3);
    let first: Vec<usize> = (1..=t1).collect();
    let second: Vec<usize> = (t1 + 1..=t2).collect();
    let third: Vec<usize> = (t2 + 1..=n_layers).collect();
    let ranges: Vec<Vec<usize>> = vec![
        first.clone(),
        second.clone(),
        third.clone(),
        (1..=t2).collect(),
        first.iter().chain(&third).copied().collect(),
        (t1 + 1..=n_layers).collect(),
        (1..=n_layers).collect(),
    ];
    Ok(ranges
        .into_iter()
        .map(|layers| {
            let label = format_layer_set(&layers);
            let mut plan = base.clone();
            plan.layers = layers;
            plan.multipliers.clear();
            AblateCell { label, plan: Some(plan) }
        })
        .collect())
}

/// Multiplier strategies on top of the base plan: none, the v matrices
/// widened 1.5x, the latter half of the layers widened 1.5x, and the
/// latter half of the v matrices widened 1.5x.
pub fn multipliers_grid(base: &LoraPlan, n_layers: usize) -> Vec<AblateCell> {
    let latter: Vec<usize> = (n_layers / 2 + 1..=n_layers).collect();
    let rule = |layers: Option<Vec<usize>>, matrices: Option<Vec<MatrixKind>>| MultiplierRule {
        layers,
        matrices,
        factor: 1.5,
    };
    let strategies: [(&str, Option<MultiplierRule>); 4] = [
        ("base", None),
        ("v-x1.5", Some(rule(None, Some(vec![MatrixKind::V])))),
        ("latter-half-x1.5", Some(rule(Some(latter.clone()), None))),
        ("latter-half-v-x1.5", Some(rule(Some(latter), Some(vec![MatrixKind::V])))),
    ];
    strategies
        .into_iter()
        .map(|(label, rule)| {
            let mut plan = base.clone();
            plan.multipliers = rule.into_iter().collect();
            AblateCell { label: label.into(), plan: Some(plan) }
        })
        .collect()
}

pub fn grid_cells(kind: GridKind, base: &LoraPlan, n_layers: usize) -> Result<Vec<AblateCell>> {
    Ok(match kind {
        GridKind::Rank => rank_grid(base),
        GridKind::Matrices => matrices_grid(base),
        GridKind::Layers => layers_grid(base, n_layers)?,
        GridKind::Multipliers => multipliers_grid(base, n_layers),
    })
}

/// One evaluated row.
#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub label: String,
    pub trainable_params: Option<usize>,
    pub dev_score: Option<f64>,
    pub eval_score: Option<f64>,
    pub hmean: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TableResult {
    pub grid: String,
    pub csv_path: PathBuf,
    pub cells: Vec<CellResult>,
}

impl TableResult {
    pub fn failures(&self) -> Vec<&CellResult> {
        self.cells.iter().filter(|c| c.error.is_some()).collect()
    }
}

pub const ABLATE_CSV_HEADER: &str = "plan,trainable_params,dev_score,eval_score,hmean";

fn render_csv(cells: &[CellResult]) -> String {
    let mut out = String::from(ABLATE_CSV_HEADER);
    out.push('\n');
    for c in cells {
        let fmt = |v: Option<f64>| v.map(|x| format!("{:.2}", x * 100.0)).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.label,
            c.trainable_params.map(|p| p.to_string()).unwrap_or_default(),
            fmt(c.dev_score),
            fmt(c.eval_score),
            fmt(c.hmean),
        ));
    }
    out
}

/// Shared inputs for every cell, prepared once.
struct Prepared {
    base_weights: EncoderWeights<PipelineScalar>,
    examples: Vec<TrainExample<PipelineScalar>>,
    n_classes: usize,
    train_refs: Vec<RefClip>,
    test_clips: Vec<TestClip>,
    dev_machines: Vec<String>,
    eval_machines: Vec<String>,
}

struct RefClip {
    clip_id: String,
    machine: String,
    domain: crate::data::Domain,
    features: crate::dsp::Spectrogram<PipelineScalar>,
}

struct TestClip {
    clip_id: String,
    machine: String,
    domain: crate::data::Domain,
    label: Label,
    features: crate::dsp::Spectrogram<PipelineScalar>,
}

fn prepare(
    cfg: &RunConfig,
    manifest_path: &Path,
    base_checkpoint: &Path,
    cache_dir: Option<&Path>,
) -> Result<Prepared> {
    let manifest = Manifest::read(manifest_path)?;
    manifest.validate()?;
    let container = Container::read(base_checkpoint)?;
    let base_weights: EncoderWeights<PipelineScalar> = encoder_from_container(&container)?;
    if base_weights.config != cfg.encoder_config()? {
        return Err(Error::shape(
            "encoder architecture vs config",
            format!("{:?}", cfg.encoder_config()?),
            format!("{:?}", base_weights.config),
        ));
    }
    let stats = stats_from_container::<PipelineScalar>(&container)?.ok_or_else(|| {
        Error::malformed(base_checkpoint.display().to_string(), "checkpoint lacks feature stats")
    })?;
    let table = class_table(&manifest)?;

    let mut train_records: Vec<_> =
        manifest.records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    train_records.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    let mut test_records: Vec<_> =
        manifest.records.iter().filter(|r| r.split == Split::Test).cloned().collect();
    test_records.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));

    let train_features = extract_features(&manifest, &train_records, cfg, cache_dir)?;
    let test_features = extract_features(&manifest, &test_records, cfg, cache_dir)?;

    let mut examples = Vec::with_capacity(train_records.len());
    let mut train_refs = Vec::with_capacity(train_records.len());
    for (record, spec) in train_records.iter().zip(&train_features) {
        let standardized = crate::dsp::standardize(spec, &stats)?;
        let class = *table.get(&class_key(record)).ok_or_else(|| {
            Error::InvalidConfig(format!("train clip {:?} has no class", record.clip_id))
        })?;
        train_refs.push(RefClip {
            clip_id: record.clip_id.clone(),
            machine: record.machine.clone(),
            domain: record.domain,
            features: standardized.clone(),
        });
        examples.push(TrainExample { features: standardized, class });
    }
    let mut test_clips = Vec::with_capacity(test_records.len());
    for (record, spec) in test_records.iter().zip(&test_features) {
        if record.label == Label::Unknown {
            return Err(Error::MissingLabels(format!(
                "test clip {:?} has no label",
                record.clip_id
            )));
        }
        test_clips.push(TestClip {
            clip_id: record.clip_id.clone(),
            machine: record.machine.clone(),
            domain: record.domain,
            label: record.label,
            features: crate::dsp::standardize(spec, &stats)?,
        });
    }

    let mut machines: Vec<String> = manifest
        .records
        .iter()
        .map(|r| r.machine.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if machines.len() < 2 {
        return Err(Error::InvalidConfig(
            "ablation needs at least 2 machines for a dev/eval split".into(),
        ));
    }
    let eval_machines = vec![machines.pop().expect("non-empty")];
    Ok(Prepared {
        base_weights,
        examples,
        n_classes: table.len(),
        train_refs,
        test_clips,
        dev_machines: machines,
        eval_machines,
    })
}

/// Official score over one machine subset of the labeled per-machine map.
fn subset_score(
    per_machine: &BTreeMap<String, Vec<LabeledScore>>,
    machines: &[String],
    p: f64,
    mcclish: bool,
) -> Result<f64> {
    let subset: BTreeMap<String, Vec<LabeledScore>> = per_machine
        .iter()
        .filter(|(m, _)| machines.contains(m))
        .map(|(m, v)| (m.clone(), v.clone()))
        .collect();
    if subset.is_empty() {
        return Err(Error::EmptyClass("machine subset".into()));
    }
    Ok(evaluate(&subset, p, mcclish)?.official)
}

fn run_cell(cfg: &RunConfig, prep: &Prepared, kind: GridKind, cell: &AblateCell) -> Result<CellResult> {
    let mut train_cfg: TrainConfig = cfg.train_config()?;
    train_cfg.mode = if cell.plan.is_some() { TrainMode::Lora } else { TrainMode::Full };
    train_cfg.seed =
        derive_seed(cfg.seed, &[tag_str("ablate"), tag_str(kind.as_str()), tag_str(&cell.label)]);

    let outcome = train(
        &prep.examples,
        prep.n_classes,
        prep.base_weights.clone(),
        cell.plan.as_ref(),
        &train_cfg,
    )?;
    if let Some(step) = outcome.diverged_at {
        return Err(Error::Divergence { step: step as usize });
    }

    // Reference embeddings per machine and domain under this cell's model.
    let adapters = outcome.adapters.as_ref();
    let mut refs: BTreeMap<String, [Vec<(String, ndarray::Array1<f64>)>; 2]> = BTreeMap::new();
    for clip in &prep.train_refs {
        let pooled = encode(&clip.features.frames, &outcome.weights, adapters)?;
        let vector: ndarray::Array1<f64> = pooled.iter().map(|v| v.to64()).collect();
        let idx = match clip.domain {
            crate::data::Domain::Source => 0,
            crate::data::Domain::Target => 1,
        };
        refs.entry(clip.machine.clone()).or_default()[idx].push((clip.clip_id.clone(), vector));
    }
    let mut sets = BTreeMap::new();
    for (machine, [source, target]) in refs {
        let source = crate::detect::ReferenceSet::build(crate::data::Domain::Source, source)?;
        let target = crate::detect::ReferenceSet::build(crate::data::Domain::Target, target)?;
        sets.insert(machine, (source, target));
    }

    let mut per_machine: BTreeMap<String, Vec<LabeledScore>> = BTreeMap::new();
    for clip in &prep.test_clips {
        let (source, target) = sets.get(&clip.machine).ok_or_else(|| {
            Error::InvalidConfig(format!("no references for machine {:?}", clip.machine))
        })?;
        let pooled = encode(&clip.features.frames, &outcome.weights, adapters)?;
        let vector: ndarray::Array1<f64> = pooled.iter().map(|v| v.to64()).collect();
        let score = score_clip(&clip.clip_id, vector.view(), source, target, cfg.detect.k)?;
        per_machine.entry(clip.machine.clone()).or_default().push(LabeledScore {
            score: score.score,
            label: clip.label,
            domain: clip.domain,
        });
    }

    let p = cfg.metrics.p;
    let mcclish = cfg.metrics.mcclish;
    let dev = subset_score(&per_machine, &prep.dev_machines, p, mcclish)?;
    let eval_score = subset_score(&per_machine, &prep.eval_machines, p, mcclish)?;
    Ok(CellResult {
        label: cell.label.clone(),
        trainable_params: Some(outcome.trainable_params()),
        dev_score: Some(dev),
        eval_score: Some(eval_score),
        hmean: Some(hmean(&[dev, eval_score])?),
        error: None,
    })
}

/// Runs the requested grids and writes one CSV per grid. Cell failures are
/// recorded in their rows and the summary; the run itself still succeeds.
pub fn run_ablate(
    cfg: &RunConfig,
    manifest_path: &Path,
    base_checkpoint: &Path,
    out_dir: &Path,
    grids: &[GridKind],
    cache_dir: Option<&Path>,
) -> Result<Vec<TableResult>> {
    cfg.validate()?;
    if grids.is_empty() {
        return Err(Error::InvalidConfig("no grids requested".into()));
    }
    let prep = prepare(cfg, manifest_path, base_checkpoint, cache_dir)?;
    let base_plan = cfg.lora_plan()?;
    let n_layers = cfg.model.n_layers;
    std::fs::create_dir_all(out_dir)?;
    let mut tables = Vec::new();
    for &kind in grids {
        let cells = grid_cells(kind, &base_plan, n_layers)?;
        let mut results = Vec::with_capacity(cells.len());
        for cell in &cells {
            match run_cell(cfg, &prep, kind, cell) {
                Ok(result) => results.push(result),
                Err(e) => results.push(CellResult {
                    label: cell.label.clone(),
                    trainable_params: None,
                    dev_score: None,
                    eval_score: None,
                    hmean: None,
                    error: Some(e.to_string()),
                }),
            }
        }
        let csv_path = out_dir.join(kind.csv_name());
        std::fs::write(&csv_path, render_csv(&results))?;
        tables.push(TableResult {
            grid: kind.as_str().to_string(),
            csv_path,
            cells: results,
        });
    }
    cfg.echo_into(out_dir)?;
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::run_gen_data;

    fn base_plan() -> LoraPlan {
        LoraPlan::uniform(12, &[MatrixKind::Q, MatrixKind::V], 8)
    }

    #[test]
    fn rank_grid_rows_are_full_plus_six_ranks() {
        let cells = rank_grid(&base_plan());
        let labels: Vec<&str> = cells.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, vec!["full", "r=4", "r=8", "r=16", "r=32", "r=64", "r=128"]);
        assert!(cells[0].plan.is_none());
        assert_eq!(cells[5].plan.as_ref().unwrap().rank, 64);
    }

    #[test]
    fn matrices_grid_has_seven_subsets_in_order() {
        let cells = matrices_grid(&base_plan());
        let labels: Vec<&str> = cells.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, vec!["k", "q", "v", "k,v", "k,q", "k,q,v", "q,v"]);
        for c in &cells {
            assert_eq!(c.plan.as_ref().unwrap().rank, 8);
        }
    }

    #[test]
    fn layers_grid_splits_into_thirds() {
        let cells = layers_grid(&base_plan(), 12).unwrap();
        let labels: Vec<&str> = cells.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, vec!["1-4", "5-8", "9-12", "1-8", "1-4,9-12", "5-12", "1-12"]);
        assert!(layers_grid(&base_plan(), 2).is_err());
        let small = layers_grid(&base_plan(), 3).unwrap();
        assert_eq!(small[0].label, "1");
        assert_eq!(small[6].label, "1-3");
    }

    #[test]
    fn multipliers_grid_has_base_plus_three_strategies() {
        let cells = multipliers_grid(&base_plan(), 12);
        let labels: Vec<&str> = cells.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, vec!["base", "v-x1.5", "latter-half-x1.5", "latter-half-v-x1.5"]);
        assert!(cells[0].plan.as_ref().unwrap().multipliers.is_empty());
        let latter_v = &cells[3].plan.as_ref().unwrap().multipliers[0];
        assert!(latter_v.matches(10, MatrixKind::V));
        assert!(!latter_v.matches(3, MatrixKind::V));
        assert!(!latter_v.matches(10, MatrixKind::Q));
    }

    #[test]
    fn tiny_grid_runs_end_to_end_with_failure_tolerance() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = crate::config::RunConfig::default();
        cfg.seed = 3;
        cfg.data.clip_seconds = 0.3;
        cfg.data.train_source = 3;
        cfg.data.train_target = 2;
        cfg.data.test_normal = 2;
        cfg.data.test_anomaly = 2;
        cfg.data.machines = {
            let mut specs = crate::data::default_specs();
            specs.truncate(2);
            for s in &mut specs {
                s.n_harmonics = 3;
                s.speeds.truncate(2);
            }
            specs
        };
        cfg.model.n_layers = 3;
        cfg.model.d_model = 16;
        cfg.model.n_heads = 2;
        cfg.model.patch_frames = 14;
        cfg.model.patch_bins = 32;
        cfg.lora.layers = "1-3".into();
        cfg.lora.rank = 2;
        cfg.optim.epochs = 1;
        cfg.optim.batch_size = 4;

        let data_dir = dir.path().join("data");
        run_gen_data(&cfg, &data_dir).unwrap();
        let manifest_path = data_dir.join(crate::data::MANIFEST_NAME);
        let mut pretrain_cfg = cfg.clone();
        pretrain_cfg.optim.mode = "full".into();
        let summary = crate::pipeline::run_train(
            &pretrain_cfg,
            &manifest_path,
            None,
            &dir.path().join("base"),
            None,
        )
        .unwrap();

        let tables = run_ablate(
            &cfg,
            &manifest_path,
            &summary.checkpoint,
            &dir.path().join("ablate"),
            &[GridKind::Multipliers],
            None,
        )
        .unwrap();
        assert_eq!(tables.len(), 1);
        let table = &tables[0];
        assert_eq!(table.cells.len(), 4);
        assert!(table.csv_path.is_file());
        let csv = std::fs::read_to_string(&table.csv_path).unwrap();
        assert!(csv.starts_with(ABLATE_CSV_HEADER));
        assert_eq!(csv.lines().count(), 5);
        for cell in &table.cells {
            assert!(cell.error.is_none(), "{:?}", cell.error);
            assert!(cell.dev_score.unwrap() > 0.0);
            assert!(cell.hmean.unwrap() <= 1.0);
            assert!(cell.trainable_params.unwrap() > 0);
        }
        // Same-seed rerun reproduces rows exactly.
        let again = run_ablate(
            &cfg,
            &manifest_path,
            &summary.checkpoint,
            &dir.path().join("ablate2"),
            &[GridKind::Multipliers],
            None,
        )
        .unwrap();
        for (a, b) in table.cells.iter().zip(&again[0].cells) {
            assert_eq!(a.dev_score, b.dev_score);
            assert_eq!(a.eval_score, b.eval_score);
        }
    }
}
