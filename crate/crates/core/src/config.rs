//! Run configuration: a sectioned TOML file where every key has a default
//! and unknown keys are hard errors, so a typo in an experiment grid fails
//! loudly instead of silently running the default.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{CorpusCounts, MachineSpec};
use crate::dsp::{LogmelConfig, SpecAugPolicy};
use crate::error::{Error, Result};
use crate::lora::{parse_layer_set, LoraPlan, MatrixKind, MultiplierRule};
use crate::model::EncoderConfig;
use crate::optim::{TrainConfig, TrainMode};

/// Name of the resolved-config copy written into every output directory.
pub const RESOLVED_CONFIG_NAME: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DspSection {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub fmin_hz: f64,
    pub fmax_hz: Option<f64>,
    /// Apply masking augmentation during training.
    pub specaug: bool,
    pub freq_mask_width_max: usize,
    pub time_mask_width_max: usize,
    pub n_freq_masks: usize,
    pub n_time_masks: usize,
}

impl Default for DspSection {
    fn default() -> Self {
        let mel = LogmelConfig::default();
        let aug = SpecAugPolicy::default();
        DspSection {
            n_mels: mel.n_mels,
            win_ms: mel.win_ms,
            hop_ms: mel.hop_ms,
            n_fft: mel.n_fft,
            fmin_hz: mel.fmin_hz,
            fmax_hz: mel.fmax_hz,
            specaug: true,
            freq_mask_width_max: aug.freq_mask_width_max,
            time_mask_width_max: aug.time_mask_width_max,
            n_freq_masks: aug.n_freq_masks,
            n_time_masks: aug.n_time_masks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub patch_frames: usize,
    pub patch_bins: usize,
    pub mlp_ratio: usize,
    pub max_tokens: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            n_layers: 12,
            d_model: 48,
            n_heads: 4,
            patch_frames: 16,
            patch_bins: 32,
            mlp_ratio: 4,
            max_tokens: 2048,
        }
    }
}

/// One rank-multiplier rule; omitted predicates match every site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiplierSection {
    pub layers: Option<String>,
    pub matrices: Option<Vec<String>>,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSection {
    /// Layer-set grammar, e.g. "1-12" or "1-4,9-12"; 1-based.
    pub layers: String,
    pub matrices: Vec<String>,
    pub rank: usize,
    /// Update scale numerator; omitted means "equal to the site's rank",
    /// which makes the scale exactly 1.
    pub alpha: Option<f64>,
    pub multipliers: Vec<MultiplierSection>,
}

impl Default for LoraSection {
    fn default() -> Self {
        LoraSection {
            layers: "1-12".into(),
            matrices: vec!["q".into(), "v".into()],
            rank: 8,
            alpha: None,
            multipliers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSection {
    pub scale: f64,
    pub margin: f64,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        ObjectiveSection { scale: 30.0, margin: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    /// "lora" or "full".
    pub mode: String,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip: Option<f64>,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            mode: "lora".into(),
            peak_lr: 5e-5,
            warmup_fraction: 0.1,
            batch_size: 8,
            epochs: 30,
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectSection {
    /// Neighbors averaged per reference set.
    pub k: usize,
}

impl Default for DetectSection {
    fn default() -> Self {
        DetectSection { k: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// False-positive-rate cap for the partial AUC.
    pub p: f64,
    /// Report the standardized partial AUC instead of the plain one.
    pub mcclish: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { p: 0.1, mcclish: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub clip_seconds: f64,
    pub train_source: usize,
    pub train_target: usize,
    pub test_normal: usize,
    pub test_anomaly: usize,
    pub machines: Vec<MachineSpec>,
}

impl Default for DataSection {
    fn default() -> Self {
        let counts = CorpusCounts::default();
        DataSection {
            clip_seconds: 2.0,
            train_source: counts.train_source,
            train_target: counts.train_target,
            test_normal: counts.test_normal,
            test_anomaly: counts.test_anomaly,
            machines: crate::data::default_specs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub data_dir: String,
    pub out_dir: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection { data_dir: "data".into(), out_dir: "out".into() }
    }
}

/// Everything a run needs, assembled from defaults plus an optional TOML
/// file plus flag overrides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dsp: DspSection,
    pub model: ModelSection,
    pub lora: LoraSection,
    pub objective: ObjectiveSection,
    pub optim: OptimSection,
    pub detect: DetectSection,
    pub metrics: MetricsSection,
    pub data: DataSection,
    pub paths: PathsSection,
}

impl RunConfig {
    /// Parses a TOML file; unknown keys anywhere are errors.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Structural checks beyond per-key parsing.
    pub fn validate(&self) -> Result<()> {
        self.encoder_config()?.validate()?;
        self.lora_plan()?;
        self.corpus_counts().validate()?;
        for m in &self.data.machines {
            m.validate()?;
        }
        if !(self.metrics.p > 0.0 && self.metrics.p <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "metrics.p must be in (0, 1], got {}",
                self.metrics.p
            )));
        }
        if self.detect.k == 0 {
            return Err(Error::InvalidConfig("detect.k must be at least 1".into()));
        }
        self.train_mode()?;
        Ok(())
    }

    pub fn logmel_config(&self) -> LogmelConfig {
        LogmelConfig {
            win_ms: self.dsp.win_ms,
            hop_ms: self.dsp.hop_ms,
            n_fft: self.dsp.n_fft,
            n_mels: self.dsp.n_mels,
            fmin_hz: self.dsp.fmin_hz,
            fmax_hz: self.dsp.fmax_hz,
            ..LogmelConfig::default()
        }
    }

    /// The masking policy when augmentation is enabled.
    pub fn specaug_policy(&self) -> Option<SpecAugPolicy> {
        if !self.dsp.specaug {
            return None;
        }
        Some(SpecAugPolicy {
            freq_mask_width_max: self.dsp.freq_mask_width_max,
            time_mask_width_max: self.dsp.time_mask_width_max,
            n_freq_masks: self.dsp.n_freq_masks,
            n_time_masks: self.dsp.n_time_masks,
            ..SpecAugPolicy::default()
        })
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let cfg = EncoderConfig {
            n_layers: self.model.n_layers,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            patch_frames: self.model.patch_frames,
            patch_bins: self.model.patch_bins,
            mlp_ratio: self.model.mlp_ratio,
            max_tokens: self.model.max_tokens,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lora_plan(&self) -> Result<LoraPlan> {
        let layers = parse_layer_set(&self.lora.layers)?;
        let mut matrices = Vec::new();
        for m in &self.lora.matrices {
            matrices.push(MatrixKind::from_str(m)?);
        }
        let mut multipliers = Vec::new();
        for rule in &self.lora.multipliers {
            let rule_layers = rule.layers.as_deref().map(parse_layer_set).transpose()?;
            let rule_matrices = rule
                .matrices
                .as_ref()
                .map(|ms| ms.iter().map(|m| MatrixKind::from_str(m)).collect::<Result<Vec<_>>>())
                .transpose()?;
            if !(rule.factor > 0.0) || !rule.factor.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "multiplier factor must be positive, got {}",
                    rule.factor
                )));
            }
            multipliers.push(MultiplierRule {
                layers: rule_layers,
                matrices: rule_matrices,
                factor: rule.factor,
            });
        }
        Ok(LoraPlan {
            layers,
            matrices,
            rank: self.lora.rank,
            alpha: self.lora.alpha,
            multipliers,
        })
    }

    pub fn train_mode(&self) -> Result<TrainMode> {
        self.optim.mode.parse()
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            mode: self.train_mode()?,
            batch_size: self.optim.batch_size,
            epochs: self.optim.epochs,
            seed: self.seed,
            peak_lr: self.optim.peak_lr,
            warmup_fraction: self.optim.warmup_fraction,
            arcface_scale: self.objective.scale,
            arcface_margin: self.objective.margin,
            grad_clip: self.optim.grad_clip,
            specaug: self.specaug_policy(),
        })
    }

    pub fn corpus_counts(&self) -> CorpusCounts {
        CorpusCounts {
            train_source: self.data.train_source,
            train_target: self.data.train_target,
            test_normal: self.data.test_normal,
            test_anomaly: self.data.test_anomaly,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("config serialization failed: {e}")))
    }

    /// Writes the fully resolved config into an output directory so every
    /// artifact records the settings that produced it.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RESOLVED_CONFIG_NAME), self.to_toml()?)?;
        Ok(())
    }
}
