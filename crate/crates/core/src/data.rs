//! Synthetic machine-sound corpus and DCASE-style manifest handling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Recording condition of a clip: abundant vs scarce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Source, Domain::Target];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::InvalidConfig(format!("unknown domain {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomaly,
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomaly => "anomaly",
            Label::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Label::Normal),
            "anomaly" => Ok(Label::Anomaly),
            "unknown" => Ok(Label::Unknown),
            other => Err(Error::InvalidConfig(format!("unknown label {other:?}"))),
        }
    }
}

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dsp::wav::{write_wav, SAMPLE_RATE};
use crate::rng::{derive_seed, tag_str};

/// Depth of the amplitude-modulation envelope, and the base amplitude that
/// keeps a full harmonic stack plus noise inside [-1, 1].
const AM_DEPTH: f64 = 0.5;
const STACK_SCALE: f64 = 0.1;

/// Severity knobs for the three injected fault types. Each must be positive;
/// a zero severity would make anomalous clips statistically identical to
/// normal ones and is refused up front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyModes {
    /// Fractional frequency offset applied to one harmonic.
    pub detune_frac: f64,
    /// Standard deviation of broadband noise added over a short window.
    pub burst_level: f64,
    /// Fraction of one harmonic's amplitude removed (1 = silenced).
    pub dropout_depth: f64,
}

impl Default for AnomalyModes {
    fn default() -> Self {
        AnomalyModes { detune_frac: 0.06, burst_level: 0.25, dropout_depth: 1.0 }
    }
}

/// One simulated machine type: a harmonic stack under an AM envelope, with
/// per-domain noise levels and an attribute grid that varies the running
/// speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineSpec {
    pub name: String,
    pub fundamental_hz: f64,
    pub n_harmonics: usize,
    pub am_rate_hz: f64,
    /// Attribute values for the `speed` axis; at least two so the
    /// classification proxy task has multiple classes per machine.
    pub speeds: Vec<String>,
    /// Noise standard deviation for source-domain recordings.
    pub source_noise: f64,
    /// Noise standard deviation for target-domain recordings; differing from
    /// `source_noise` is what creates the domain shift.
    pub target_noise: f64,
    #[serde(default)]
    pub modes: AnomalyModes,
}

impl MachineSpec {
    /// Multiplier applied to fundamental and AM rate for speed index `i`,
    /// spread linearly over [0.75, 1.25].
    pub fn speed_factor(&self, i: usize) -> f64 {
        let n = self.speeds.len();
        if n <= 1 {
            return 1.0;
        }
        0.75 + 0.5 * i as f64 / (n - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || self.name.contains('/')
            || self.name.contains(char::is_whitespace)
        {
            return Err(Error::InvalidConfig(format!(
                "machine name {:?} must be non-empty with no slash or whitespace",
                self.name
            )));
        }
        if self.n_harmonics == 0 {
            return Err(Error::InvalidConfig(format!("{}: n_harmonics must be >= 1", self.name)));
        }
        if self.speeds.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "{}: need at least 2 speed values for a non-degenerate class set",
                self.name
            )));
        }
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        let max_factor = (0..self.speeds.len())
            .map(|i| self.speed_factor(i))
            .fold(f64::MIN, f64::max);
        let top = self.fundamental_hz * (1.0 + self.modes.detune_frac)
            * self.n_harmonics as f64
            * max_factor;
        if !(self.fundamental_hz > 0.0) || top >= nyquist || self.am_rate_hz >= nyquist {
            return Err(Error::NyquistViolation {
                machine: self.name.clone(),
                freq_hz: top.max(self.am_rate_hz),
                nyquist_hz: nyquist,
            });
        }
        if !(self.am_rate_hz > 0.0) {
            return Err(Error::InvalidConfig(format!("{}: am_rate_hz must be > 0", self.name)));
        }
        for (what, v) in [
            ("source_noise", self.source_noise),
            ("target_noise", self.target_noise),
            ("detune_frac", self.modes.detune_frac),
            ("burst_level", self.modes.burst_level),
            ("dropout_depth", self.modes.dropout_depth),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{}: {what} must be positive, got {v}",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// The stock three-machine corpus used by the end-to-end runs: distinct
/// fundamentals and AM rates, same attribute grid, same noise shift.
pub fn default_specs() -> Vec<MachineSpec> {
    let speeds = || vec!["low".to_string(), "med".to_string(), "high".to_string()];
    vec![
        MachineSpec {
            name: "fan".into(),
            fundamental_hz: 110.0,
            n_harmonics: 12,
            am_rate_hz: 3.0,
            speeds: speeds(),
            source_noise: 0.02,
            target_noise: 0.06,
            modes: AnomalyModes::default(),
        },
        MachineSpec {
            name: "pump".into(),
            fundamental_hz: 170.0,
            n_harmonics: 10,
            am_rate_hz: 5.0,
            speeds: speeds(),
            source_noise: 0.02,
            target_noise: 0.06,
            modes: AnomalyModes::default(),
        },
        MachineSpec {
            name: "slider".into(),
            fundamental_hz: 260.0,
            n_harmonics: 8,
            am_rate_hz: 7.0,
            speeds: speeds(),
            source_noise: 0.02,
            target_noise: 0.06,
            modes: AnomalyModes::default(),
        },
    ]
}

/// Clip counts per machine. Training clips are all normal; the test counts
/// apply to each domain separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub train_source: usize,
    pub train_target: usize,
    pub test_normal: usize,
    pub test_anomaly: usize,
}

impl Default for CorpusCounts {
    fn default() -> Self {
        CorpusCounts { train_source: 90, train_target: 10, test_normal: 50, test_anomaly: 50 }
    }
}

impl CorpusCounts {
    pub fn validate(&self) -> Result<()> {
        if self.train_source == 0
            || self.train_target == 0
            || self.test_normal == 0
            || self.test_anomaly == 0
        {
            return Err(Error::InvalidConfig("every corpus count must be >= 1".into()));
        }
        Ok(())
    }
}

/// One manifest row. `path` is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub clip_id: String,
    pub path: String,
    pub machine: String,
    pub domain: Domain,
    pub split: Split,
    pub label: Label,
    pub attributes: BTreeMap<String, String>,
}

/// A corpus listing rooted at the directory holding the manifest file.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

impl Manifest {
    /// Absolute path of a record's WAV file.
    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Checks clip-id uniqueness and that the train split is normal-only.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.clip_id.as_str()) {
                return Err(Error::Malformed {
                    path: self.root.join(MANIFEST_NAME).display().to_string(),
                    reason: format!("duplicate clip_id {:?}", r.clip_id),
                });
            }
            if r.split == Split::Train && r.label != Label::Normal {
                return Err(Error::Malformed {
                    path: self.root.join(MANIFEST_NAME).display().to_string(),
                    reason: format!("train clip {:?} labeled {}", r.clip_id, r.label),
                });
            }
        }
        Ok(())
    }

    /// Writes `manifest.jsonl` under the manifest root.
    pub fn write(&self) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        std::fs::write(self.root.join(MANIFEST_NAME), out)?;
        Ok(())
    }

    /// Reads a manifest file; the parent directory becomes the root.
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(line).map_err(|e| {
                Error::Malformed {
                    path: path.display().to_string(),
                    reason: format!("line {}: {e}", idx + 1),
                }
            })?;
            records.push(record);
        }
        Ok(Manifest { root, records })
    }
}

/// Synthesizes one clip. The returned samples are in [-1, 1] nominal range
/// before PCM quantization.
fn synth_clip(
    spec: &MachineSpec,
    speed_idx: usize,
    domain: Domain,
    label: Label,
    n_samples: usize,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factor = spec.speed_factor(speed_idx);
    let f0 = spec.fundamental_hz * factor;
    let am = spec.am_rate_hz * factor;
    let sigma = match domain {
        Domain::Source => spec.source_noise,
        Domain::Target => spec.target_noise,
    };

    let phases: Vec<f64> =
        (0..spec.n_harmonics).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let am_phase = rng.gen_range(0.0..std::f64::consts::TAU);

    // Fault parameters are drawn even for normal clips so the RNG stream
    // stays aligned; only anomalous clips apply them.
    let mode = rng.gen_range(0..3u32);
    let fault_harmonic = rng.gen_range(0..spec.n_harmonics);
    let burst_start_frac = rng.gen_range(0.0..0.7);
    let burst_len_frac = rng.gen_range(0.1..0.3);
    let anomalous = label == Label::Anomaly;

    let mut detune = vec![1.0f64; spec.n_harmonics];
    let mut gain = vec![1.0f64; spec.n_harmonics];
    if anomalous {
        match mode {
            0 => detune[fault_harmonic] = 1.0 + spec.modes.detune_frac,
            1 => {}
            _ => gain[fault_harmonic] = 1.0 - spec.modes.dropout_depth,
        }
    }
    let burst = anomalous && mode == 1;
    let burst_start = (burst_start_frac * n_samples as f64) as usize;
    let burst_end =
        (burst_start + (burst_len_frac * n_samples as f64) as usize).min(n_samples);

    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    let burst_noise = Normal::new(0.0, spec.modes.burst_level).expect("positive severity");
    let dt = 1.0 / SAMPLE_RATE as f64;
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let t = i as f64 * dt;
        let mut stack = 0.0;
        for h in 0..spec.n_harmonics {
            let freq = f0 * (h + 1) as f64 * detune[h];
            stack += gain[h] / (h + 1) as f64
                * (std::f64::consts::TAU * freq * t + phases[h]).sin();
        }
        let env = 1.0 + AM_DEPTH * (std::f64::consts::TAU * am * t + am_phase).sin();
        let mut v = STACK_SCALE * stack * env + noise.sample(&mut rng);
        if burst && i >= burst_start && i < burst_end {
            v += burst_noise.sample(&mut rng);
        }
        samples.push(v);
    }
    samples
}

fn record_filename(
    domain: Domain,
    split: Split,
    label: Label,
    index: usize,
    speed: &str,
) -> String {
    format!(
        "section_00_{}_{}_{}_{:04}_speed_{}.wav",
        domain.as_str(),
        split.as_str(),
        label.as_str(),
        index,
        speed
    )
}

/// Generates a WAV corpus plus manifest under `out_dir`. Pure function of
/// its arguments: the same inputs produce a byte-identical corpus.
pub fn generate(
    specs: &[MachineSpec],
    counts: &CorpusCounts,
    clip_seconds: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    if specs.is_empty() {
        return Err(Error::InvalidConfig("no machine specs given".into()));
    }
    counts.validate()?;
    if !(clip_seconds > 0.0) {
        return Err(Error::InvalidConfig(format!("clip_seconds must be > 0, got {clip_seconds}")));
    }
    for spec in specs {
        spec.validate()?;
    }
    let names: BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
    if names.len() != specs.len() {
        return Err(Error::InvalidConfig("duplicate machine names".into()));
    }

    let n_samples = (clip_seconds * SAMPLE_RATE as f64).round() as usize;
    let mut records = Vec::new();
    for spec in specs {
        // Cells: (domain, split, label, count). Train is normal-only.
        let cells = [
            (Domain::Source, Split::Train, Label::Normal, counts.train_source),
            (Domain::Target, Split::Train, Label::Normal, counts.train_target),
            (Domain::Source, Split::Test, Label::Normal, counts.test_normal),
            (Domain::Target, Split::Test, Label::Normal, counts.test_normal),
            (Domain::Source, Split::Test, Label::Anomaly, counts.test_anomaly),
            (Domain::Target, Split::Test, Label::Anomaly, counts.test_anomaly),
        ];
        for (domain, split, label, count) in cells {
            let dir = out_dir.join(&spec.name).join(split.as_str());
            std::fs::create_dir_all(&dir)?;
            for index in 0..count {
                let speed_idx = index % spec.speeds.len();
                let speed = &spec.speeds[speed_idx];
                let filename = record_filename(domain, split, label, index, speed);
                let clip_id = format!("{}_{}", spec.name, filename.trim_end_matches(".wav"));
                let clip_seed = derive_seed(seed, &[tag_str("clip"), tag_str(&clip_id)]);
                let samples =
                    synth_clip(spec, speed_idx, domain, label, n_samples, clip_seed);
                let rel = format!("{}/{}/{}", spec.name, split.as_str(), filename);
                write_wav(&out_dir.join(&rel), &samples)?;
                records.push(ManifestRecord {
                    clip_id,
                    path: rel,
                    machine: spec.name.clone(),
                    domain,
                    split,
                    label,
                    attributes: BTreeMap::from([("speed".to_string(), speed.clone())]),
                });
            }
        }
    }
    let manifest = Manifest { root: out_dir.to_path_buf(), records };
    manifest.validate()?;
    manifest.write()?;
    Ok(manifest)
}

/// Parses `section_00_<domain>_<split>_<label>_<index>_<key>_<val>...` into
/// a record, or explains why it cannot.
fn parse_dcase_name(machine: &str, split_dir: Split, rel: &str, stem: &str) -> std::result::Result<ManifestRecord, String> {
    let tokens: Vec<&str> = stem.split('_').collect();
    if tokens.len() < 6 {
        return Err(format!("expected at least 6 underscore tokens, got {}", tokens.len()));
    }
    if tokens[0] != "section" {
        return Err(format!("expected leading 'section', got {:?}", tokens[0]));
    }
    let domain: Domain = tokens[2].parse().map_err(|_| format!("bad domain token {:?}", tokens[2]))?;
    let split: Split = tokens[3].parse().map_err(|_| format!("bad split token {:?}", tokens[3]))?;
    if split != split_dir {
        return Err(format!("split token {split} disagrees with directory {split_dir}"));
    }
    let label: Label = tokens[4].parse().map_err(|_| format!("bad label token {:?}", tokens[4]))?;
    if split == Split::Train && label != Label::Normal {
        return Err(format!("train clip labeled {label}"));
    }
    if tokens[5].parse::<u64>().is_err() {
        return Err(format!("bad index token {:?}", tokens[5]));
    }
    let rest = &tokens[6..];
    if rest.len() % 2 != 0 {
        return Err(format!("odd attribute token count {}", rest.len()));
    }
    let mut attributes = BTreeMap::new();
    for pair in rest.chunks(2) {
        attributes.insert(pair[0].to_string(), pair[1].to_string());
    }
    Ok(ManifestRecord {
        clip_id: format!("{machine}_{stem}"),
        path: rel.to_string(),
        machine: machine.to_string(),
        domain,
        split,
        label,
        attributes,
    })
}

/// Scans a `<machine>/{train,test}/*.wav` tree into a manifest. Malformed
/// filenames are logged and skipped; the second return value counts them.
pub fn read_dcase_layout(root: &Path) -> Result<(Manifest, usize)> {
    let mut records = Vec::new();
    let mut skipped = 0usize;
    let mut machines: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    machines.sort();
    for machine_dir in machines {
        let machine = machine_dir.file_name().unwrap_or_default().to_string_lossy().to_string();
        for split_dir in [Split::Train, Split::Test] {
            let dir = machine_dir.join(split_dir.as_str());
            if !dir.is_dir() {
                continue;
            }
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|e| e == "wav"))
                .collect();
            files.sort();
            for file in files {
                let stem = file.file_stem().unwrap_or_default().to_string_lossy();
                let rel = format!("{}/{}/{}.wav", machine, split_dir.as_str(), stem);
                match parse_dcase_name(&machine, split_dir, &rel, &stem) {
                    Ok(record) => records.push(record),
                    Err(why) => {
                        log::warn!("skipping {}: {why}", file.display());
                        skipped += 1;
                    }
                }
            }
        }
    }
    let manifest = Manifest { root: root.to_path_buf(), records };
    manifest.validate()?;
    Ok((manifest, skipped))
}

/// Canonical class key for the proxy classification task: machine name plus
/// sorted attribute pairs.
pub fn class_key(record: &ManifestRecord) -> String {
    let mut key = record.machine.clone();
    for (k, v) in &record.attributes {
        key.push('|');
        key.push_str(k);
        key.push('=');
        key.push_str(v);
    }
    key
}

/// Dense class ids for the train split, assigned in lexicographic order of
/// the canonical class keys. At least two classes are required; a single
/// class would make the classification objective degenerate.
pub fn class_table(manifest: &Manifest) -> Result<BTreeMap<String, usize>> {
    let keys: BTreeSet<String> = manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(class_key)
        .collect();
    if keys.len() < 2 {
        return Err(Error::SingleClass);
    }
    Ok(keys.into_iter().enumerate().map(|(i, k)| (k, i)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::wav::read_wav;

    fn tiny_specs() -> Vec<MachineSpec> {
        let speeds = || vec!["low".to_string(), "high".to_string()];
        vec![
            MachineSpec {
                name: "fan".into(),
                fundamental_hz: 200.0,
                n_harmonics: 4,
                am_rate_hz: 5.0,
                speeds: speeds(),
                source_noise: 0.02,
                target_noise: 0.06,
                modes: AnomalyModes::default(),
            },
            MachineSpec {
                name: "pump".into(),
                fundamental_hz: 330.0,
                n_harmonics: 3,
                am_rate_hz: 8.0,
                speeds: speeds(),
                source_noise: 0.02,
                target_noise: 0.06,
                modes: AnomalyModes::default(),
            },
        ]
    }

    fn tiny_counts() -> CorpusCounts {
        CorpusCounts { train_source: 3, train_target: 2, test_normal: 2, test_anomaly: 2 }
    }

    #[test]
    fn vocabulary_roundtrips_through_strings() {
        for d in Domain::ALL {
            assert_eq!(d.as_str().parse::<Domain>().unwrap(), d);
        }
        for s in [Split::Train, Split::Test] {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        for l in [Label::Normal, Label::Anomaly, Label::Unknown] {
            assert_eq!(l.as_str().parse::<Label>().unwrap(), l);
        }
        assert!("sideways".parse::<Domain>().is_err());
    }

    #[test]
    fn default_specs_are_valid_and_distinct() {
        let specs = default_specs();
        assert_eq!(specs.len(), 3);
        for s in &specs {
            s.validate().unwrap();
        }
        assert_eq!(specs[0].speeds.len(), 3);
    }

    #[test]
    fn spec_validation_rejects_bad_inputs() {
        let mut s = tiny_specs().remove(0);
        s.fundamental_hz = 3000.0;
        assert!(matches!(s.validate(), Err(Error::NyquistViolation { .. })));

        let mut s = tiny_specs().remove(0);
        s.modes.burst_level = 0.0;
        assert!(s.validate().is_err());
        s.modes.burst_level = -1.0;
        assert!(s.validate().is_err());

        let mut s = tiny_specs().remove(0);
        s.speeds = vec!["only".into()];
        assert!(s.validate().is_err());

        let mut s = tiny_specs().remove(0);
        s.name = "has space".into();
        assert!(s.validate().is_err());

        let mut c = tiny_counts();
        c.test_anomaly = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn speed_factor_spans_linear_range() {
        let s = &default_specs()[0];
        assert_eq!(s.speed_factor(0), 0.75);
        assert_eq!(s.speed_factor(1), 1.0);
        assert_eq!(s.speed_factor(2), 1.25);
    }

    #[test]
    fn generate_writes_expected_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate(&tiny_specs(), &tiny_counts(), 0.25, 7, dir.path()).unwrap();
        // Per machine: 3 + 2 train, (2 normal + 2 anomaly) x 2 domains test.
        assert_eq!(manifest.records.len(), 2 * (5 + 8));
        manifest.validate().unwrap();
        let n_expected = (0.25 * SAMPLE_RATE as f64).round() as usize;
        for r in &manifest.records {
            let wav = read_wav::<f64>(&manifest.resolve(r)).unwrap();
            assert_eq!(wav.samples.len(), n_expected, "{}", r.clip_id);
            if r.split == Split::Train {
                assert_eq!(r.label, Label::Normal);
            }
            assert_eq!(r.attributes.len(), 1);
        }
        let train = manifest.records.iter().filter(|r| r.split == Split::Train).count();
        assert_eq!(train, 2 * 5);
        let anomalies = manifest.records.iter().filter(|r| r.label == Label::Anomaly).count();
        assert_eq!(anomalies, 2 * 4);
    }

    #[test]
    fn generate_is_deterministic_bytewise() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m1 = generate(&tiny_specs(), &tiny_counts(), 0.2, 11, d1.path()).unwrap();
        let m2 = generate(&tiny_specs(), &tiny_counts(), 0.2, 11, d2.path()).unwrap();
        assert_eq!(m1.records, m2.records);
        for r in &m1.records {
            let b1 = std::fs::read(m1.resolve(r)).unwrap();
            let b2 = std::fs::read(m2.resolve(r)).unwrap();
            assert_eq!(b1, b2, "{}", r.clip_id);
        }
        let t1 = std::fs::read(d1.path().join(MANIFEST_NAME)).unwrap();
        let t2 = std::fs::read(d2.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(t1, t2);

        let d3 = tempfile::tempdir().unwrap();
        let m3 = generate(&tiny_specs(), &tiny_counts(), 0.2, 12, d3.path()).unwrap();
        let r = &m1.records[0];
        let r3 = &m3.records[0];
        assert_eq!(r.clip_id, r3.clip_id);
        assert_ne!(
            std::fs::read(m1.resolve(r)).unwrap(),
            std::fs::read(m3.resolve(r3)).unwrap()
        );
    }

    #[test]
    fn manifest_roundtrips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let written = generate(&tiny_specs(), &tiny_counts(), 0.1, 3, dir.path()).unwrap();
        let read = Manifest::read(&dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(written.records, read.records);
        assert_eq!(read.root, dir.path());
    }

    #[test]
    fn layout_scan_recovers_generated_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let written = generate(&tiny_specs(), &tiny_counts(), 0.1, 5, dir.path()).unwrap();
        let (scanned, skipped) = read_dcase_layout(dir.path()).unwrap();
        assert_eq!(skipped, 0);
        let mut a = written.records.clone();
        let mut b = scanned.records.clone();
        a.sort_by(|x, y| x.clip_id.cmp(&y.clip_id));
        b.sort_by(|x, y| x.clip_id.cmp(&y.clip_id));
        assert_eq!(a, b);
    }

    #[test]
    fn layout_scan_skips_malformed_names() {
        let dir = tempfile::tempdir().unwrap();
        let test = dir.path().join("fan").join("test");
        let train = dir.path().join("fan").join("train");
        std::fs::create_dir_all(&test).unwrap();
        std::fs::create_dir_all(&train).unwrap();
        let good = [
            "section_00_source_test_normal_0000_speed_low.wav",
            "section_00_target_test_anomaly_0001_speed_high.wav",
            "section_00_source_test_normal_0002_speed_med_load_full.wav",
        ];
        let bad = [
            "section_00_source.wav",
            "section_00_mars_test_normal_0000_speed_low.wav",
            "section_00_source_test_normal_0003_speed.wav",
        ];
        for name in good.iter().chain(&bad) {
            std::fs::write(test.join(name), b"").unwrap();
        }
        // Well-formed name in the wrong place: anomalies cannot be train.
        std::fs::write(train.join("section_00_source_train_anomaly_0000_speed_low.wav"), b"")
            .unwrap();
        std::fs::write(test.join("notes.txt"), b"ignored").unwrap();
        let (manifest, skipped) = read_dcase_layout(dir.path()).unwrap();
        assert_eq!(manifest.records.len(), 3);
        assert_eq!(skipped, 4);
        let parsed = &manifest.records[2];
        assert_eq!(parsed.domain, Domain::Target);
        assert_eq!(parsed.label, Label::Anomaly);
        let multi = &manifest.records[1];
        assert_eq!(multi.attributes.len(), 2);
        assert_eq!(multi.attributes["load"], "full");
    }

    #[test]
    fn class_table_is_dense_and_order_free() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate(&tiny_specs(), &tiny_counts(), 0.1, 9, dir.path()).unwrap();
        let table = class_table(&manifest).unwrap();
        // 2 machines x 2 speeds.
        assert_eq!(table.len(), 4);
        let mut ids: Vec<usize> = table.values().copied().collect();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2, 3]);

        let mut shuffled = manifest.clone();
        shuffled.records.reverse();
        assert_eq!(class_table(&shuffled).unwrap(), table);

        for r in &manifest.records {
            if r.split == Split::Train {
                assert!(table.contains_key(&class_key(r)));
            }
        }

        let mut single = manifest.clone();
        single.records.retain(|r| {
            r.machine == "fan" && r.attributes.get("speed").map(String::as_str) == Some("low")
        });
        assert!(matches!(class_table(&single), Err(Error::SingleClass)));
    }

    #[test]
    fn domain_shift_matches_configured_noise_delta() {
        let mut specs = tiny_specs();
        specs.truncate(1);
        let counts =
            CorpusCounts { train_source: 1, train_target: 1, test_normal: 20, test_anomaly: 1 };
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate(&specs, &counts, 0.5, 21, dir.path()).unwrap();
        let mean_power = |domain: Domain| -> f64 {
            let mut total = 0.0;
            let mut count = 0usize;
            for r in &manifest.records {
                if r.split == Split::Test && r.label == Label::Normal && r.domain == domain {
                    let wav = read_wav::<f64>(&manifest.resolve(r)).unwrap();
                    total += wav.samples.iter().map(|s| s * s).sum::<f64>();
                    count += wav.samples.len();
                }
            }
            total / count as f64
        };
        let measured = mean_power(Domain::Target) - mean_power(Domain::Source);
        let configured = 0.06f64.powi(2) - 0.02f64.powi(2);
        assert!(
            (measured - configured).abs() < 0.1 * configured,
            "measured {measured}, configured {configured}"
        );
    }
}
