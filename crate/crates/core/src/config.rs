//! Experiment configuration: TOML file, dotted-key overrides, and
//! validation that reports every violation at once.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Manifest, ManifestKind, SamplingPolicy};
use crate::eval::BleuMode;
use crate::model::ModelConfig;
use crate::synthlang::BenchmarkConfig;
use crate::tensor::{AdamConfig, OptimKind};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSettings {
    pub size: usize,
    /// Lines sampled per corpus when learning merges; 0 uses everything.
    pub max_lines_per_corpus: usize,
    /// Training items longer than this many pieces are dropped.
    pub max_pieces: usize,
}

impl Default for VocabSettings {
    fn default() -> Self {
        Self {
            size: 800,
            max_lines_per_corpus: 0,
            max_pieces: 88,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    pub max_positions: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            layers: m.layers,
            hidden: m.hidden,
            ffn: m.ffn,
            heads: m.heads,
            max_positions: m.max_positions,
        }
    }
}

/// Settings shared by the Algorithm-1 style stages (1, 2a, 2b).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Settings {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimKind,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_interval: usize,
}

impl Default for Stage1Settings {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            optimizer: OptimKind::Adam,
            lr_peak: 0.001,
            warmup_steps: 500,
            weight_decay: 0.01,
            checkpoint_interval: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Settings {
    /// Steps of round a; 0 means the stage-1 step count.
    pub steps_a: usize,
    /// Round b runs this fraction of round a's steps.
    pub round2_step_fraction: f64,
    /// Warmup of each round's schedule; the peak is the stage-1 peak.
    pub warmup_steps: usize,
    /// When false, both rounds train on real data only.
    pub use_synthetic: bool,
    /// Keep round-1 synthetic data in the round-b pool.
    pub keep_round1: bool,
}

impl Default for Stage2Settings {
    fn default() -> Self {
        Self {
            steps_a: 0,
            round2_step_fraction: 0.2,
            warmup_steps: 100,
            use_synthetic: true,
            keep_round1: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSettings {
    pub round1_mono_fraction: f64,
    pub round2_multiplier: f64,
    pub english_lines_per_target: usize,
    pub decode_batch: usize,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        Self {
            round1_mono_fraction: 0.10,
            round2_multiplier: 2.0,
            english_lines_per_target: 1000,
            decode_batch: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage3Settings {
    pub sweeps: usize,
    pub max_tokens: usize,
    pub bucket_width: usize,
    pub optimizer: OptimKind,
    /// Peak learning rate relative to the stage-1 peak.
    pub lr_factor: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub use_synthetic: bool,
    pub cross_translation: bool,
    /// Stop after this many sweeps without dev BLEU improvement; 0 disables.
    pub patience: usize,
}

impl Default for Stage3Settings {
    fn default() -> Self {
        Self {
            sweeps: 20,
            max_tokens: 2000,
            bucket_width: 8,
            optimizer: OptimKind::Adamax,
            lr_factor: 0.05,
            warmup_steps: 10,
            weight_decay: 0.01,
            use_synthetic: true,
            cross_translation: true,
            patience: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub mode: BleuMode,
    pub split: String,
    /// `Src-Tgt` labels; empty means every target paired with English in
    /// both directions.
    pub directions: Vec<String>,
    pub batch: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            mode: BleuMode::Pretokenized,
            split: "test".into(),
            directions: Vec::new(),
            batch: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSettings {
    /// Manifest to train from; unset means the benchmark written by
    /// `synth-data` under the output directory.
    pub manifest: Option<PathBuf>,
    /// Dataset ids removed from the manifest before training.
    pub exclude: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub english: String,
    pub targets: Vec<String>,
    /// Auxiliary languages per target, used for back-translation of target
    /// monolingual data and cross-translation of auxiliary parallel data.
    pub pivots: BTreeMap<String, Vec<String>>,
    pub data: DataSettings,
    pub benchmark: BenchmarkConfig,
    pub vocab: VocabSettings,
    pub model: ModelSettings,
    pub sampling: SamplingPolicy,
    pub adam: AdamSettings,
    pub stage1: Stage1Settings,
    pub stage2: Stage2Settings,
    pub synthetic: SyntheticSettings,
    pub stage3: Stage3Settings,
    pub eval: EvalSettings,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl From<AdamSettings> for AdamConfig {
    fn from(a: AdamSettings) -> Self {
        AdamConfig {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            english: "En".into(),
            targets: vec!["X1".into()],
            pivots: BTreeMap::from([("X1".to_string(), vec!["A1".to_string()])]),
            data: DataSettings::default(),
            benchmark: BenchmarkConfig::default(),
            vocab: VocabSettings::default(),
            model: ModelSettings::default(),
            sampling: SamplingPolicy::default(),
            adam: AdamSettings::default(),
            stage1: Stage1Settings::default(),
            stage2: Stage2Settings::default(),
            synthetic: SyntheticSettings::default(),
            stage3: Stage3Settings::default(),
            eval: EvalSettings::default(),
        }
    }
}

/// Parses `K=V`; `V` is read as a TOML value, falling back to a bare string.
fn parse_override(kv: &str) -> Result<(Vec<String>, toml::Value)> {
    let Some((k, v)) = kv.split_once('=') else {
        return Err(Error::config(format!("override {kv:?} is not KEY=VALUE")));
    };
    let path: Vec<String> = k.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::config(format!("override key {k:?} has an empty segment")));
    }
    let v = v.trim();
    let value = toml::from_str::<toml::Table>(&format!("x = {v}"))
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((path, value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override path {} crosses a non-table at {p}", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, applies dotted overrides, and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse error: {}", e.message())))?;
        let mut problems = Vec::new();
        for o in overrides {
            match parse_override(o).and_then(|(p, v)| set_path(&mut table, &p, v)) {
                Ok(()) => {}
                Err(Error::Config(p)) => problems.extend(p),
                Err(e) => return Err(e),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("config error: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file. A relative `data.manifest` resolves against the
    /// file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                cfg.data.manifest = Some(path.parent().unwrap_or(Path::new(".")).join(m));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every violation of the self-contained checks.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.targets.is_empty() {
            out.push("targets must name at least one language".into());
        }
        if self.targets.contains(&self.english) {
            out.push(format!("English ({}) cannot be a target", self.english));
        }
        for (t, auxes) in &self.pivots {
            if !self.targets.contains(t) {
                out.push(format!("pivots.{t}: {t} is not a target language"));
            }
            for a in auxes {
                if a == &self.english || self.targets.contains(a) {
                    out.push(format!("pivots.{t}: {a} must be an auxiliary language"));
                }
            }
        }
        if self.vocab.size <= 5 {
            out.push("vocab.size must exceed the 5 special pieces".into());
        }
        if self.vocab.max_pieces == 0 {
            out.push("vocab.max_pieces must be >= 1".into());
        }
        if self.vocab.max_pieces + 2 > self.model.max_positions {
            out.push(format!(
                "model.max_positions ({}) must be at least vocab.max_pieces + 2 ({})",
                self.model.max_positions,
                self.vocab.max_pieces + 2
            ));
        }
        let model = self.model_config(self.vocab.size.max(6), 2);
        out.extend(model.problems());
        out.extend(self.sampling.problems().into_iter().map(|p| format!("sampling.{p}")));
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            out.push("adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        let s1 = &self.stage1;
        if s1.batch_size == 0 {
            out.push("stage1.batch_size must be >= 1".into());
        }
        if !(s1.lr_peak > 0.0) {
            out.push("stage1.lr_peak must be > 0".into());
        }
        if !(s1.weight_decay >= 0.0) {
            out.push("stage1.weight_decay must be >= 0".into());
        }
        let s2 = &self.stage2;
        if !(s2.round2_step_fraction > 0.0 && s2.round2_step_fraction <= 1.0) {
            out.push("stage2.round2_step_fraction must lie in (0, 1]".into());
        }
        let sy = &self.synthetic;
        if !(sy.round1_mono_fraction > 0.0 && sy.round1_mono_fraction < 1.0) {
            out.push("synthetic.round1_mono_fraction must lie in (0, 1)".into());
        }
        if !(sy.round2_multiplier > 0.0) {
            out.push("synthetic.round2_multiplier must be > 0".into());
        }
        if sy.round1_mono_fraction * (1.0 + sy.round2_multiplier) > 1.0 {
            out.push("synthetic rounds together need more than all target monolingual data".into());
        }
        if sy.decode_batch == 0 {
            out.push("synthetic.decode_batch must be >= 1".into());
        }
        let s3 = &self.stage3;
        if s3.max_tokens < self.vocab.max_pieces + 1 {
            out.push("stage3.max_tokens must fit one maximal item".into());
        }
        if s3.bucket_width == 0 {
            out.push("stage3.bucket_width must be >= 1".into());
        }
        if !(s3.lr_factor > 0.0) {
            out.push("stage3.lr_factor must be > 0".into());
        }
        if !(s3.weight_decay >= 0.0) {
            out.push("stage3.weight_decay must be >= 0".into());
        }
        if !matches!(self.eval.split.as_str(), "dev" | "test") {
            out.push(format!("eval.split must be dev or test, got {:?}", self.eval.split));
        }
        if self.eval.batch == 0 {
            out.push("eval.batch must be >= 1".into());
        }
        for d in &self.eval.directions {
            if d.split_once('-').is_none() {
                out.push(format!("eval direction {d:?} is not Src-Tgt"));
            }
        }
        out.extend(self.benchmark.problems().into_iter().map(|p| format!("benchmark: {p}")));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Checks against a manifest: languages exist, pivots have real
    /// parallel data with English, targets have none.
    pub fn manifest_problems(&self, m: &Manifest) -> Vec<String> {
        let mut out = m.problems();
        let real_parallel = |a: &str, b: &str| {
            m.datasets.iter().any(|d| {
                d.kind == ManifestKind::Parallel
                    && !d.synthetic
                    && !self.data.exclude.contains(&d.id)
                    && d.langs.iter().any(|l| l == a)
                    && d.langs.iter().any(|l| l == b)
            })
        };
        for l in std::iter::once(&self.english).chain(&self.targets) {
            if !m.languages.contains(l) {
                out.push(format!("language {l} is not in the manifest"));
            }
        }
        for (t, auxes) in &self.pivots {
            for a in auxes {
                if !m.languages.contains(a) {
                    out.push(format!("pivot {a} of {t} is not in the manifest"));
                } else if !real_parallel(a, &self.english) {
                    out.push(format!(
                        "pivot {a} of {t} has no real parallel data with {}",
                        self.english
                    ));
                }
            }
        }
        for d in &m.datasets {
            if d.kind == ManifestKind::Parallel && !d.synthetic && d.langs.iter().any(|l| self.targets.contains(l)) {
                out.push(format!("dataset {} gives target language parallel data", d.id));
            }
            if d.synthetic {
                out.push(format!(
                    "manifest dataset {} is synthetic; synthetic data comes from synth-bt",
                    d.id
                ));
            }
        }
        for x in &self.data.exclude {
            if !m.datasets.iter().any(|d| &d.id == x) {
                out.push(format!("data.exclude names unknown dataset {x}"));
            }
        }
        out
    }

    pub fn model_config(&self, vocab_size: usize, num_languages: usize) -> ModelConfig {
        ModelConfig {
            layers: self.model.layers,
            hidden: self.model.hidden,
            ffn: self.model.ffn,
            heads: self.model.heads,
            vocab_size,
            num_languages,
            max_positions: self.model.max_positions,
        }
    }

    /// Step counts of stage-2 rounds a and b.
    pub fn stage2_steps(&self) -> (usize, usize) {
        let a = if self.stage2.steps_a == 0 {
            self.stage1.steps
        } else {
            self.stage2.steps_a
        };
        let b = (a as f64 * self.stage2.round2_step_fraction).round() as usize;
        (a, b)
    }

    /// Digest of the settings a checkpoint depends on: seed, languages,
    /// data selection, vocabulary and architecture. Stage hyperparameters
    /// are excluded so ablation arms can branch from shared checkpoints.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Identity<'a> {
            seed: u64,
            english: &'a str,
            targets: &'a [String],
            pivots: &'a BTreeMap<String, Vec<String>>,
            exclude: &'a [String],
            benchmark: &'a BenchmarkConfig,
            vocab: &'a VocabSettings,
            model: &'a ModelSettings,
        }
        let id = Identity {
            seed: self.seed,
            english: &self.english,
            targets: &self.targets,
            pivots: &self.pivots,
            exclude: &self.data.exclude,
            benchmark: &self.benchmark,
            vocab: &self.vocab,
            model: &self.model,
        };
        let json = serde_json::to_string(&id).expect("serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Digest of everything that determines the output of `stage`
    /// (`1`, `2a`, `2b` or `3`) given the earlier stages.
    pub fn stage_digest(&self, stage: &str) -> String {
        let mut parts = vec![
            self.digest(),
            json(&self.sampling),
            json(&self.adam),
            json(&self.stage1),
        ];
        if stage != "1" {
            parts.push(json(&self.stage2));
            parts.push(json(&self.synthetic));
        }
        if stage == "3" {
            parts.push(json(&self.stage3));
            parts.push(json(&self.eval));
        }
        parts.push(stage.to_string());
        hex::encode(Sha256::digest(parts.join("\n").as_bytes()))
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializes")
}
