//! The three-stage training pipeline and its on-disk artifacts.
//!
//! A [`Workspace`] owns one output directory:
//!
//! ```text
//! data/                benchmark corpora and manifest (synth-data)
//! vocab.txt            subword vocabulary (train-vocab)
//! stage1/ stage2a/ stage2b/ stage3/
//!                      checkpoint.munm, audit.tsv
//! synthetic/round1/ synthetic/round2/
//!                      synthetic corpora, provenance sidecars, manifest
//! eval/                <stage>.tsv and <stage>.json BLEU reports
//! ```
//!
//! Every directory also gets `resolved_config.toml`, `artifact.json` (the
//! digests of its settings, vocabulary and input files) and
//! `run_meta.json`, the only file holding timestamps. A step whose
//! `artifact.json` digest matches the current settings and whose outputs
//! are complete is not recomputed.

pub mod checkpoint;
pub mod registry;
pub mod synthetic;
pub mod train;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use registry::Registry;
pub use synthetic::{generate_synthetic, write_synthetic, Provenance, SyntheticCorpus};
pub use train::{plan_sweep, schedule, AuditEntry, AuditLog, Objective, PlannedUpdate, Session, SweepReport};

use crate::config::ExperimentConfig;
use crate::corpus::{read_lines, Dataset, LangId, Manifest};
use crate::eval::{evaluate, Report, Translator};
use crate::model::{init_params, ModelParams};
use crate::rng::sub_seed;
use crate::synthlang::build_benchmark;
use crate::tokenizer::Vocab;
use crate::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Text translation with a model and vocabulary.
pub struct ModelTranslator<'a> {
    pub params: &'a ModelParams,
    pub vocab: &'a Vocab,
    pub batch: usize,
    pub max_positions: usize,
    pub max_pieces: usize,
}

impl<'a> ModelTranslator<'a> {
    pub fn new(params: &'a ModelParams, vocab: &'a Vocab, cfg: &ExperimentConfig) -> Self {
        Self {
            params,
            vocab,
            batch: cfg.eval.batch,
            max_positions: cfg.model.max_positions,
            max_pieces: cfg.vocab.max_pieces,
        }
    }
}

impl Translator for ModelTranslator<'_> {
    /// Empty sources translate to empty lines; longer sources are cut to
    /// fit the model's positions.
    fn translate(&self, srcs: &[String], _src_lang: LangId, tgt_lang: LangId) -> Result<Vec<String>> {
        let mut ids = Vec::with_capacity(srcs.len());
        let mut rows = Vec::new();
        for (i, s) in srcs.iter().enumerate() {
            if crate::tokenizer::normalize(s).is_empty() {
                continue;
            }
            let mut v = self.vocab.encode(s)?;
            v.truncate(self.max_positions - 1);
            ids.push(v);
            rows.push(i);
        }
        let refs: Vec<&[u32]> = ids.iter().map(Vec::as_slice).collect();
        let out = synthetic::translate_ids(self.params, &refs, tgt_lang, self.batch, self.max_positions)?;
        let mut text = vec![String::new(); srcs.len()];
        for (i, o) in rows.into_iter().zip(out) {
            if let Some(o) = o {
                text[i] = self.vocab.decode(&o)?;
            }
        }
        Ok(text)
    }
}

/// Stage-2 rounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Round {
    A,
    B,
}

impl Round {
    pub fn tag(self) -> &'static str {
        match self {
            Round::A => "2a",
            Round::B => "2b",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArtifactInfo {
    command: String,
    digest: String,
    config_digest: String,
    vocab_digest: Option<String>,
    inputs: BTreeMap<String, String>,
}

/// BLEU after each stage of a pipeline run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineReports {
    pub by_stage: BTreeMap<String, Report>,
}

impl PipelineReports {
    pub fn score(&self, stage: &str, direction: &str) -> Option<f64> {
        self.by_stage.get(stage).and_then(|r| r.score(direction))
    }
}

pub struct Workspace {
    pub root: PathBuf,
    pub cfg: ExperimentConfig,
    pub quiet: bool,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, cfg: ExperimentConfig) -> Self {
        Self {
            root: root.into(),
            cfg,
            quiet: true,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.cfg
            .data
            .manifest
            .clone()
            .unwrap_or_else(|| self.data_dir().join("manifest.toml"))
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.root.join(format!("stage{stage}"))
    }

    pub fn checkpoint_path(&self, stage: &str) -> PathBuf {
        self.stage_dir(stage).join("checkpoint.munm")
    }

    pub fn audit_path(&self, stage: &str) -> PathBuf {
        self.stage_dir(stage).join("audit.tsv")
    }

    pub fn synthetic_dir(&self, round: u8) -> PathBuf {
        self.root.join("synthetic").join(format!("round{round}"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    fn log(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    fn mkdir(dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }

    /// Writes the resolved config, artifact digests and run metadata.
    fn snapshot(
        &self,
        dir: &Path,
        command: &str,
        digest: &str,
        vocab: Option<&Vocab>,
        inputs: &[PathBuf],
    ) -> Result<()> {
        Self::mkdir(dir)?;
        write_atomic(&dir.join("resolved_config.toml"), self.cfg.to_toml().as_bytes())?;
        let mut hashed = BTreeMap::new();
        for p in inputs {
            let key = p
                .strip_prefix(&self.root)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/");
            hashed.insert(key, file_digest(p)?);
        }
        let info = ArtifactInfo {
            command: command.into(),
            digest: digest.into(),
            config_digest: self.cfg.digest(),
            vocab_digest: vocab.map(Vocab::digest),
            inputs: hashed,
        };
        let text = serde_json::to_string_pretty(&info).expect("serializes");
        write_atomic(&dir.join("artifact.json"), text.as_bytes())?;
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let meta = serde_json::json!({ "command": command, "finished_unix": now });
        write_atomic(&dir.join("run_meta.json"), meta.to_string().as_bytes())
    }

    fn artifact_digest(dir: &Path) -> Option<String> {
        let text = std::fs::read_to_string(dir.join("artifact.json")).ok()?;
        serde_json::from_str::<ArtifactInfo>(&text).ok().map(|a| a.digest)
    }

    fn benchmark_digest(&self) -> String {
        let json = serde_json::to_string(&self.cfg.benchmark).expect("serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Generates the toy benchmark into `data/`.
    pub fn synth_data(&self) -> Result<Manifest> {
        let dir = self.data_dir();
        let digest = self.benchmark_digest();
        let manifest_path = dir.join("manifest.toml");
        if Self::artifact_digest(&dir).as_deref() == Some(digest.as_str()) && manifest_path.exists() {
            self.log("synth-data: up to date");
            return Manifest::load(&manifest_path);
        }
        self.log("synth-data: generating benchmark");
        let m = build_benchmark(&self.cfg.benchmark, &dir)?;
        self.snapshot(&dir, "synth-data", &digest, None, &[])?;
        Ok(m)
    }

    pub fn load_manifest(&self) -> Result<Manifest> {
        Manifest::load(&self.manifest_path())
    }

    fn data_inputs(&self, m: &Manifest) -> Vec<PathBuf> {
        let mut v = vec![self.manifest_path()];
        for d in &m.datasets {
            if !self.cfg.data.exclude.contains(&d.id) {
                v.extend(d.paths.iter().cloned());
            }
        }
        v
    }

    /// Learns the subword vocabulary from every training corpus (both
    /// sides of parallel data included).
    pub fn train_vocab(&self) -> Result<Vocab> {
        let path = self.vocab_path();
        let digest = self.cfg.digest();
        if Self::artifact_digest(&self.root.join("vocab")).as_deref() == Some(digest.as_str()) && path.exists() {
            self.log("train-vocab: up to date");
            return Vocab::load(&path);
        }
        let m = self.load_manifest()?;
        let problems = self.cfg.manifest_problems(&m);
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let mut corpora = Vec::new();
        for d in &m.datasets {
            if self.cfg.data.exclude.contains(&d.id) {
                continue;
            }
            for p in &d.paths {
                corpora.push(read_lines(p)?);
            }
        }
        self.log("train-vocab: learning merges");
        let cap = (self.cfg.vocab.max_lines_per_corpus > 0).then_some(self.cfg.vocab.max_lines_per_corpus);
        let vocab = Vocab::train(&corpora, self.cfg.vocab.size, sub_seed(self.cfg.seed, "vocab"), cap)?;
        Self::mkdir(&self.root)?;
        vocab.save(&path)?;
        let inputs = self.data_inputs(&m);
        self.snapshot(&self.root.join("vocab"), "train-vocab", &digest, Some(&vocab), &inputs)?;
        Ok(vocab)
    }

    pub fn load_vocab(&self) -> Result<Vocab> {
        Vocab::load(&self.vocab_path())
    }

    /// Registry of the real data plus the synthetic rounds listed.
    pub fn registry(&self, vocab: &Vocab, synthetic_rounds: &[u8]) -> Result<Registry> {
        let m = self.load_manifest()?;
        let mut reg = Registry::build(&self.cfg, &m, vocab)?;
        for &r in synthetic_rounds {
            let path = self.synthetic_dir(r).join("manifest.toml");
            if !path.exists() {
                return Err(Error::Data(format!(
                    "synthetic round {r} is missing ({}); run synth-bt first",
                    path.display()
                )));
            }
            let sm = Manifest::load(&path)?;
            reg.add_manifest_datasets(&sm.datasets, vocab, self.cfg.vocab.max_pieces)?;
        }
        Ok(reg)
    }

    fn model_config(&self, vocab: &Vocab, reg: &Registry) -> crate::model::ModelConfig {
        self.cfg.model_config(vocab.len(), reg.languages.len())
    }

    /// Loads a finished stage checkpoint written for this vocabulary and
    /// configuration.
    pub fn finished_checkpoint(&self, stage: &str, vocab: &Vocab) -> Result<Checkpoint> {
        let path = self.checkpoint_path(stage);
        let c = Checkpoint::load(&path)?;
        c.check_digests(&vocab.digest(), &self.cfg.digest())?;
        if c.meta.stage != stage || !c.meta.is_complete() {
            return Err(Error::Checkpoint(format!(
                "{} holds stage {} at step {}/{}, not a finished stage {stage}",
                path.display(),
                c.meta.stage,
                c.meta.step,
                c.meta.planned_steps
            )));
        }
        Ok(c)
    }

    /// A resumable or finished checkpoint of this exact stage run, if any.
    fn existing(&self, stage: &str, vocab: &Vocab) -> Option<Checkpoint> {
        let c = Checkpoint::load(&self.checkpoint_path(stage)).ok()?;
        let ok = c.meta.stage == stage
            && c.meta.stage_digest == self.cfg.stage_digest(stage)
            && c.check_digests(&vocab.digest(), &self.cfg.digest()).is_ok()
            && c.optim.is_some()
            && self.audit_path(stage).exists();
        ok.then_some(c)
    }

    fn make_checkpoint(&self, stage: &str, s: &Session, planned: u64, vocab: &Vocab, reg: &Registry) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                stage: stage.into(),
                step: s.step,
                planned_steps: planned,
                vocab_digest: vocab.digest(),
                config_digest: self.cfg.digest(),
                stage_digest: self.cfg.stage_digest(stage),
                model: self.model_config(vocab, reg),
                languages: reg.manifest.languages.clone(),
                optimizer: Some(s.optim.kind),
                optimizer_step: s.optim.step,
            },
            params: s.params.clone(),
            optim: Some(s.optim.clone()),
        }
    }

    /// Runs (or resumes) a random-dataset stage over `pool`.
    fn random_stage(
        &self,
        stage: &str,
        start: ModelParams,
        pool: &[Dataset],
        reg: &Registry,
        vocab: &Vocab,
        steps: u64,
        warmup: usize,
        inputs: &[PathBuf],
    ) -> Result<Checkpoint> {
        let s1 = &self.cfg.stage1;
        let mut session = Session::new(&self.cfg, reg, start, s1.optimizer, s1.weight_decay);
        session.quiet = self.quiet;
        if let Some(c) = self.existing(stage, vocab) {
            if c.meta.planned_steps == steps && c.meta.step <= steps {
                if c.meta.is_complete() {
                    self.log(&format!("stage {stage}: up to date"));
                    return Ok(c);
                }
                self.log(&format!("stage {stage}: resuming at step {}", c.meta.step));
                let mut audit = AuditLog::load(&self.audit_path(stage))?;
                audit.truncate_to(c.meta.step);
                session.params = c.params;
                session.optim = c.optim.expect("checked in existing()");
                session.step = c.meta.step;
                session.audit = audit;
            }
        }
        let sched = schedule(s1.lr_peak, warmup, steps as usize);
        let dir = self.stage_dir(stage);
        Self::mkdir(&dir)?;
        let mut save = |s: &Session| -> Result<()> {
            self.make_checkpoint(stage, s, steps, vocab, reg)
                .save(&self.checkpoint_path(stage))?;
            s.audit.save(&self.audit_path(stage))
        };
        session.run_random(stage, pool, steps, &sched, s1.checkpoint_interval as u64, &mut save)?;
        save(&session)?;
        let ckpt = self.make_checkpoint(stage, &session, steps, vocab, reg);
        self.snapshot(
            &dir,
            &format!("stage{stage}"),
            &self.cfg.stage_digest(stage),
            Some(vocab),
            inputs,
        )?;
        Ok(ckpt)
    }

    /// Stage 1: masked-segment reconstruction on monolingual data and
    /// cross-entropy on real parallel data.
    pub fn stage1(&self) -> Result<Checkpoint> {
        let vocab = self.load_vocab()?;
        let reg = self.registry(&vocab, &[])?;
        let cfg = self.model_config(&vocab, &reg);
        let init = init_params(&cfg, sub_seed(self.cfg.seed, "init"))?;
        let mut inputs = vec![self.vocab_path()];
        inputs.extend(self.data_inputs(&reg.manifest));
        self.random_stage(
            "1",
            init,
            &reg.datasets,
            &reg,
            &vocab,
            self.cfg.stage1.steps as u64,
            self.cfg.stage1.warmup_steps,
            &inputs,
        )
    }

    /// Offline back-translation for `round` (1 from the stage-1 model, 2
    /// from the stage-2a model).
    pub fn synth_bt(&self, round: u8) -> Result<Manifest> {
        let source_stage = match round {
            1 => "1",
            2 => "2a",
            _ => return Err(Error::config(format!("synthetic round must be 1 or 2, got {round}"))),
        };
        let vocab = self.load_vocab()?;
        let dir = self.synthetic_dir(round);
        let digest = format!("{}/round{round}", self.cfg.stage_digest(source_stage));
        let ckpt_path = self.checkpoint_path(source_stage);
        if Self::artifact_digest(&dir).as_deref() == Some(digest.as_str()) && dir.join("manifest.toml").exists() {
            self.log(&format!("synth-bt round {round}: up to date"));
            return Manifest::load(&dir.join("manifest.toml"));
        }
        let ckpt = self.finished_checkpoint(source_stage, &vocab)?;
        let reg = self.registry(&vocab, &[])?;
        self.log(&format!("synth-bt round {round}: decoding"));
        let corpora = generate_synthetic(&ckpt.params, &vocab, &self.cfg, &reg, round)?;
        let m = write_synthetic(&dir, &reg, &corpora)?;
        self.snapshot(
            &dir,
            &format!("synth-bt round {round}"),
            &digest,
            Some(&vocab),
            &[ckpt_path],
        )?;
        Ok(m)
    }

    fn stage2_rounds(&self, round: Round) -> Vec<u8> {
        if !self.cfg.stage2.use_synthetic {
            return Vec::new();
        }
        match round {
            Round::A => vec![1],
            Round::B if self.cfg.stage2.keep_round1 => vec![1, 2],
            Round::B => vec![2],
        }
    }

    /// Stage 2: stage-1 training repeated on real plus synthetic data.
    pub fn stage2(&self, round: Round) -> Result<Checkpoint> {
        let vocab = self.load_vocab()?;
        let rounds = self.stage2_rounds(round);
        let reg = self.registry(&vocab, &rounds)?;
        let prev = match round {
            Round::A => "1",
            Round::B => "2a",
        };
        let start = self.finished_checkpoint(prev, &vocab)?;
        let (a, b) = self.cfg.stage2_steps();
        let steps = match round {
            Round::A => a,
            Round::B => b,
        };
        let mut inputs = vec![self.vocab_path(), self.checkpoint_path(prev)];
        for r in &rounds {
            inputs.push(self.synthetic_dir(*r).join("manifest.toml"));
        }
        self.random_stage(
            round.tag(),
            start.params,
            &reg.datasets,
            &reg,
            &vocab,
            steps as u64,
            self.cfg.stage2.warmup_steps,
            &inputs,
        )
    }

    fn stage3_rounds(&self) -> Vec<u8> {
        if !self.cfg.stage3.use_synthetic {
            return Vec::new();
        }
        if self.cfg.stage2.keep_round1 {
            vec![1, 2]
        } else {
            vec![2]
        }
    }

    /// Stage 3: sweeps of back-translation, cross-translation and
    /// synthetic cross-entropy.
    pub fn stage3(&self) -> Result<(Checkpoint, SweepReport)> {
        let vocab = self.load_vocab()?;
        let rounds = self.stage3_rounds();
        let reg = self.registry(&vocab, &rounds)?;
        let start = self.finished_checkpoint("2b", &vocab)?;
        let planned = (self.cfg.stage3.sweeps * plan_sweep(&reg, &self.cfg).len()) as u64;
        if let Some(c) = self.existing("3", &vocab) {
            if c.meta.is_complete() && c.meta.planned_steps == planned {
                self.log("stage 3: up to date");
                return Ok((c, SweepReport::default()));
            }
        }
        let s3 = &self.cfg.stage3;
        let mut session = Session::new(&self.cfg, &reg, start.params, s3.optimizer, s3.weight_decay);
        session.quiet = self.quiet;
        let dev = if s3.patience > 0 {
            reg.testsets("dev", &reg.directions(&self.cfg)?)?
        } else {
            Vec::new()
        };
        let report = session.run_sweeps(&vocab, &dev, self.cfg.eval.mode)?;
        // An early stop still counts as a finished stage.
        let mut ckpt = self.make_checkpoint("3", &session, planned, &vocab, &reg);
        ckpt.meta.step = ckpt.meta.step.max(planned);
        let dir = self.stage_dir("3");
        Self::mkdir(&dir)?;
        ckpt.save(&self.checkpoint_path("3"))?;
        session.audit.save(&self.audit_path("3"))?;
        let mut inputs = vec![self.vocab_path(), self.checkpoint_path("2b")];
        for r in &rounds {
            inputs.push(self.synthetic_dir(*r).join("manifest.toml"));
        }
        self.snapshot(&dir, "stage3", &self.cfg.stage_digest("3"), Some(&vocab), &inputs)?;
        Ok((ckpt, report))
    }

    /// Scores a checkpoint on the configured split and directions and
    /// writes `eval/<stem>.tsv` and `.json`.
    pub fn evaluate(&self, checkpoint: &Path, stem: &str) -> Result<Report> {
        let vocab = self.load_vocab()?;
        let ckpt = Checkpoint::load(checkpoint)?;
        ckpt.check_digests(&vocab.digest(), &self.cfg.digest())?;
        let m = self.load_manifest()?;
        let reg = Registry::languages_only(&self.cfg, &m)?;
        let sets = reg.testsets(&self.cfg.eval.split, &reg.directions(&self.cfg)?)?;
        let translator = ModelTranslator::new(&ckpt.params, &vocab, &self.cfg);
        let report = evaluate(&translator, &sets, self.cfg.eval.mode)?;
        let dir = self.eval_dir();
        Self::mkdir(&dir)?;
        report.write(&dir, stem)?;
        Ok(report)
    }

    /// Every step in order, with an evaluation after each stage.
    pub fn pipeline(&self) -> Result<PipelineReports> {
        let mut out = PipelineReports::default();
        if self.cfg.data.manifest.is_none() {
            self.synth_data()?;
        }
        self.train_vocab()?;
        let eval = |stage: &str, out: &mut PipelineReports| -> Result<()> {
            let r = self.evaluate(&self.checkpoint_path(stage), &format!("stage{stage}"))?;
            out.by_stage.insert(stage.to_string(), r);
            Ok(())
        };
        self.stage1()?;
        eval("1", &mut out)?;
        let synthetic = self.cfg.stage2.use_synthetic || self.cfg.stage3.use_synthetic;
        if synthetic {
            self.synth_bt(1)?;
        }
        self.stage2(Round::A)?;
        eval("2a", &mut out)?;
        if synthetic {
            self.synth_bt(2)?;
        }
        self.stage2(Round::B)?;
        eval("2b", &mut out)?;
        self.stage3()?;
        eval("3", &mut out)?;
        let final_report = out.by_stage["3"].clone();
        final_report.write(&self.eval_dir(), "report")?;
        Ok(out)
    }

    /// Copies finished artifacts of another workspace. Copies whose digests
    /// match this workspace's settings are reused instead of recomputed.
    pub fn adopt(&self, other: &Path) -> Result<()> {
        for name in ["data", "vocab", "stage1", "synthetic/round1", "stage2a"] {
            let src = other.join(name);
            if src.join("artifact.json").exists() {
                copy_dir(&src, &self.root.join(name))?;
            }
        }
        let v = other.join("vocab.txt");
        if v.exists() {
            Self::mkdir(&self.root)?;
            std::fs::copy(&v, self.vocab_path()).map_err(|e| Error::io(&v, e))?;
        }
        Ok(())
    }
}

fn copy_dir(src: &Path, dst: &Path) -> Result<()> {
    std::fs::create_dir_all(dst).map_err(|e| Error::io(dst, e))?;
    for entry in std::fs::read_dir(src).map_err(|e| Error::io(src, e))? {
        let entry = entry.map_err(|e| Error::io(src, e))?;
        let from = entry.path();
        let to = dst.join(entry.file_name());
        if from.is_dir() {
            copy_dir(&from, &to)?;
        } else {
            std::fs::copy(&from, &to).map_err(|e| Error::io(&from, e))?;
        }
    }
    Ok(())
}

/// Named ablation arms, expressed as overrides of a base configuration.
pub const ARMS: [&str; 5] = ["no-synthetic", "single-aux", "bt-only", "mono-budget", "noisy-mono"];

/// The configuration of ablation `arm`:
/// `no-synthetic` trains stages 2 and 3 without synthetic data;
/// `single-aux` keeps only the real parallel data of pivot languages;
/// `bt-only` drops cross-translation from stage 3;
/// `mono-budget` cuts every monolingual corpus to a quarter;
/// `noisy-mono` applies 10% word dropout to non-English monolingual text.
pub fn ablation_config(base: &ExperimentConfig, arm: &str, manifest: &Manifest) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match arm {
        "no-synthetic" => {
            cfg.stage2.use_synthetic = false;
            cfg.stage3.use_synthetic = false;
        }
        "single-aux" => {
            let pivots: Vec<&String> = cfg.pivots.values().flatten().collect();
            for d in &manifest.datasets {
                let real_parallel = d.kind == crate::corpus::ManifestKind::Parallel && !d.synthetic;
                if real_parallel && !d.langs.iter().any(|l| pivots.contains(&l)) && !cfg.data.exclude.contains(&d.id) {
                    cfg.data.exclude.push(d.id.clone());
                }
            }
        }
        "bt-only" => cfg.stage3.cross_translation = false,
        "mono-budget" => cfg.benchmark.mono_lines = (cfg.benchmark.mono_lines / 4).max(1),
        "noisy-mono" => cfg.benchmark.word_dropout = 0.1,
        other => {
            return Err(Error::config(format!(
                "unknown ablation arm {other:?}; expected one of {}",
                ARMS.join(", ")
            )))
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
