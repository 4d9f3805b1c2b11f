//! Training loops: the random-dataset loop of stages 1 and 2, and the
//! dataset sweep of stage 3. Every loss term is recorded in an audit log.

use std::path::Path;

use crate::config::ExperimentConfig;
use crate::corpus::{bucket_batches, choose_dataset, draw_batch, Batch, Dataset, DatasetKind, LangId};
use crate::eval::{evaluate, BleuMode, TestSet};
use crate::model::ModelParams;
use crate::objectives::{back_translation_loss, cross_entropy_loss, cross_translation_loss, mass_loss, DecodedLoss};
use crate::rng::stream;
use crate::tensor::{grad_norm, AdamConfig, Graph, LrSchedule, OptimKind, OptimState, Var};
use crate::tokenizer::Vocab;
use crate::{Error, Result};

use super::registry::Registry;
use super::{write_atomic, ModelTranslator};

/// One loss term of one update.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditEntry {
    pub step: u64,
    pub dataset: String,
    /// `mass`, `ce`, `bt` or `ct`.
    pub objective: String,
    pub src_lang: String,
    pub tgt_lang: String,
    /// `None` when every row of the batch decoded to nothing and the update
    /// was skipped.
    pub loss: Option<f64>,
}

pub const AUDIT_HEADER: &str = "step\tdataset\tobjective\tsrc_lang\ttgt_lang\tloss";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditLog {
    pub entries: Vec<AuditEntry>,
}

impl AuditLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(AUDIT_HEADER);
        s.push('\n');
        for e in &self.entries {
            let loss = e.loss.map_or_else(|| "skipped".to_string(), |l| l.to_string());
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{loss}\n",
                e.step, e.dataset, e.objective, e.src_lang, e.tgt_lang
            ));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(AUDIT_HEADER) {
            return Err(Error::Data("audit log lacks its header".into()));
        }
        let entries = lines
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                let bad = || Error::Data(format!("malformed audit line {l:?}"));
                if f.len() != 6 {
                    return Err(bad());
                }
                Ok(AuditEntry {
                    step: f[0].parse().map_err(|_| bad())?,
                    dataset: f[1].into(),
                    objective: f[2].into(),
                    src_lang: f[3].into(),
                    tgt_lang: f[4].into(),
                    loss: match f[5] {
                        "skipped" => None,
                        v => Some(v.parse().map_err(|_| bad())?),
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }

    /// Drops entries after `step`.
    pub fn truncate_to(&mut self, step: u64) {
        self.entries.retain(|e| e.step <= step);
    }
}

/// Linear warmup and decay over `total` updates. Warmup is shortened when
/// the run is too short for it.
pub fn schedule(peak: f64, warmup: usize, total: usize) -> LrSchedule {
    let total = total.max(2) as u64;
    LrSchedule {
        peak,
        warmup_steps: (warmup as u64).clamp(1, total - 1),
        total_steps: total,
    }
}

/// Mutable training state shared by all stages.
pub struct Session<'a> {
    pub cfg: &'a ExperimentConfig,
    pub reg: &'a Registry,
    pub params: ModelParams,
    pub optim: OptimState,
    pub audit: AuditLog,
    /// Updates completed in the current stage.
    pub step: u64,
    pub weight_decay: f64,
    pub quiet: bool,
}

struct Term {
    objective: &'static str,
    src: LangId,
    tgt: LangId,
    loss: Option<Var>,
}

impl<'a> Session<'a> {
    pub fn new(
        cfg: &'a ExperimentConfig,
        reg: &'a Registry,
        params: ModelParams,
        kind: OptimKind,
        weight_decay: f64,
    ) -> Self {
        let optim = OptimState::new(kind, params.tensors());
        Self {
            cfg,
            reg,
            params,
            optim,
            audit: AuditLog::default(),
            step: 0,
            weight_decay,
            quiet: true,
        }
    }

    fn adam(&self) -> AdamConfig {
        self.cfg.adam.into()
    }

    /// Applies one update from the summed `terms` and records each term.
    fn update(&mut self, g: Graph, terms: Vec<Term>, dataset: &str, lr: f64, stage: &str) -> Result<()> {
        self.step += 1;
        let mut total: Option<Var> = None;
        let mut g = g;
        for t in &terms {
            let Some(l) = t.loss else { continue };
            let v = g.value(l).item() as f64;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "stage {stage} step {} dataset {dataset}: {} loss {}->{} is {v}",
                    self.step,
                    t.objective,
                    self.reg.lang_name(t.src),
                    self.reg.lang_name(t.tgt)
                )));
            }
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        for t in &terms {
            self.audit.entries.push(AuditEntry {
                step: self.step,
                dataset: dataset.to_string(),
                objective: t.objective.to_string(),
                src_lang: self.reg.lang_name(t.src).to_string(),
                tgt_lang: self.reg.lang_name(t.tgt).to_string(),
                loss: t.loss.map(|l| g.value(l).item() as f64),
            });
        }
        let Some(total) = total else { return Ok(()) };
        let grads = g.backward(total)?;
        let norm = grad_norm(grads.params().values());
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "stage {stage} step {} dataset {dataset}: gradient norm is {norm}",
                self.step
            )));
        }
        let hyper = self.adam();
        self.optim.step(
            self.params.tensors_mut(),
            grads.params().iter().map(|(&k, v)| (k, v)),
            lr,
            self.weight_decay,
            &hyper,
        )
    }

    /// Random-dataset loop over `pool` until `steps` updates are done.
    /// Each update draws its randomness from a stream named after the stage
    /// and step, so a resumed run sees exactly the draws of an
    /// uninterrupted one. `on_checkpoint` runs every `interval` updates
    /// (0 disables).
    pub fn run_random(
        &mut self,
        stage: &str,
        pool: &[Dataset],
        steps: u64,
        sched: &LrSchedule,
        interval: u64,
        on_checkpoint: &mut dyn FnMut(&Session) -> Result<()>,
    ) -> Result<()> {
        let bs = self.cfg.stage1.batch_size;
        let policy = self.cfg.sampling;
        while self.step < steps {
            let next = self.step + 1;
            let mut rng = stream(self.cfg.seed, &format!("stage{stage}/step/{next}"));
            let di = choose_dataset(pool, &policy, &mut rng)?;
            let ds = &pool[di];
            let batch = draw_batch(ds, bs, &mut rng)?;
            let mut g = Graph::new();
            let terms = match (batch, ds.kind) {
                (Batch::Mono(xs), DatasetKind::Mono { lang }) => {
                    let l = mass_loss(&self.params, &mut g, &xs, lang, &mut rng)?;
                    vec![Term {
                        objective: "mass",
                        src: lang,
                        tgt: lang,
                        loss: Some(l),
                    }]
                }
                (Batch::Parallel(pairs), DatasetKind::Parallel { src, tgt, .. }) => {
                    let (xs, zs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
                    let fwd = cross_entropy_loss(&self.params, &mut g, &xs, &zs, tgt)?;
                    let back = cross_entropy_loss(&self.params, &mut g, &zs, &xs, src)?;
                    vec![
                        Term {
                            objective: "ce",
                            src,
                            tgt,
                            loss: Some(fwd),
                        },
                        Term {
                            objective: "ce",
                            src: tgt,
                            tgt: src,
                            loss: Some(back),
                        },
                    ]
                }
                _ => unreachable!("batch shape follows dataset kind"),
            };
            let id = ds.id.clone();
            self.update(g, terms, &id, sched.lr_at(next), stage)?;
            if !self.quiet && (self.step % 500 == 0 || self.step == steps) {
                eprintln!("stage {stage} step {}/{steps}", self.step);
            }
            if interval > 0 && self.step % interval == 0 && self.step < steps {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }
}

/// What one stage-3 update does with its dataset's batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Objective {
    /// Back-translate through `via` and score reconstruction.
    Bt { via: LangId },
    /// Translate the first side into `via` and score producing the second.
    Ct { via: LangId },
    /// Teacher-forced cross-entropy from the first side to the second.
    Ce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PlannedUpdate {
    pub dataset: usize,
    pub objective: Objective,
}

/// The updates of one stage-3 sweep, in order:
/// English monolingual data is back-translated through every target;
/// target monolingual data through each of its auxiliaries and English;
/// real parallel data is cross-translated through every target that lists
/// one of its languages as an auxiliary; synthetic parallel data gets
/// plain cross-entropy. Auxiliary monolingual data is not swept.
pub fn plan_sweep(reg: &Registry, cfg: &ExperimentConfig) -> Vec<PlannedUpdate> {
    let en = reg.english();
    let targets = reg.targets();
    let mut out = Vec::new();
    for (i, d) in reg.datasets.iter().enumerate() {
        match d.kind {
            DatasetKind::Mono { lang } if lang == en => {
                for &t in &targets {
                    out.push(PlannedUpdate {
                        dataset: i,
                        objective: Objective::Bt { via: t },
                    });
                }
            }
            DatasetKind::Mono { lang } if targets.contains(&lang) => {
                let mut vias = reg.pivots.get(&lang).cloned().unwrap_or_default();
                vias.push(en);
                for via in vias {
                    out.push(PlannedUpdate {
                        dataset: i,
                        objective: Objective::Bt { via },
                    });
                }
            }
            DatasetKind::Mono { .. } => {}
            DatasetKind::Parallel {
                src,
                tgt,
                synthetic: false,
            } => {
                if !cfg.stage3.cross_translation {
                    continue;
                }
                for &t in &targets {
                    let linked = reg
                        .pivots
                        .get(&t)
                        .is_some_and(|auxes| auxes.contains(&src) || auxes.contains(&tgt));
                    if linked && t != src && t != tgt {
                        out.push(PlannedUpdate {
                            dataset: i,
                            objective: Objective::Ct { via: t },
                        });
                    }
                }
            }
            DatasetKind::Parallel { synthetic: true, .. } => {
                if cfg.stage3.use_synthetic {
                    out.push(PlannedUpdate {
                        dataset: i,
                        objective: Objective::Ce,
                    });
                }
            }
        }
    }
    out
}

/// Outcome of stage 3.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepReport {
    pub sweeps_run: usize,
    pub skipped_rows: usize,
    /// Mean dev BLEU after each sweep when early stopping is enabled.
    pub dev_scores: Vec<f64>,
}

impl<'a> Session<'a> {
    /// Runs up to `cfg.stage3.sweeps` sweeps of [`plan_sweep`]. Each planned
    /// update takes one token-bucketed batch of its dataset, chosen at
    /// random per sweep. With `patience` set, dev BLEU is measured after
    /// each sweep and the best parameters are kept.
    pub fn run_sweeps(&mut self, vocab: &Vocab, dev: &[TestSet], mode: BleuMode) -> Result<SweepReport> {
        let s3 = &self.cfg.stage3;
        let plan = plan_sweep(self.reg, self.cfg);
        let mut buckets: Vec<Option<Vec<Vec<usize>>>> = vec![None; self.reg.datasets.len()];
        for u in &plan {
            if buckets[u.dataset].is_none() {
                let b = bucket_batches(&self.reg.datasets[u.dataset], s3.max_tokens, s3.bucket_width)?;
                buckets[u.dataset] = Some(b);
            }
        }
        let total = s3.sweeps * plan.len();
        let sched = schedule(self.cfg.stage1.lr_peak * s3.lr_factor, s3.warmup_steps, total);
        let max_pos = self.cfg.model.max_positions;
        let mut report = SweepReport::default();
        let mut best: Option<(f64, ModelParams)> = None;
        let mut since_best = 0;
        for sweep in 0..s3.sweeps {
            for (k, u) in plan.iter().enumerate() {
                let ds = &self.reg.datasets[u.dataset];
                let batches = buckets[u.dataset].as_ref().expect("filled above");
                let mut rng = stream(self.cfg.seed, &format!("stage3/sweep/{sweep}/update/{k}"));
                let pick = rand::Rng::random_range(&mut rng, 0..batches.len());
                let batch = ds.select(&batches[pick]);
                let mut g = Graph::new();
                let (term, skipped) = match (u.objective, batch, ds.kind) {
                    (Objective::Bt { via }, Batch::Mono(xs), DatasetKind::Mono { lang }) => {
                        let DecodedLoss { loss, skipped, .. } =
                            back_translation_loss(&self.params, &mut g, &xs, lang, via, max_pos)?;
                        (
                            Term {
                                objective: "bt",
                                src: via,
                                tgt: lang,
                                loss,
                            },
                            skipped,
                        )
                    }
                    (Objective::Ct { via }, Batch::Parallel(pairs), DatasetKind::Parallel { src, tgt, .. }) => {
                        let DecodedLoss { loss, skipped, .. } =
                            cross_translation_loss(&self.params, &mut g, &pairs, src, tgt, via, max_pos)?;
                        (
                            Term {
                                objective: "ct",
                                src: via,
                                tgt,
                                loss,
                            },
                            skipped,
                        )
                    }
                    (Objective::Ce, Batch::Parallel(pairs), DatasetKind::Parallel { src, tgt, .. }) => {
                        let (xs, zs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
                        let l = cross_entropy_loss(&self.params, &mut g, &xs, &zs, tgt)?;
                        (
                            Term {
                                objective: "ce",
                                src,
                                tgt,
                                loss: Some(l),
                            },
                            0,
                        )
                    }
                    _ => unreachable!("plan matches dataset kinds"),
                };
                report.skipped_rows += skipped;
                let lr = sched.lr_at(self.step + 1);
                let id = ds.id.clone();
                self.update(g, vec![term], &id, lr, "3")?;
            }
            report.sweeps_run = sweep + 1;
            if !self.quiet {
                eprintln!("stage 3 sweep {}/{}", sweep + 1, s3.sweeps);
            }
            if s3.patience > 0 {
                let translator = ModelTranslator::new(&self.params, vocab, self.cfg);
                let r = evaluate(&translator, dev, mode)?;
                let mean = r.rows.iter().map(|r| r.score).sum::<f64>() / r.rows.len().max(1) as f64;
                report.dev_scores.push(mean);
                if best.as_ref().is_none_or(|(b, _)| mean > *b) {
                    best = Some((mean, self.params.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= s3.patience {
                        break;
                    }
                }
            }
        }
        if let Some((_, p)) = best {
            self.params = p;
        }
        Ok(report)
    }
}
