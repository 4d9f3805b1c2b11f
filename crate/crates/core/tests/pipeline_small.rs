mod common;

use std::collections::BTreeSet;
use std::path::Path;

use munmt::config::ExperimentConfig;
use munmt::corpus::read_lines;
use munmt::pipeline::checkpoint::{Checkpoint, CheckpointMeta};
use munmt::pipeline::synthetic::{read_provenance, round_sizes};
use munmt::pipeline::train::{schedule, AuditLog, Session};
use munmt::pipeline::{Round, Workspace};
use munmt::Error;

use common::tiny_config;

fn workspace(dir: &Path, overrides: &[&str]) -> Workspace {
    Workspace::new(dir, tiny_config(overrides))
}

#[test]
fn round_sizes_follow_fractions() {
    let cfg = ExperimentConfig::default();
    assert_eq!(round_sizes(&cfg, 1000), (100, 200));
    assert_eq!(round_sizes(&cfg, 20_000), (2000, 4000));
}

#[test]
fn synthetic_rounds_are_disjoint_and_keep_real_side_verbatim() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = workspace(tmp.path(), &[]);
    ws.synth_data().unwrap();
    ws.train_vocab().unwrap();
    ws.stage1().unwrap();
    ws.synth_bt(1).unwrap();
    ws.stage2(Round::A).unwrap();
    let m2 = ws.synth_bt(2).unwrap();
    assert!(m2.datasets.iter().all(|d| d.synthetic));

    let r1 = read_provenance(&ws.synthetic_dir(1), "syn.r1.En-X1").unwrap();
    let r2 = read_provenance(&ws.synthetic_dir(2), "syn.r2.En-X1").unwrap();
    let en = read_provenance(&ws.synthetic_dir(2), "syn.r2.X1-En").unwrap();
    assert_eq!(r1.source_dataset, "mono.X1");
    assert_eq!(en.source_dataset, "mono.En");
    let all = |p: &munmt::pipeline::synthetic::Provenance| -> BTreeSet<usize> {
        p.line_indices.iter().chain(&p.skipped_indices).copied().collect()
    };
    let (s1, s2) = (all(&r1), all(&r2));
    assert_eq!(s1.len(), 40);
    assert_eq!(s2.len(), 80);
    assert!(s1.is_disjoint(&s2));
    assert_eq!(all(&en).len(), 40);

    let mono = read_lines(&ws.data_dir().join("mono.X1.txt")).unwrap();
    for (round, p) in [(1, &r1), (2, &r2)] {
        let dir = ws.synthetic_dir(round);
        let real = read_lines(&dir.join(format!("{}.X1", p.dataset))).unwrap();
        let syn = read_lines(&dir.join(format!("{}.En", p.dataset))).unwrap();
        assert_eq!(real.len(), p.line_indices.len());
        assert_eq!(syn.len(), real.len());
        for (line, &i) in real.iter().zip(&p.line_indices) {
            assert_eq!(line, &mono[i]);
        }
        assert!(syn.iter().all(|s| !s.trim().is_empty()));
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_loss_sequence() {
    let tmp = tempfile::tempdir().unwrap();
    let over = ["stage1.steps=10", "stage1.checkpoint_interval=5"];
    let ws = workspace(&tmp.path().join("a"), &over);
    ws.synth_data().unwrap();
    ws.train_vocab().unwrap();
    ws.stage1().unwrap();
    let full = AuditLog::load(&ws.audit_path("1")).unwrap();
    assert_eq!(full.entries.last().unwrap().step, 10);

    // Interrupt a second run right after its step-5 checkpoint.
    let vocab = ws.load_vocab().unwrap();
    let reg = ws.registry(&vocab, &[]).unwrap();
    let cfg = &ws.cfg;
    let mcfg = cfg.model_config(vocab.len(), reg.languages.len());
    let init = munmt::model::init_params(&mcfg, munmt::rng::sub_seed(cfg.seed, "init")).unwrap();
    let s1 = &cfg.stage1;
    let mut session = Session::new(cfg, &reg, init, s1.optimizer, s1.weight_decay);
    let sched = schedule(s1.lr_peak, s1.warmup_steps, 10);
    let mut saved = None;
    let mut crash = |s: &Session| {
        let c = Checkpoint {
            meta: CheckpointMeta {
                stage: "1".into(),
                step: s.step,
                planned_steps: 10,
                vocab_digest: vocab.digest(),
                config_digest: cfg.digest(),
                stage_digest: cfg.stage_digest("1"),
                model: mcfg.clone(),
                languages: reg.manifest.languages.clone(),
                optimizer: Some(s.optim.kind),
                optimizer_step: s.optim.step,
            },
            params: s.params.clone(),
            optim: Some(s.optim.clone()),
        };
        saved = Some((c.to_bytes(), s.audit.clone()));
        Err(Error::Data("interrupted".into()))
    };
    let pool = reg.datasets.clone();
    assert!(session.run_random("1", &pool, 10, &sched, 5, &mut crash).is_err());
    let (bytes, audit) = saved.expect("checkpoint at step 5");
    assert_eq!(audit.entries.last().unwrap().step, 5);

    // Resume it through the workspace from the saved state.
    let wb = workspace(&tmp.path().join("b"), &over);
    wb.synth_data().unwrap();
    wb.train_vocab().unwrap();
    std::fs::create_dir_all(wb.stage_dir("1")).unwrap();
    Checkpoint::from_bytes(&bytes)
        .unwrap()
        .save(&wb.checkpoint_path("1"))
        .unwrap();
    audit.save(&wb.audit_path("1")).unwrap();
    let resumed = wb.stage1().unwrap();
    assert_eq!(resumed.meta.step, 10);
    let resumed_log = AuditLog::load(&wb.audit_path("1")).unwrap();
    assert_eq!(resumed_log, full);
    let a = Checkpoint::load(&ws.checkpoint_path("1")).unwrap();
    assert_eq!(a.params, resumed.params);
}

#[test]
fn hygiene_and_zero_sweep_stage3() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = workspace(tmp.path(), &[]);
    let reports = ws.pipeline().unwrap();
    assert_eq!(reports.by_stage.len(), 4);

    let sets_in_training = |stage: &str| {
        let log = AuditLog::load(&ws.audit_path(stage)).unwrap();
        for e in &log.entries {
            assert!(
                !e.dataset.starts_with("test") && !e.dataset.starts_with("dev"),
                "held-out data {} used in stage {stage}",
                e.dataset
            );
            let touches_target = e.src_lang == "X1" || e.tgt_lang == "X1";
            if e.objective == "ce" && touches_target {
                assert!(
                    e.dataset.starts_with("syn."),
                    "real X1 parallel data {} in stage {stage}",
                    e.dataset
                );
            }
        }
        log
    };
    let s1 = sets_in_training("1");
    assert!(s1.entries.iter().all(|e| !e.dataset.starts_with("syn.")));
    let s2a = sets_in_training("2a");
    assert!(s2a
        .entries
        .iter()
        .filter(|e| e.dataset.starts_with("syn."))
        .all(|e| e.dataset.starts_with("syn.r1.")));
    let s2b = sets_in_training("2b");
    assert!(s2b
        .entries
        .iter()
        .filter(|e| e.dataset.starts_with("syn."))
        .all(|e| e.dataset.starts_with("syn.r2.")));
    sets_in_training("3");

    let artifact = std::fs::read_to_string(ws.root.join("vocab").join("artifact.json")).unwrap();
    assert!(!artifact.contains("test.") && !artifact.contains("dev."));

    // Rerunning finds every stage up to date and changes nothing.
    let before = std::fs::read(ws.checkpoint_path("3")).unwrap();
    ws.pipeline().unwrap();
    assert_eq!(std::fs::read(ws.checkpoint_path("3")).unwrap(), before);

    // Zero sweeps return the stage-2b parameters untouched.
    let zero = Workspace::new(tmp.path(), tiny_config(&["stage3.sweeps=0"]));
    let (c, report) = zero.stage3().unwrap();
    assert_eq!(report.sweeps_run, 0);
    let b = Checkpoint::load(&ws.checkpoint_path("2b")).unwrap();
    assert_eq!(c.params, b.params);
    assert!(AuditLog::load(&zero.audit_path("3")).unwrap().entries.is_empty());
}

#[test]
fn missing_synthetic_round_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = workspace(tmp.path(), &[]);
    ws.synth_data().unwrap();
    ws.train_vocab().unwrap();
    ws.stage1().unwrap();
    let err = ws.stage2(Round::A).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    assert!(err.to_string().contains("synth-bt"));
}

#[test]
fn shipped_toy_config_is_the_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let shipped = ExperimentConfig::load(&path, &[]).unwrap();
    assert_eq!(shipped, ExperimentConfig::from_toml("", &[]).unwrap());
}
