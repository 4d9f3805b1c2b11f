//! Acceptance run: prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Criteria 5 to 7 share full pipeline runs on the
//! default toy benchmark, which take several minutes each.

#[allow(dead_code)]
mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use munmt::config::ExperimentConfig;
use munmt::corpus::{choose_dataset, Dataset, LangId, SamplingPolicy};
use munmt::eval::{bleu, BleuMode};
use munmt::model::{init_params, ModelConfig};
use munmt::objectives::mass_mask;
use munmt::pipeline::checkpoint::{Checkpoint, CheckpointMeta};
use munmt::pipeline::train::{plan_sweep, schedule, AuditEntry, AuditLog, Session};
use munmt::pipeline::{ablation_config, PipelineReports, Workspace};
use munmt::rng::{stream, sub_seed};
use munmt::{Error, Result};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(n: &str, title: &str, o: &Outcome) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {n} ({title}): {verdict}: {}", o.detail);
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut cases = common::gradcheck::primitives();
    cases.extend(common::gradcheck::losses());
    let elapsed = t.elapsed();
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} ({} instances, {:e})", c.name, c.instances, c.worst))
        .collect();
    let worst = cases.iter().map(|c| c.worst).fold(0.0, f64::max);
    let fast = elapsed <= Duration::from_secs(120);
    outcome(
        failed.is_empty() && fast,
        format!(
            "{} functions x >= {} instances, worst relative error {worst:.2e}, {:.1}s{}",
            cases.len(),
            common::gradcheck::INSTANCES,
            elapsed.as_secs_f64(),
            if failed.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failed.join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. MASS start distribution

fn mass_starts() -> Outcome {
    let x: Vec<u32> = (10..20).collect();
    let mut rng = stream(2, "acceptance/mass");
    let draws = 100_000;
    let mut counts = [0usize; 10];
    for _ in 0..draws {
        let (_, _, spec) = mass_mask(&x, &mut rng).unwrap();
        counts[spec.start] += 1;
    }
    let expected = [0.3, 0.1, 0.1, 0.1, 0.1, 0.3, 0.0, 0.0, 0.0, 0.0];
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    let dev = freqs
        .iter()
        .zip(expected)
        .map(|(f, e)| (f - e).abs())
        .fold(0.0, f64::max);
    let shown: Vec<String> = freqs[..6].iter().map(|f| format!("{f:.4}")).collect();
    outcome(
        dev <= 0.01,
        format!("P(start=0..5) = [{}], max deviation {dev:.4}", shown.join(", ")),
    )
}

// ---------------------------------------------------------------------------
// 3. Dataset sampler

fn sampler() -> Outcome {
    let mono = |id: &str, n: usize| Dataset::mono(id, LangId(0), vec![vec![5, 6]; n]);
    let para = |id: &str, n: usize| Dataset::parallel(id, LangId(1), LangId(0), false, vec![(vec![5], vec![6]); n]);
    let pool = vec![
        mono("m0", 20_000),
        para("p0", 5000),
        mono("m1", 300),
        para("p1", 1000),
        para("p2", 40),
        mono("m2", 7000),
        para("p3", 200_000),
    ];
    let policy = SamplingPolicy::default();
    let draws = 100_000;
    let mut rng = stream(3, "acceptance/sampler");
    let mut counts = vec![0usize; pool.len()];
    for _ in 0..draws {
        counts[choose_dataset(&pool, &policy, &mut rng).unwrap()] += 1;
    }
    let par: Vec<usize> = (0..pool.len()).filter(|&i| !pool[i].kind.is_mono()).collect();
    let n_par: usize = par.iter().map(|&i| counts[i]).sum();
    let p_par = n_par as f64 / draws as f64;
    // Weights from the n^(1/T) form, independent of the library's helper.
    let raw: Vec<f64> = par.iter().map(|&i| (pool[i].len() as f64).powf(1.0 / 5.0)).collect();
    let z: f64 = raw.iter().sum();
    let mut worst = (p_par - 0.5).abs();
    let mut shown = Vec::new();
    for (k, &i) in par.iter().enumerate() {
        let got = counts[i] as f64 / n_par as f64;
        let want = raw[k] / z;
        worst = worst.max((got - want).abs());
        shown.push(format!("{}={got:.3}/{want:.3}", pool[i].id));
    }
    outcome(
        worst <= 0.01,
        format!(
            "p_parallel {p_par:.4}; weights got/want {}; max deviation {worst:.4}",
            shown.join(" ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. BLEU against brute-force counting

fn count_occurrences(tokens: &[&str], gram: &[&str]) -> usize {
    if tokens.len() < gram.len() {
        return 0;
    }
    (0..=tokens.len() - gram.len())
        .filter(|&i| &tokens[i..i + gram.len()] == gram)
        .count()
}

/// Corpus BLEU with exponential-decay smoothing, by direct enumeration.
fn brute_bleu(hyps: &[&str], refs: &[&str]) -> f64 {
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            if h.len() < n {
                continue;
            }
            let grams: Vec<&[&str]> = (0..=h.len() - n).map(|i| &h[i..i + n]).collect();
            totals[n - 1] += grams.len();
            let mut done: Vec<&[&str]> = Vec::new();
            for g in &grams {
                if done.contains(g) {
                    continue;
                }
                done.push(g);
                matches[n - 1] += count_occurrences(&h, g).min(count_occurrences(&r, g));
            }
        }
    }
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut smooth = 1.0;
    for n in 0..4 {
        if totals[n] == 0 {
            return 0.0;
        }
        let p = if matches[n] == 0 {
            smooth *= 2.0;
            1.0 / (smooth * totals[n] as f64)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * (log_sum / 4.0).exp()
}

fn bleu_cases() -> Vec<(Vec<String>, Vec<String>)> {
    let fixed: Vec<(Vec<&str>, Vec<&str>)> = vec![
        (vec!["the cat sat on the mat"], vec!["the cat sat on the mat"]),
        (vec!["the cat sat on the mat"], vec!["the cat is on the mat"]),
        (vec!["the the the the"], vec!["the cat sat on the mat"]),
        (vec!["a b c d e f"], vec!["a b c d e f g h i j"]),
        (vec!["a b c d e f g h"], vec!["a b c d"]),
        (vec!["x y z w", "a b"], vec!["x y z w", "a b c d e"]),
        (vec!["one two three four five"], vec!["five four three two one"]),
        (vec!["a b a b a b", "c d c d"], vec!["b a b a b a", "d c d c"]),
        (vec!["p q r s t u v"], vec!["p q r x t u v"]),
        (
            vec!["lo la li", "mo ma mi mu", "no na"],
            vec!["lo la li le", "mo ma mi", "no na ni"],
        ),
    ];
    let mut out: Vec<(Vec<String>, Vec<String>)> = fixed
        .into_iter()
        .map(|(h, r)| {
            (
                h.into_iter().map(String::from).collect(),
                r.into_iter().map(String::from).collect(),
            )
        })
        .collect();
    // Ten more from a fixed seed: noisy copies of random references.
    let words = ["ka", "ke", "ki", "ko", "ku", "sa", "se", "si"];
    let mut rng = stream(4, "acceptance/bleu");
    for _ in 0..10 {
        let n = rng.random_range(1..6);
        let mut hyps = Vec::new();
        let mut refs = Vec::new();
        for _ in 0..n {
            let r: Vec<&str> = (0..rng.random_range(4..14))
                .map(|_| words[rng.random_range(0..words.len())])
                .collect();
            let mut h: Vec<&str> = Vec::new();
            for w in &r {
                let u: f64 = rng.random();
                if u < 0.15 {
                    continue;
                } else if u < 0.3 {
                    h.push(words[rng.random_range(0..words.len())]);
                } else {
                    h.push(w);
                }
                if rng.random::<f64>() < 0.05 {
                    h.push(words[0]);
                }
            }
            if h.is_empty() {
                h.push(words[1]);
            }
            hyps.push(h.join(" "));
            refs.push(r.join(" "));
        }
        out.push((hyps, refs));
    }
    out
}

fn bleu_oracle() -> Outcome {
    let cases = bleu_cases();
    let mut worst: f64 = 0.0;
    for (h, r) in &cases {
        let hs: Vec<&str> = h.iter().map(String::as_str).collect();
        let rs: Vec<&str> = r.iter().map(String::as_str).collect();
        let got = bleu(&hs, &rs, BleuMode::Pretokenized).unwrap().score;
        worst = worst.max((got - brute_bleu(&hs, &rs)).abs());
    }
    let same = ["the cat sat on the mat", "a b c d e", "x y"];
    let identical = bleu(&same, &same, BleuMode::Pretokenized).unwrap().score;
    outcome(
        worst <= 0.01 && identical == 100.0,
        format!(
            "{} cases, max |difference| {worst:.2e}; identical corpus {identical}",
            cases.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// Shared pipeline runs

struct Run {
    ws: Workspace,
    reports: PipelineReports,
    elapsed: Duration,
}

fn run_pipeline(root: &Path, cfg: ExperimentConfig) -> Result<Run> {
    let ws = Workspace::new(root, cfg);
    let t = Instant::now();
    let reports = ws.pipeline()?;
    Ok(Run {
        ws,
        reports,
        elapsed: t.elapsed(),
    })
}

fn run_arm(main: &Run, arm: &str) -> Result<Run> {
    let manifest = main.ws.load_manifest()?;
    let cfg = ablation_config(&main.ws.cfg, arm, &manifest)?;
    let ws = Workspace::new(main.ws.root.join("ablate").join(arm), cfg);
    ws.adopt(&main.ws.root)?;
    let t = Instant::now();
    let reports = ws.pipeline()?;
    Ok(Run {
        ws,
        reports,
        elapsed: t.elapsed(),
    })
}

// ---------------------------------------------------------------------------
// 5. Stage-3 sweep audit

type Row = (String, String, String, String);

fn sweep_audit(main: &Run) -> Result<Outcome> {
    let expected: Vec<Row> = [
        ("mono.En", "bt", "X1", "En"),
        ("mono.X1", "bt", "A1", "X1"),
        ("mono.X1", "bt", "En", "X1"),
        ("para.A1-En", "ct", "X1", "En"),
        ("syn.r2.En-X1", "ce", "En", "X1"),
        ("syn.r2.X1-En", "ce", "X1", "En"),
    ]
    .iter()
    .map(|(a, b, c, d)| (a.to_string(), b.to_string(), c.to_string(), d.to_string()))
    .collect();
    let multiset = |rows: &[Row]| {
        let mut m: BTreeMap<Row, usize> = BTreeMap::new();
        for r in rows {
            *m.entry(r.clone()).or_default() += 1;
        }
        m
    };
    let want = multiset(&expected);
    let log = AuditLog::load(&main.ws.audit_path("3"))?;
    let per_sweep = expected.len();
    let sweeps = main.ws.cfg.stage3.sweeps;
    let mut mismatched = Vec::new();
    for s in 0..sweeps {
        let lo = (s * per_sweep) as u64;
        let rows: Vec<Row> = log
            .entries
            .iter()
            .filter(|e: &&AuditEntry| e.step > lo && e.step <= lo + per_sweep as u64)
            .map(|e| {
                (
                    e.dataset.clone(),
                    e.objective.clone(),
                    e.src_lang.clone(),
                    e.tgt_lang.clone(),
                )
            })
            .collect();
        if multiset(&rows) != want {
            mismatched.push(s + 1);
        }
    }
    let vocab = main.ws.load_vocab()?;
    let reg = main.ws.registry(&vocab, &[2])?;
    let planned = plan_sweep(&reg, &main.ws.cfg).len();
    let ok = mismatched.is_empty() && log.entries.len() == sweeps * per_sweep && planned == per_sweep;
    Ok(outcome(
        ok,
        format!(
            "{} audit lines over {sweeps} sweeps; {} updates per sweep planned, {per_sweep} enumerated; mismatched sweeps {mismatched:?}",
            log.entries.len(),
            planned
        ),
    ))
}

// ---------------------------------------------------------------------------
// 6. Determinism and resume

fn checkpoint_for(ws: &Workspace, s: &Session, mcfg: &ModelConfig, planned: u64, vocab_digest: &str) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            stage: "1".into(),
            step: s.step,
            planned_steps: planned,
            vocab_digest: vocab_digest.into(),
            config_digest: ws.cfg.digest(),
            stage_digest: ws.cfg.stage_digest("1"),
            model: mcfg.clone(),
            languages: s.reg.manifest.languages.clone(),
            optimizer: Some(s.optim.kind),
            optimizer_step: s.optim.step,
        },
        params: s.params.clone(),
        optim: Some(s.optim.clone()),
    }
}

fn resume_losses(ws: &Workspace, scratch: &Path) -> Result<(Vec<Option<f64>>, Vec<Option<f64>>)> {
    let vocab = ws.load_vocab()?;
    let reg = ws.registry(&vocab, &[])?;
    let cfg = &ws.cfg;
    let mcfg = cfg.model_config(vocab.len(), reg.languages.len());
    let s1 = &cfg.stage1;
    let sched = schedule(s1.lr_peak, s1.warmup_steps, s1.steps);
    let pool = reg.datasets.clone();
    let fresh = || -> Result<Session> {
        let init = init_params(&mcfg, sub_seed(cfg.seed, "init"))?;
        Ok(Session::new(cfg, &reg, init, s1.optimizer, s1.weight_decay))
    };
    let losses = |s: &Session| s.audit.entries.iter().map(|e| e.loss).collect::<Vec<_>>();

    let mut full = fresh()?;
    full.run_random("1", &pool, 10, &sched, 0, &mut |_| Ok(()))?;

    let path = scratch.join("resume.munm");
    let digest = vocab.digest();
    let mut first = fresh()?;
    let mut stop = |s: &Session| -> Result<()> {
        checkpoint_for(ws, s, &mcfg, 10, &digest).save(&path)?;
        Err(Error::Data("stopped after the first checkpoint".into()))
    };
    if first.run_random("1", &pool, 10, &sched, 5, &mut stop).is_ok() {
        return Err(Error::Data("the interrupted run did not stop".into()));
    }
    let audit = first.audit.clone();
    let c = Checkpoint::load(&path)?;
    let mut resumed = fresh()?;
    resumed.params = c.params;
    resumed.optim = c.optim.expect("saved with optimizer state");
    resumed.step = c.meta.step;
    resumed.audit = audit;
    resumed.run_random("1", &pool, 10, &sched, 0, &mut |_| Ok(()))?;
    Ok((losses(&full), losses(&resumed)))
}

fn determinism(main: &Run, twin: &Run, scratch: &Path) -> Result<Outcome> {
    let a = Checkpoint::load(&main.ws.checkpoint_path("3"))?;
    let b = Checkpoint::load(&twin.ws.checkpoint_path("3"))?;
    let same_params =
        a.params.tensors().iter().zip(b.params.tensors()).all(|(x, y)| {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        });
    let same_names = a.params.names() == b.params.names();
    let (full, resumed) = resume_losses(&main.ws, scratch)?;
    let steps = full.len();
    let same_losses = full.len() == resumed.len()
        && full
            .iter()
            .zip(&resumed)
            .all(|(x, y)| x.map(f64::to_bits) == y.map(f64::to_bits));
    Ok(outcome(
        same_params && same_names && same_losses,
        format!(
            "final parameters bit-identical: {}; resumed loss sequence over 10 steps ({steps} terms) identical: {same_losses}",
            same_params && same_names
        ),
    ))
}

// ---------------------------------------------------------------------------
// 7. Trends

fn trends(main: &Run, no_syn: &Run, single: &Run) -> Vec<(&'static str, &'static str, Outcome)> {
    let s = |r: &Run, stage: &str, dir: &str| r.reports.score(stage, dir).unwrap_or(f64::NAN);
    let (xe, ex) = ("X1-En", "En-X1");
    let mut out = Vec::new();

    let (a1, a2) = (s(main, "1", xe), s(main, "1", ex));
    out.push((
        "7a",
        "stage-1 asymmetry",
        outcome(
            a1 - a2 >= 10.0,
            format!("X1-En {a1:.2} vs En-X1 {a2:.2}, gap {:.2}", a1 - a2),
        ),
    ));

    let (b1, b2) = (s(main, "1", ex), s(main, "2a", ex));
    out.push((
        "7b",
        "stage-2 rescue",
        outcome(
            b2 - b1 >= 5.0,
            format!("En-X1 {b1:.2} after stage 1, {b2:.2} after stage 2a"),
        ),
    ));

    let mut ok = true;
    let mut parts = Vec::new();
    for d in [xe, ex] {
        let (before, after) = (s(main, "2b", d), s(main, "3", d));
        ok &= after >= before - 1.0;
        parts.push(format!("{d} {before:.2} -> {after:.2}"));
    }
    out.push(("7c", "stage 3 does not degrade", outcome(ok, parts.join(", "))));

    let (d1, d2) = (s(main, "3", ex), s(no_syn, "3", ex));
    out.push((
        "7d",
        "synthetic-data ablation",
        outcome(
            d1 - d2 >= 3.0,
            format!("final En-X1 {d1:.2} with synthetic data, {d2:.2} without"),
        ),
    ));

    let (e1, e2) = (s(main, "3", xe), s(single, "3", xe));
    out.push((
        "7e",
        "multilinguality ablation",
        outcome(
            e2 < e1,
            format!(
                "final X1-En {e1:.2} with all auxiliary data, {e2:.2} with only {}",
                single
                    .ws
                    .cfg
                    .pivots
                    .values()
                    .flatten()
                    .cloned()
                    .collect::<Vec<_>>()
                    .join(",")
            ),
        ),
    ));

    let minutes = main.elapsed.as_secs_f64() / 60.0;
    out.push((
        "7",
        "runtime",
        outcome(minutes <= 45.0, format!("default pipeline took {minutes:.1} min")),
    ));
    out
}

fn main() {
    let mut failures = 0;
    let mut record = |n: &str, title: &str, o: Outcome| {
        report(n, title, &o);
        failures += usize::from(!o.pass);
    };
    record("1", "gradient suite", gradients());
    record("2", "masking distribution", mass_starts());
    record("3", "sampler conformance", sampler());
    record("4", "BLEU oracle equivalence", bleu_oracle());

    let tmp = tempfile::tempdir().expect("temporary directory");
    let cfg = ExperimentConfig::default();
    let pipelines = (|| -> Result<(Run, Run, Run, Run)> {
        let main = run_pipeline(&tmp.path().join("main"), cfg.clone())?;
        let twin = run_pipeline(&tmp.path().join("twin"), cfg.clone())?;
        let no_syn = run_arm(&main, "no-synthetic")?;
        let single = run_arm(&main, "single-aux")?;
        Ok((main, twin, no_syn, single))
    })();
    match pipelines {
        Ok((main, twin, no_syn, single)) => {
            for (name, r) in [
                ("main", &main),
                ("twin", &twin),
                ("no-synthetic", &no_syn),
                ("single-aux", &single),
            ] {
                println!("# {name} pipeline: {:.1} min", r.elapsed.as_secs_f64() / 60.0);
                for (stage, rep) in &r.reports.by_stage {
                    for row in &rep.rows {
                        println!("#   stage {stage} {} {:.2}", row.direction, row.score);
                    }
                }
            }
            let five = sweep_audit(&main).unwrap_or_else(|e| outcome(false, e.to_string()));
            record("5", "stage-3 sweep audit", five);
            let six = determinism(&main, &twin, tmp.path()).unwrap_or_else(|e| outcome(false, e.to_string()));
            record("6", "determinism and resume", six);
            for (n, title, o) in trends(&main, &no_syn, &single) {
                record(n, title, o);
            }
        }
        Err(e) => {
            for (n, title) in [
                ("5", "stage-3 sweep audit"),
                ("6", "determinism and resume"),
                ("7", "trends"),
            ] {
                record(n, title, outcome(false, format!("pipeline failed: {e}")));
            }
        }
    }
    if failures > 0 {
        println!("acceptance: {failures} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
