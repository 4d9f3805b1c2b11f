//! Offline back-translation: decode monolingual data once with a frozen
//! model and keep the result as pseudo-parallel corpora.
//!
//! Round 1 decodes a fraction of each target's monolingual data into
//! English, giving En->X pairs. Round 2 decodes a disjoint, larger slice of
//! the same data the same way, and also decodes disjoint English slices
//! into each target, giving X->En pairs. The synthetic side is always the
//! dataset's first language.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::corpus::{read_lines, write_lines, LangId, Manifest, ManifestDataset, ManifestKind};
use crate::model::{body, ModelParams};
use crate::objectives::decode_budget;
use crate::rng::stream;
use crate::tokenizer::{Vocab, EOS};
use crate::{Error, Result};

use super::registry::Registry;
use super::write_atomic;

/// Which monolingual lines a synthetic corpus was made from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub round: u8,
    pub dataset: String,
    pub source_dataset: String,
    /// Line numbers in the source dataset's file, in output order.
    pub line_indices: Vec<usize>,
    /// Selected lines whose translation was empty or too long.
    pub skipped_indices: Vec<usize>,
}

/// One generated corpus: (synthetic, real) text pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub id: String,
    pub synthetic_lang: LangId,
    pub real_lang: LangId,
    pub pairs: Vec<(String, String)>,
    pub provenance: Provenance,
}

/// How many lines each round takes from a target's monolingual data.
pub fn round_sizes(cfg: &ExperimentConfig, available: usize) -> (usize, usize) {
    let n1 = (available as f64 * cfg.synthetic.round1_mono_fraction).round() as usize;
    let n2 = (n1 as f64 * cfg.synthetic.round2_multiplier).round() as usize;
    (n1, n2)
}

/// A fixed permutation of a dataset's items; every round takes its own
/// slice of it, which keeps rounds disjoint.
fn permutation(cfg: &ExperimentConfig, id: &str, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(cfg.seed, &format!("synthetic/select/{id}")));
    idx
}

/// Item indices of the monolingual dataset `ds` selected for `round`
/// (1 or 2) from the target side.
pub fn target_selection(cfg: &ExperimentConfig, reg: &Registry, ds: usize, round: u8) -> Result<Vec<usize>> {
    let d = &reg.datasets[ds];
    let (n1, n2) = round_sizes(cfg, d.len());
    if n1 == 0 || n1 + n2 > d.len() {
        return Err(Error::Data(format!(
            "dataset {} has {} lines, too few for synthetic rounds of {n1} and {n2}",
            d.id,
            d.len()
        )));
    }
    let perm = permutation(cfg, &d.id, d.len());
    Ok(match round {
        1 => perm[..n1].to_vec(),
        _ => perm[n1..n1 + n2].to_vec(),
    })
}

/// Item indices of English dataset `ds` decoded into the `k`-th target.
pub fn english_selection(
    cfg: &ExperimentConfig,
    reg: &Registry,
    ds: usize,
    k: usize,
    targets: usize,
) -> Result<Vec<usize>> {
    let d = &reg.datasets[ds];
    let e = cfg.synthetic.english_lines_per_target;
    if e == 0 || e * targets > d.len() {
        return Err(Error::Data(format!(
            "dataset {} has {} lines, too few for {e} per target over {targets} targets",
            d.id,
            d.len()
        )));
    }
    let perm = permutation(cfg, &d.id, d.len());
    Ok(perm[k * e..(k + 1) * e].to_vec())
}

/// Greedy translations of `srcs` into `lang`, in input order. Rows are
/// decoded in length-sorted batches; `None` marks an empty translation.
pub fn translate_ids(
    params: &ModelParams,
    srcs: &[&[u32]],
    lang: LangId,
    batch: usize,
    max_positions: usize,
) -> Result<Vec<Option<Vec<u32>>>> {
    let mut order: Vec<usize> = (0..srcs.len()).collect();
    order.sort_by_key(|&i| (srcs[i].len(), i));
    let mut out = vec![None; srcs.len()];
    for chunk in order.chunks(batch.max(1)) {
        let enc: Vec<Vec<u32>> = chunk
            .iter()
            .map(|&i| {
                let mut v: Vec<u32> = srcs[i].iter().copied().take(max_positions - 1).collect();
                v.push(EOS);
                v
            })
            .collect();
        let longest = enc.iter().map(Vec::len).max().unwrap_or(1);
        let dec = params.greedy_decode(&enc, lang, decode_budget(longest, max_positions))?;
        for (&i, d) in chunk.iter().zip(dec) {
            let b = body(&d);
            if !b.is_empty() {
                out[i] = Some(b.to_vec());
            }
        }
    }
    Ok(out)
}

fn decode_selection(
    params: &ModelParams,
    vocab: &Vocab,
    cfg: &ExperimentConfig,
    reg: &Registry,
    round: u8,
    ds: usize,
    picks: &[usize],
    into: LangId,
) -> Result<SyntheticCorpus> {
    let d = &reg.datasets[ds];
    let items = d.mono_items().expect("selection comes from monolingual data");
    let lang = match d.kind {
        crate::corpus::DatasetKind::Mono { lang } => lang,
        _ => unreachable!(),
    };
    let src = &reg.sources[ds];
    let text = read_lines(&src.paths[0])?;
    let srcs: Vec<&[u32]> = picks.iter().map(|&i| items[i].as_slice()).collect();
    let decoded = translate_ids(params, &srcs, into, cfg.synthetic.decode_batch, cfg.model.max_positions)?;
    let id = format!("syn.r{round}.{}-{}", reg.lang_name(into), reg.lang_name(lang));
    let mut pairs = Vec::new();
    let mut provenance = Provenance {
        round,
        dataset: id.clone(),
        source_dataset: d.id.clone(),
        line_indices: Vec::new(),
        skipped_indices: Vec::new(),
    };
    for (&i, y) in picks.iter().zip(decoded) {
        let line = src.lines[i];
        let y = y.filter(|y| y.len() <= cfg.vocab.max_pieces);
        let text_y = match y {
            Some(y) => vocab.decode(&y)?,
            None => String::new(),
        };
        if text_y.trim().is_empty() {
            provenance.skipped_indices.push(line);
            continue;
        }
        pairs.push((text_y, text[line].clone()));
        provenance.line_indices.push(line);
    }
    Ok(SyntheticCorpus {
        id,
        synthetic_lang: into,
        real_lang: lang,
        pairs,
        provenance,
    })
}

/// Generates the synthetic corpora of `round` with frozen `params`.
pub fn generate_synthetic(
    params: &ModelParams,
    vocab: &Vocab,
    cfg: &ExperimentConfig,
    reg: &Registry,
    round: u8,
) -> Result<Vec<SyntheticCorpus>> {
    if !matches!(round, 1 | 2) {
        return Err(Error::config(format!("synthetic round must be 1 or 2, got {round}")));
    }
    let en = reg.english();
    let targets = reg.targets();
    let mut out = Vec::new();
    for &t in &targets {
        let mono = reg.mono_of(t);
        let [ds] = mono.as_slice() else {
            return Err(Error::Data(format!(
                "target {} needs exactly one monolingual dataset, found {}",
                reg.lang_name(t),
                mono.len()
            )));
        };
        let picks = target_selection(cfg, reg, *ds, round)?;
        out.push(decode_selection(params, vocab, cfg, reg, round, *ds, &picks, en)?);
    }
    if round == 2 {
        let mono = reg.mono_of(en);
        let [ds] = mono.as_slice() else {
            return Err(Error::Data(format!(
                "English needs exactly one monolingual dataset, found {}",
                mono.len()
            )));
        };
        for (k, &t) in targets.iter().enumerate() {
            let picks = english_selection(cfg, reg, *ds, k, targets.len())?;
            out.push(decode_selection(params, vocab, cfg, reg, round, *ds, &picks, t)?);
        }
    }
    for c in &out {
        if c.pairs.is_empty() {
            return Err(Error::Data(format!("synthetic corpus {} came out empty", c.id)));
        }
    }
    Ok(out)
}

/// Writes corpora as `<id>.<lang>` file pairs with `<id>.provenance.json`
/// sidecars and a `manifest.toml` listing them, into `dir`.
pub fn write_synthetic(dir: &Path, reg: &Registry, corpora: &[SyntheticCorpus]) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = Manifest {
        languages: reg.manifest.languages.clone(),
        ..Default::default()
    };
    for c in corpora {
        let (sn, rn) = (reg.lang_name(c.synthetic_lang), reg.lang_name(c.real_lang));
        let ps = dir.join(format!("{}.{sn}", c.id));
        let pr = dir.join(format!("{}.{rn}", c.id));
        let (a, b): (Vec<&str>, Vec<&str>) = c.pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).unzip();
        write_lines(&ps, &a)?;
        write_lines(&pr, &b)?;
        let prov = serde_json::to_string_pretty(&c.provenance).expect("serializes");
        write_atomic(&dir.join(format!("{}.provenance.json", c.id)), prov.as_bytes())?;
        m.datasets.push(ManifestDataset {
            id: c.id.clone(),
            kind: ManifestKind::Parallel,
            langs: vec![sn.to_string(), rn.to_string()],
            paths: vec![ps, pr],
            synthetic: true,
        });
    }
    m.save(&dir.join("manifest.toml"))?;
    Ok(m)
}

pub fn read_provenance(dir: &Path, id: &str) -> Result<Provenance> {
    let path = dir.join(format!("{id}.provenance.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
