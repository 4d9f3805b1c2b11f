//! Tokenized datasets and held-out sets resolved from a manifest.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::config::ExperimentConfig;
use crate::corpus::{read_lines, Dataset, DatasetKind, LangId, Language, Languages, Manifest, ManifestKind};
use crate::eval::TestSet;
use crate::tokenizer::Vocab;
use crate::{Error, Result};

/// Where a registered dataset's items came from: the files, and for every
/// kept item its line number in those files.
#[derive(Clone, Debug, PartialEq)]
pub struct Source {
    pub paths: Vec<PathBuf>,
    pub lines: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Registry {
    pub languages: Languages,
    pub datasets: Vec<Dataset>,
    pub sources: Vec<Source>,
    pub manifest: Manifest,
    /// Target language -> its auxiliary languages.
    pub pivots: BTreeMap<LangId, Vec<LangId>>,
    /// Items dropped per dataset: empty, too long, or too short to mask.
    pub dropped: BTreeMap<String, usize>,
}

fn encode_line(vocab: &Vocab, line: &str) -> Result<Option<Vec<u32>>> {
    if crate::tokenizer::normalize(line).is_empty() {
        return Ok(None);
    }
    vocab.encode(line).map(Some)
}

impl Registry {
    /// Validates `manifest` against `cfg`, then reads and tokenizes every
    /// dataset not excluded by `data.exclude`. Items longer than
    /// `vocab.max_pieces` are dropped, as are empty lines and monolingual
    /// lines of a single piece (too short to mask).
    pub fn build(cfg: &ExperimentConfig, manifest: &Manifest, vocab: &Vocab) -> Result<Self> {
        let mut reg = Self::languages_only(cfg, manifest)?;
        let wanted: Vec<_> = manifest
            .datasets
            .iter()
            .filter(|d| !cfg.data.exclude.contains(&d.id))
            .cloned()
            .collect();
        reg.add_manifest_datasets(&wanted, vocab, cfg.vocab.max_pieces)?;
        Ok(reg)
    }

    /// Validated languages, pivots and held-out sets, with no datasets.
    pub fn languages_only(cfg: &ExperimentConfig, manifest: &Manifest) -> Result<Self> {
        let problems = cfg.manifest_problems(manifest);
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let languages = Languages::new(
            manifest
                .languages
                .iter()
                .map(|n| Language {
                    name: n.clone(),
                    is_english: n == &cfg.english,
                    is_target: cfg.targets.contains(n),
                })
                .collect(),
        )?;
        let mut pivots = BTreeMap::new();
        for t in &cfg.targets {
            let auxes = cfg
                .pivots
                .get(t)
                .map(|v| v.iter().map(|a| languages.id(a)).collect::<Result<Vec<_>>>())
                .transpose()?
                .unwrap_or_default();
            pivots.insert(languages.id(t)?, auxes);
        }
        Ok(Self {
            languages,
            datasets: Vec::new(),
            sources: Vec::new(),
            manifest: manifest.clone(),
            pivots,
            dropped: BTreeMap::new(),
        })
    }

    /// Tokenizes and registers manifest entries (synthetic ones included).
    pub fn add_manifest_datasets(
        &mut self,
        entries: &[crate::corpus::ManifestDataset],
        vocab: &Vocab,
        max_pieces: usize,
    ) -> Result<()> {
        for d in entries {
            if self.datasets.iter().any(|o| o.id == d.id) {
                return Err(Error::Data(format!("dataset {} registered twice", d.id)));
            }
            let mut dropped = 0;
            let mut lines = Vec::new();
            let ds = match d.kind {
                ManifestKind::Mono => {
                    let lang = self.languages.id(&d.langs[0])?;
                    let mut items = Vec::new();
                    for (i, line) in read_lines(&d.paths[0])?.iter().enumerate() {
                        match encode_line(vocab, line)? {
                            Some(ids) if (2..=max_pieces).contains(&ids.len()) => {
                                items.push(ids);
                                lines.push(i);
                            }
                            _ => dropped += 1,
                        }
                    }
                    Dataset::mono(&d.id, lang, items)
                }
                ManifestKind::Parallel => {
                    let src = self.languages.id(&d.langs[0])?;
                    let tgt = self.languages.id(&d.langs[1])?;
                    let a = read_lines(&d.paths[0])?;
                    let b = read_lines(&d.paths[1])?;
                    if a.len() != b.len() {
                        return Err(Error::Data(format!(
                            "dataset {}: {} and {} lines in its two files",
                            d.id,
                            a.len(),
                            b.len()
                        )));
                    }
                    let mut items = Vec::new();
                    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
                        match (encode_line(vocab, x)?, encode_line(vocab, y)?) {
                            (Some(x), Some(y)) if x.len().max(y.len()) <= max_pieces => {
                                items.push((x, y));
                                lines.push(i);
                            }
                            _ => dropped += 1,
                        }
                    }
                    Dataset::parallel(&d.id, src, tgt, d.synthetic, items)
                }
            };
            if ds.is_empty() {
                return Err(Error::Data(format!("dataset {} has no usable items", d.id)));
            }
            self.dropped.insert(d.id.clone(), dropped);
            self.datasets.push(ds);
            self.sources.push(Source {
                paths: d.paths.clone(),
                lines,
            });
        }
        Ok(())
    }

    pub fn index(&self, id: &str) -> Option<usize> {
        self.datasets.iter().position(|d| d.id == id)
    }

    pub fn english(&self) -> LangId {
        self.languages.english()
    }

    pub fn targets(&self) -> Vec<LangId> {
        self.languages.targets()
    }

    pub fn lang_name(&self, id: LangId) -> &str {
        self.languages.name(id)
    }

    /// Real (non-synthetic) datasets.
    pub fn real(&self) -> Vec<&Dataset> {
        self.datasets.iter().filter(|d| !d.kind.is_synthetic()).collect()
    }

    pub fn mono_of(&self, lang: LangId) -> Vec<usize> {
        (0..self.datasets.len())
            .filter(|&i| self.datasets[i].kind == DatasetKind::Mono { lang })
            .collect()
    }

    /// Evaluation directions: the configured ones, or every target paired
    /// with English both ways.
    pub fn directions(&self, cfg: &ExperimentConfig) -> Result<Vec<(LangId, LangId)>> {
        if cfg.eval.directions.is_empty() {
            let en = self.english();
            Ok(self.targets().into_iter().flat_map(|t| [(t, en), (en, t)]).collect())
        } else {
            cfg.eval
                .directions
                .iter()
                .map(|d| {
                    let (a, b) = d.split_once('-').expect("validated");
                    Ok((self.languages.id(a)?, self.languages.id(b)?))
                })
                .collect()
        }
    }

    /// Reads the held-out sets of `split` for `directions`.
    pub fn testsets(&self, split: &str, directions: &[(LangId, LangId)]) -> Result<Vec<TestSet>> {
        directions
            .iter()
            .map(|&(s, t)| {
                let (sn, tn) = (self.lang_name(s), self.lang_name(t));
                let entry = self
                    .manifest
                    .testsets
                    .iter()
                    .find(|e| e.split == split && e.src_lang == sn && e.tgt_lang == tn)
                    .ok_or_else(|| Error::Data(format!("no {split} set for {sn}-{tn} in the manifest")))?;
                let src = read_lines(&entry.src)?;
                let refs = read_lines(&entry.reference)?;
                if src.len() != refs.len() {
                    return Err(Error::Data(format!(
                        "{split} set {sn}-{tn}: {} sources and {} references",
                        src.len(),
                        refs.len()
                    )));
                }
                Ok(TestSet {
                    src_lang: s,
                    tgt_lang: t,
                    direction: format!("{sn}-{tn}"),
                    src,
                    refs,
                })
            })
            .collect()
    }
}
