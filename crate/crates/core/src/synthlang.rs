//! Toy language families with an exact translation oracle.
//!
//! A base corpus is sampled from an order-2 Markov chain over word types
//! whose unigram marginal is Zipfian. Every language renders a base
//! sentence by mapping each word type to its own surface form (a bijection)
//! and then optionally reversing fixed-size windows of words. Because both
//! steps are invertible, translating between any two languages is exact.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{write_lines, Manifest, ManifestDataset, ManifestKind, ManifestTestSet};
use crate::rng::stream;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub vocab_types: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub lines: usize,
    pub zipf_exponent: f64,
    /// Probability that the next word follows its context's preferred
    /// successor instead of a fresh Zipf draw.
    pub successor_weight: f64,
    /// Seeds the chain's transition structure.
    pub chain_seed: u64,
    /// Seeds sentence sampling.
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_types: 200,
            min_len: 4,
            max_len: 10,
            lines: 1000,
            zipf_exponent: 1.1,
            successor_weight: 0.5,
            chain_seed: 0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.vocab_types < 2 {
            out.push("vocab_types must be >= 2".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            out.push(format!(
                "sentence lengths need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            ));
        }
        if self.max_len > 40 {
            out.push("max_len above 40 words risks the 88-piece filter".into());
        }
        if !(self.zipf_exponent > 0.0) {
            out.push("zipf_exponent must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.successor_weight) {
            out.push("successor_weight must lie in [0, 1]".into());
        }
        out
    }
}

/// Cumulative Zipf distribution over ranks `1..=n`.
pub fn zipf_cdf(n: usize, exponent: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-exponent)).collect();
    let z: f64 = w.iter().sum();
    let mut acc = 0.0;
    w.iter()
        .map(|x| {
            acc += x / z;
            acc
        })
        .collect()
}

fn sample_cdf(cdf: &[f64], u: f64) -> u32 {
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1) as u32
}

/// Uniform in [0, 1) derived from a hash of `(seed, a, b)`.
fn hash_unit(seed: u64, a: u32, b: u32) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    let d = h.finalize();
    let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// Sentences of word-type ids; type `t` has Zipf rank `t + 1`.
pub fn gen_base_corpus(spec: &CorpusSpec) -> Result<Vec<Vec<u32>>> {
    let p = spec.problems();
    if !p.is_empty() {
        return Err(Error::Config(p));
    }
    let cdf = zipf_cdf(spec.vocab_types, spec.zipf_exponent);
    let start = spec.vocab_types as u32;
    let succ_seed = crate::rng::sub_seed(spec.chain_seed, "successors");
    let mut rng = stream(spec.seed, "sentences");
    let mut out = Vec::with_capacity(spec.lines);
    for _ in 0..spec.lines {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut s = Vec::with_capacity(len);
        let (mut a, mut b) = (start, start);
        for _ in 0..len {
            let w = if rng.random::<f64>() < spec.successor_weight {
                sample_cdf(&cdf, hash_unit(succ_seed, a, b))
            } else {
                sample_cdf(&cdf, rng.random())
            };
            s.push(w);
            (a, b) = (b, w);
        }
        out.push(s);
    }
    Ok(out)
}

/// Distinct pseudo-words built from consonant-vowel syllables.
pub fn base_words(n: usize, seed: u64) -> Vec<String> {
    const C: &[&str] = &["p", "t", "k", "b", "d", "g", "m", "n", "s", "l", "r", "f", "h"];
    const V: &[&str] = &["a", "e", "i", "o", "u"];
    let syll: Vec<String> = C
        .iter()
        .flat_map(|c| V.iter().map(move |v| format!("{c}{v}")))
        .collect();
    let mut two: Vec<String> = syll
        .iter()
        .flat_map(|a| syll.iter().map(move |b| format!("{a}{b}")))
        .collect();
    let mut rng = stream(seed, "base-words");
    two.shuffle(&mut rng);
    if n > two.len() {
        let mut three: Vec<String> = two
            .iter()
            .flat_map(|w| syll.iter().map(move |s| format!("{w}{s}")))
            .collect();
        three.shuffle(&mut rng);
        two.extend(three);
    }
    two.truncate(n);
    two
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "window")]
pub enum Reorder {
    None,
    WindowReversal(usize),
}

impl Reorder {
    /// Applies the reordering; window reversal is its own inverse.
    pub fn apply<T: Clone>(&self, words: &[T]) -> Vec<T> {
        match *self {
            Reorder::None => words.to_vec(),
            Reorder::WindowReversal(w) => words.chunks(w.max(1)).flat_map(|c| c.iter().rev().cloned()).collect(),
        }
    }
}

/// One toy language: a surface form per base word type plus a word order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub name: String,
    pub base: bool,
    /// `forms[t]` renders base type `t`; distinct entries make this a
    /// bijection onto the language's word forms.
    pub forms: Vec<String>,
    pub reorder: Reorder,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl LanguageSpec {
    pub fn new(name: impl Into<String>, base: bool, forms: Vec<String>, reorder: Reorder) -> Result<Self> {
        let name = name.into();
        let mut problems = Vec::new();
        if let Reorder::WindowReversal(w) = reorder {
            if w < 2 {
                problems.push(format!("{name}: reversal window must be >= 2, got {w}"));
            }
        }
        let mut index = HashMap::with_capacity(forms.len());
        for (t, f) in forms.iter().enumerate() {
            if f.is_empty() || f.contains(char::is_whitespace) {
                problems.push(format!("{name}: form {f:?} is not a single word"));
            }
            if index.insert(f.clone(), t as u32).is_some() {
                problems.push(format!("{name}: form {f:?} maps two word types"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(Self {
            name,
            base,
            forms,
            reorder,
            index,
        })
    }

    /// Prefixed forms under a permutation of the base words.
    pub fn derived(
        name: impl Into<String>,
        prefix: &str,
        words: &[String],
        lexicon: &[u32],
        reorder: Reorder,
    ) -> Result<Self> {
        let forms = lexicon
            .iter()
            .map(|&i| format!("{prefix}{}", words[i as usize]))
            .collect();
        Self::new(name, false, forms, reorder)
    }

    /// A language whose word types take their forms from `donors` in turn
    /// (type `t` from donor `t mod k`), with the donors' meanings.
    pub fn blend(name: impl Into<String>, donors: &[&LanguageSpec], reorder: Reorder) -> Result<Self> {
        if donors.is_empty() {
            return Err(Error::config("blend needs at least one donor language"));
        }
        let n = donors[0].forms.len();
        let forms = (0..n).map(|t| donors[t % donors.len()].forms[t].clone()).collect();
        Self::new(name, false, forms, reorder)
    }

    fn lookup(&self, w: &str) -> Result<u32> {
        self.index
            .get(w)
            .copied()
            .ok_or_else(|| Error::Data(format!("{w:?} is not a word of {}", self.name)))
    }

    fn reindex(&mut self) {
        self.index = self
            .forms
            .iter()
            .enumerate()
            .map(|(t, f)| (f.clone(), t as u32))
            .collect();
    }
}

/// Renders a base sentence (word-type ids) in `lang`.
pub fn derive_sentence(base: &[u32], lang: &LanguageSpec) -> Result<String> {
    let words = base
        .iter()
        .map(|&t| {
            lang.forms
                .get(t as usize)
                .cloned()
                .ok_or_else(|| Error::Data(format!("word type {t} unmapped in {}", lang.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(lang.reorder.apply(&words).join(" "))
}

/// Recovers the base sentence behind a sentence of `lang`.
pub fn parse_sentence(sentence: &str, lang: &LanguageSpec) -> Result<Vec<u32>> {
    let words: Vec<&str> = sentence.split_whitespace().collect();
    lang.reorder.apply(&words).into_iter().map(|w| lang.lookup(w)).collect()
}

/// Exact translation: undo `from`, then render in `to`.
pub fn oracle_translate(sentence: &str, from: &LanguageSpec, to: &LanguageSpec) -> Result<String> {
    derive_sentence(&parse_sentence(sentence, from)?, to)
}

/// Drops each word with probability `p`, always keeping at least one.
pub fn word_dropout<R: Rng>(sentence: &str, p: f64, rng: &mut R) -> String {
    if p <= 0.0 {
        return sentence.to_string();
    }
    let words: Vec<&str> = sentence.split_whitespace().collect();
    let kept: Vec<&str> = words.iter().copied().filter(|_| rng.random::<f64>() >= p).collect();
    if kept.is_empty() {
        words.first().map(|w| w.to_string()).unwrap_or_default()
    } else {
        kept.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub base: String,
    pub targets: Vec<String>,
    pub auxiliaries: Vec<String>,
    pub vocab_types: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub zipf_exponent: f64,
    pub successor_weight: f64,
    pub reversal_window: usize,
    pub mono_lines: usize,
    pub parallel_lines: usize,
    pub dev_lines: usize,
    pub test_lines: usize,
    /// Word dropout applied to non-base monolingual training text.
    pub word_dropout: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            base: "En".into(),
            targets: vec!["X1".into()],
            auxiliaries: vec!["A1".into(), "A2".into()],
            vocab_types: 200,
            min_len: 4,
            max_len: 10,
            zipf_exponent: 1.1,
            successor_weight: 0.5,
            reversal_window: 2,
            mono_lines: 20_000,
            parallel_lines: 5_000,
            dev_lines: 200,
            test_lines: 300,
            word_dropout: 0.0,
        }
    }
}

impl BenchmarkConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.targets.is_empty() {
            out.push("benchmark needs at least one target language".into());
        }
        if self.auxiliaries.is_empty() {
            out.push("benchmark needs at least one auxiliary language".into());
        }
        let mut seen = HashSet::new();
        for n in std::iter::once(&self.base)
            .chain(&self.targets)
            .chain(&self.auxiliaries)
        {
            if !seen.insert(n) {
                out.push(format!("language {n} listed twice"));
            }
            if n.is_empty() || !n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                out.push(format!("language name {n:?} must be alphanumeric"));
            }
        }
        if self.reversal_window < 2 {
            out.push("reversal_window must be >= 2".into());
        }
        if self.mono_lines == 0 || self.parallel_lines == 0 || self.test_lines == 0 {
            out.push("mono_lines, parallel_lines and test_lines must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.word_dropout) {
            out.push("word_dropout must lie in [0, 1)".into());
        }
        let spec = CorpusSpec {
            vocab_types: self.vocab_types,
            min_len: self.min_len,
            max_len: self.max_len,
            lines: 1,
            zipf_exponent: self.zipf_exponent,
            successor_weight: self.successor_weight,
            chain_seed: 0,
            seed: self.seed,
        };
        out.extend(spec.problems());
        out
    }

    fn corpus_spec(&self, lines: usize, label: &str) -> CorpusSpec {
        CorpusSpec {
            vocab_types: self.vocab_types,
            min_len: self.min_len,
            max_len: self.max_len,
            lines,
            zipf_exponent: self.zipf_exponent,
            successor_weight: self.successor_weight,
            chain_seed: crate::rng::sub_seed(self.seed, "chain"),
            seed: crate::rng::sub_seed(self.seed, label),
        }
    }

    /// The language family: base first, then targets, then auxiliaries.
    /// Auxiliary languages get their own prefixed lexicons; each target
    /// blends the auxiliaries' forms. All non-base languages reverse
    /// windows of `reversal_window` words.
    pub fn languages(&self) -> Result<Vec<LanguageSpec>> {
        let p = self.problems();
        if !p.is_empty() {
            return Err(Error::Config(p));
        }
        let words = base_words(self.vocab_types, crate::rng::sub_seed(self.seed, "words"));
        let reorder = Reorder::WindowReversal(self.reversal_window);
        let base = LanguageSpec::new(self.base.clone(), true, words.clone(), Reorder::None)?;
        let mut aux = Vec::new();
        for (i, name) in self.auxiliaries.iter().enumerate() {
            let mut lex: Vec<u32> = (0..self.vocab_types as u32).collect();
            lex.shuffle(&mut stream(self.seed, &format!("lexicon/{name}")));
            let prefix = aux_prefix(i);
            aux.push(LanguageSpec::derived(name.clone(), &prefix, &words, &lex, reorder)?);
        }
        let donors: Vec<&LanguageSpec> = aux.iter().collect();
        let mut out = vec![base];
        for name in &self.targets {
            out.push(LanguageSpec::blend(name.clone(), &donors, reorder)?);
        }
        out.extend(aux);
        Ok(out)
    }
}

fn aux_prefix(i: usize) -> String {
    const P: &[&str] = &["zu", "vy", "qe", "jo", "wi", "xa"];
    if i < P.len() {
        P[i].to_string()
    } else {
        format!("q{i}")
    }
}

/// Writes the benchmark corpora, oracle-referenced dev and test sets, and a
/// manifest into `dir`. Returns the manifest.
///
/// Corpora per language: `mono.<L>.txt`. Parallel data exists only between
/// each auxiliary language and the base (`para.<A>-<Base>.<A|Base>`).
/// Held-out sets are rendered in every language (`test.<L>.txt`,
/// `dev.<L>.txt`) and listed for every ordered language pair.
pub fn build_benchmark(cfg: &BenchmarkConfig, dir: &Path) -> Result<Manifest> {
    let langs = cfg.languages()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let base = &langs[0];
    let mut train_keys: HashSet<Vec<u32>> = HashSet::new();
    let mut manifest = Manifest {
        languages: langs.iter().map(|l| l.name.clone()).collect(),
        ..Default::default()
    };

    for lang in &langs {
        let sents = gen_base_corpus(&cfg.corpus_spec(cfg.mono_lines, &format!("mono/{}", lang.name)))?;
        let mut noise = stream(cfg.seed, &format!("noise/{}", lang.name));
        let mut lines = Vec::with_capacity(sents.len());
        for s in &sents {
            train_keys.insert(s.clone());
            let line = derive_sentence(s, lang)?;
            lines.push(if lang.base {
                line
            } else {
                word_dropout(&line, cfg.word_dropout, &mut noise)
            });
        }
        let path = dir.join(format!("mono.{}.txt", lang.name));
        write_lines(&path, &lines)?;
        manifest.datasets.push(ManifestDataset {
            id: format!("mono.{}", lang.name),
            kind: ManifestKind::Mono,
            langs: vec![lang.name.clone()],
            paths: vec![path],
            synthetic: false,
        });
    }

    for aux_name in &cfg.auxiliaries {
        let aux = langs.iter().find(|l| &l.name == aux_name).expect("generated above");
        let sents = gen_base_corpus(&cfg.corpus_spec(cfg.parallel_lines, &format!("para/{aux_name}")))?;
        let mut a_lines = Vec::with_capacity(sents.len());
        let mut b_lines = Vec::with_capacity(sents.len());
        for s in &sents {
            train_keys.insert(s.clone());
            a_lines.push(derive_sentence(s, aux)?);
            b_lines.push(derive_sentence(s, base)?);
        }
        let stem = format!("para.{aux_name}-{}", base.name);
        let pa = dir.join(format!("{stem}.{aux_name}"));
        let pb = dir.join(format!("{stem}.{}", base.name));
        write_lines(&pa, &a_lines)?;
        write_lines(&pb, &b_lines)?;
        manifest.datasets.push(ManifestDataset {
            id: stem,
            kind: ManifestKind::Parallel,
            langs: vec![aux_name.clone(), base.name.clone()],
            paths: vec![pa, pb],
            synthetic: false,
        });
    }

    let mut held_out: HashSet<Vec<u32>> = HashSet::new();
    for (split, n) in [("test", cfg.test_lines), ("dev", cfg.dev_lines)] {
        if n == 0 {
            continue;
        }
        let pool = gen_base_corpus(&cfg.corpus_spec(20 * n + 1000, &format!("heldout/{split}")))?;
        let chosen: Vec<Vec<u32>> = pool
            .into_iter()
            .filter(|s| !train_keys.contains(s) && held_out.insert(s.clone()))
            .take(n)
            .collect();
        if chosen.len() < n {
            return Err(Error::Data(format!(
                "could not find {n} unseen {split} sentences; enlarge vocab_types or lengths"
            )));
        }
        let mut files: BTreeMap<&str, std::path::PathBuf> = BTreeMap::new();
        for lang in &langs {
            let lines = chosen
                .iter()
                .map(|s| derive_sentence(s, lang))
                .collect::<Result<Vec<_>>>()?;
            let path = dir.join(format!("{split}.{}.txt", lang.name));
            write_lines(&path, &lines)?;
            files.insert(&lang.name, path);
        }
        for a in &langs {
            for b in &langs {
                if a.name != b.name {
                    manifest.testsets.push(ManifestTestSet {
                        split: split.into(),
                        src_lang: a.name.clone(),
                        tgt_lang: b.name.clone(),
                        src: files[a.name.as_str()].clone(),
                        reference: files[b.name.as_str()].clone(),
                    });
                }
            }
        }
    }

    let spec_text = toml::to_string(&FamilyFile {
        languages: langs.clone(),
    })
    .map_err(|e| Error::Data(e.to_string()))?;
    crate::pipeline::write_atomic(&dir.join("languages.toml"), spec_text.as_bytes())?;
    let cfg_text = toml::to_string(cfg).map_err(|e| Error::Data(e.to_string()))?;
    crate::pipeline::write_atomic(&dir.join("benchmark.toml"), cfg_text.as_bytes())?;
    manifest.save(&dir.join("manifest.toml"))?;
    Ok(manifest)
}

#[derive(Serialize, Deserialize)]
struct FamilyFile {
    languages: Vec<LanguageSpec>,
}

/// Reads the language family written next to a benchmark manifest.
pub fn load_languages(path: &Path) -> Result<Vec<LanguageSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut f: FamilyFile = toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for l in &mut f.languages {
        l.reindex();
    }
    Ok(f.languages)
}
