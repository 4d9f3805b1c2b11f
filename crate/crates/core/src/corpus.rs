//! Languages, datasets, the manifest file, and the three batch samplers:
//! the stage 1/2 dataset chooser, uniform batch draws, and stage 3
//! length-bucketed batches.

use std::path::{Path, PathBuf};

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tokenizer::{TokenSeq, PAD};
use crate::{Error, Result};

/// Index of a language in the experiment's language list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LangId(pub u16);

impl LangId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Language {
    pub name: String,
    pub is_english: bool,
    pub is_target: bool,
}

/// The language inventory; ids are positions in this list.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Languages {
    langs: Vec<Language>,
}

impl Languages {
    pub fn new(langs: Vec<Language>) -> Result<Self> {
        let mut problems = Vec::new();
        for (i, l) in langs.iter().enumerate() {
            if langs[..i].iter().any(|o| o.name == l.name) {
                problems.push(format!("duplicate language {}", l.name));
            }
        }
        let english = langs.iter().filter(|l| l.is_english).count();
        if english != 1 {
            problems.push(format!("exactly one language must be English, found {english}"));
        }
        if langs.iter().any(|l| l.is_english && l.is_target) {
            problems.push("English cannot be a target language".into());
        }
        if langs.len() > u16::MAX as usize {
            problems.push("too many languages".into());
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(Self { langs })
    }

    pub fn len(&self) -> usize {
        self.langs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.langs.is_empty()
    }

    pub fn get(&self, id: LangId) -> &Language {
        &self.langs[id.index()]
    }

    pub fn name(&self, id: LangId) -> &str {
        &self.langs[id.index()].name
    }

    pub fn id(&self, name: &str) -> Result<LangId> {
        self.langs
            .iter()
            .position(|l| l.name == name)
            .map(|i| LangId(i as u16))
            .ok_or_else(|| Error::Data(format!("unknown language {name:?}")))
    }

    pub fn english(&self) -> LangId {
        LangId(self.langs.iter().position(|l| l.is_english).expect("validated") as u16)
    }

    pub fn targets(&self) -> Vec<LangId> {
        self.ids().filter(|&l| self.get(l).is_target).collect()
    }

    pub fn ids(&self) -> impl Iterator<Item = LangId> + '_ {
        (0..self.langs.len()).map(|i| LangId(i as u16))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mono { lang: LangId },
    Parallel { src: LangId, tgt: LangId, synthetic: bool },
}

impl DatasetKind {
    pub fn is_mono(&self) -> bool {
        matches!(self, DatasetKind::Mono { .. })
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self, DatasetKind::Parallel { synthetic: true, .. })
    }

    pub fn touches(&self, lang: LangId) -> bool {
        match *self {
            DatasetKind::Mono { lang: l } => l == lang,
            DatasetKind::Parallel { src, tgt, .. } => src == lang || tgt == lang,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Items {
    Mono(Vec<Vec<u32>>),
    Parallel(Vec<(Vec<u32>, Vec<u32>)>),
}

/// A registered, tokenized corpus. Item languages are those of `kind`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub kind: DatasetKind,
    items: Items,
}

impl Dataset {
    pub fn mono(id: impl Into<String>, lang: LangId, items: Vec<Vec<u32>>) -> Self {
        Self {
            id: id.into(),
            kind: DatasetKind::Mono { lang },
            items: Items::Mono(items),
        }
    }

    pub fn parallel(
        id: impl Into<String>,
        src: LangId,
        tgt: LangId,
        synthetic: bool,
        items: Vec<(Vec<u32>, Vec<u32>)>,
    ) -> Self {
        Self {
            id: id.into(),
            kind: DatasetKind::Parallel { src, tgt, synthetic },
            items: Items::Parallel(items),
        }
    }

    pub fn items(&self) -> &Items {
        &self.items
    }

    pub fn len(&self) -> usize {
        match &self.items {
            Items::Mono(v) => v.len(),
            Items::Parallel(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Longest side of item `i`, in pieces.
    pub fn item_len(&self, i: usize) -> usize {
        match &self.items {
            Items::Mono(v) => v[i].len(),
            Items::Parallel(v) => v[i].0.len().max(v[i].1.len()),
        }
    }

    pub fn mono_items(&self) -> Option<&[Vec<u32>]> {
        match &self.items {
            Items::Mono(v) => Some(v),
            Items::Parallel(_) => None,
        }
    }

    pub fn parallel_items(&self) -> Option<&[(Vec<u32>, Vec<u32>)]> {
        match &self.items {
            Items::Parallel(v) => Some(v),
            Items::Mono(_) => None,
        }
    }

    /// Language-tagged view of a monolingual item.
    pub fn token_seq(&self, i: usize) -> Option<TokenSeq> {
        match (&self.items, self.kind) {
            (Items::Mono(v), DatasetKind::Mono { lang }) => Some(TokenSeq::new(v[i].clone(), lang)),
            _ => None,
        }
    }

    /// Items at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        match &self.items {
            Items::Mono(v) => Batch::Mono(indices.iter().map(|&i| v[i].clone()).collect()),
            Items::Parallel(v) => Batch::Parallel(indices.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

/// Examples drawn from one dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    Mono(Vec<Vec<u32>>),
    Parallel(Vec<(Vec<u32>, Vec<u32>)>),
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Mono(v) => v.len(),
            Batch::Parallel(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// PAD-padded matrices: one for monolingual batches, source and target
    /// for parallel ones.
    pub fn padded(&self) -> Vec<PaddedBatch> {
        match self {
            Batch::Mono(v) => vec![PaddedBatch::from_seqs(v)],
            Batch::Parallel(v) => {
                let (a, b): (Vec<_>, Vec<_>) = v.iter().cloned().unzip();
                vec![PaddedBatch::from_seqs(&a), PaddedBatch::from_seqs(&b)]
            }
        }
    }
}

/// Row-major `rows x width` id matrix, right-padded with PAD.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    pub ids: Vec<u32>,
    pub lens: Vec<usize>,
    pub width: usize,
}

impl PaddedBatch {
    pub fn from_seqs<T: AsRef<[u32]>>(seqs: &[T]) -> Self {
        let width = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = vec![PAD; seqs.len() * width];
        let mut lens = Vec::with_capacity(seqs.len());
        for (r, s) in seqs.iter().enumerate() {
            let s = s.as_ref();
            ids[r * width..r * width + s.len()].copy_from_slice(s);
            lens.push(s.len());
        }
        Self { ids, lens, width }
    }

    pub fn rows(&self) -> usize {
        self.lens.len()
    }

    /// `false` at padding positions.
    pub fn valid(&self) -> Vec<bool> {
        let mut v = vec![false; self.ids.len()];
        for (r, &len) in self.lens.iter().enumerate() {
            v[r * self.width..r * self.width + len].fill(true);
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPolicy {
    pub p_parallel: f64,
    pub temperature: f64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            p_parallel: 0.5,
            temperature: 5.0,
        }
    }
}

impl SamplingPolicy {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.p_parallel) {
            out.push(format!("p_parallel must lie in [0, 1], got {}", self.p_parallel));
        }
        if !(self.temperature > 0.0) {
            out.push(format!("temperature must be > 0, got {}", self.temperature));
        }
        out
    }
}

/// `w_i ∝ (n_i / Σn)^(1/T)`, normalized.
pub fn temperature_weights(sizes: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Data("temperature weights over no datasets".into()));
    }
    if sizes.contains(&0) {
        return Err(Error::Data("temperature weights need non-empty datasets".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::config(format!("temperature must be > 0, got {temperature}")));
    }
    let total: f64 = sizes.iter().map(|&n| n as f64).sum();
    let raw: Vec<f64> = sizes
        .iter()
        .map(|&n| (n as f64 / total).powf(1.0 / temperature))
        .collect();
    let z: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / z).collect())
}

/// Dataset choice of stages 1 and 2: a Bernoulli(`p_parallel`) type draw,
/// then uniform over monolingual datasets or temperature-weighted over
/// parallel ones. Returns an index into `datasets`.
pub fn choose_dataset<R: Rng>(datasets: &[Dataset], policy: &SamplingPolicy, rng: &mut R) -> Result<usize> {
    let mono: Vec<usize> = (0..datasets.len()).filter(|&i| datasets[i].kind.is_mono()).collect();
    let par: Vec<usize> = (0..datasets.len()).filter(|&i| !datasets[i].kind.is_mono()).collect();
    let parallel = rng.random::<f64>() < policy.p_parallel;
    if parallel {
        if par.is_empty() {
            return Err(Error::Data("parallel branch chosen but no parallel datasets".into()));
        }
        let sizes: Vec<usize> = par.iter().map(|&i| datasets[i].len()).collect();
        let w = temperature_weights(&sizes, policy.temperature)?;
        let dist = WeightedIndex::new(&w).map_err(|e| Error::Data(e.to_string()))?;
        Ok(par[dist.sample(rng)])
    } else {
        if mono.is_empty() {
            return Err(Error::Data(
                "monolingual branch chosen but no monolingual datasets".into(),
            ));
        }
        Ok(mono[rng.random_range(0..mono.len())])
    }
}

/// `batch_size` examples drawn uniformly with replacement.
pub fn draw_batch<R: Rng>(dataset: &Dataset, batch_size: usize, rng: &mut R) -> Result<Batch> {
    if dataset.is_empty() {
        return Err(Error::Data(format!("dataset {} is empty", dataset.id)));
    }
    let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..dataset.len())).collect();
    Ok(dataset.select(&idx))
}

/// Groups item indices into batches of similar length whose padded size
/// (`items x longest item`) stays within `max_tokens`. Buckets span
/// `bucket_width` lengths and are filled greedily in dataset order; every
/// item lands in exactly one batch.
pub fn bucket_batches(dataset: &Dataset, max_tokens: usize, bucket_width: usize) -> Result<Vec<Vec<usize>>> {
    if bucket_width == 0 {
        return Err(Error::config("bucket_width must be >= 1"));
    }
    let mut buckets: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..dataset.len() {
        let len = dataset.item_len(i).max(1);
        if len > max_tokens {
            return Err(Error::Data(format!(
                "item {i} of {} has {len} pieces, over the {max_tokens}-token batch budget",
                dataset.id
            )));
        }
        buckets.entry((len - 1) / bucket_width).or_default().push(i);
    }
    let mut out = Vec::new();
    for (_, items) in buckets {
        let mut cur: Vec<usize> = Vec::new();
        let mut cur_max = 0;
        for i in items {
            let len = dataset.item_len(i).max(1);
            let new_max = cur_max.max(len);
            if !cur.is_empty() && (cur.len() + 1) * new_max > max_tokens {
                out.push(std::mem::take(&mut cur));
                cur_max = 0;
            }
            cur_max = cur_max.max(len);
            cur.push(i);
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestKind {
    Mono,
    Parallel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDataset {
    pub id: String,
    pub kind: ManifestKind,
    /// One language for mono, `[src, tgt]` for parallel.
    pub langs: Vec<String>,
    /// One file for mono, two aligned files for parallel.
    pub paths: Vec<PathBuf>,
    #[serde(default)]
    pub synthetic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTestSet {
    /// `dev` or `test`.
    pub split: String,
    pub src_lang: String,
    pub tgt_lang: String,
    pub src: PathBuf,
    #[serde(rename = "ref")]
    pub reference: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Language names in id order.
    pub languages: Vec<String>,
    #[serde(default, rename = "dataset")]
    pub datasets: Vec<ManifestDataset>,
    #[serde(default, rename = "testset")]
    pub testsets: Vec<ManifestTestSet>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest =
            toml::from_str(&text).map_err(|e| Error::Data(format!("manifest {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut m.datasets {
            for p in &mut d.paths {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        for t in &mut m.testsets {
            for p in [&mut t.src, &mut t.reference] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(m)
    }

    /// Writes the manifest with paths relative to its own directory where
    /// possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut m = self.clone();
        let rel = |p: &mut PathBuf| {
            if let Ok(r) = p.strip_prefix(base) {
                *p = r.to_path_buf();
            }
        };
        for d in &mut m.datasets {
            d.paths.iter_mut().for_each(rel);
        }
        for t in &mut m.testsets {
            rel(&mut t.src);
            rel(&mut t.reference);
        }
        let text = toml::to_string(&m).map_err(|e| Error::Data(e.to_string()))?;
        crate::pipeline::write_atomic(path, text.as_bytes())
    }

    /// Structural checks; every violation is reported.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, d) in self.datasets.iter().enumerate() {
            if self.datasets[..i].iter().any(|o| o.id == d.id) {
                out.push(format!("duplicate dataset id {}", d.id));
            }
            let want = match d.kind {
                ManifestKind::Mono => 1,
                ManifestKind::Parallel => 2,
            };
            if d.langs.len() != want || d.paths.len() != want {
                out.push(format!(
                    "dataset {} needs {want} language(s) and path(s), has {} and {}",
                    d.id,
                    d.langs.len(),
                    d.paths.len()
                ));
            }
            if d.synthetic && d.kind == ManifestKind::Mono {
                out.push(format!("dataset {} is synthetic but monolingual", d.id));
            }
            for l in &d.langs {
                if !self.languages.contains(l) {
                    out.push(format!("dataset {} uses undeclared language {l}", d.id));
                }
            }
            if d.langs.len() == 2 && d.langs[0] == d.langs[1] {
                out.push(format!("parallel dataset {} pairs a language with itself", d.id));
            }
        }
        for t in &self.testsets {
            for l in [&t.src_lang, &t.tgt_lang] {
                if !self.languages.contains(l) {
                    out.push(format!("test set uses undeclared language {l}"));
                }
            }
        }
        out
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut text = String::with_capacity(lines.iter().map(|l| l.as_ref().len() + 1).sum());
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    crate::pipeline::write_atomic(path, text.as_bytes())
}
