//! Byte-pair-encoding subword vocabulary.
//!
//! Words are split on whitespace and carry a leading `▁` marker, so decoding
//! restores word boundaries exactly. Merges are learned greedily: the most
//! frequent adjacent pair wins, ties go to the lexicographically smallest
//! pair.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::LangId;
use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<mask>"];
const MARKER: char = '\u{2581}';
const HEADER_PREFIX: &str = "#munmt-vocab v1 size=";

/// A sentence as piece ids, tagged with its language.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub lang: LangId,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>, lang: LangId) -> Self {
        Self { ids, lang }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// NFC, control characters removed, whitespace runs collapsed to one space.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().filter(|c| c.is_whitespace() || !c.is_control()).collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    /// (left id, right id) -> (rank, merged id)
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl Vocab {
    fn from_parts(pieces: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        if pieces.len() < SPECIALS.len() || pieces[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Vocab("special pieces missing or out of order".into()));
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate piece {p:?}")));
            }
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (r, (a, b)) in merges.iter().enumerate() {
            let ids = (index.get(a), index.get(b), index.get(&format!("{a}{b}")));
            let (Some(&ia), Some(&ib), Some(&im)) = ids else {
                return Err(Error::Vocab(format!("merge {a} {b} refers to unknown pieces")));
            };
            ranks.entry((ia, ib)).or_insert((r, im));
        }
        Ok(Self {
            pieces,
            index,
            merges,
            ranks,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    /// Learns a vocabulary of exactly `vocab_size` pieces from the
    /// concatenation of `corpora`. When `max_lines_per_corpus` is set, each
    /// corpus is subsampled to that many lines with a `seed`-driven shuffle.
    pub fn train<S: AsRef<str>>(
        corpora: &[Vec<S>],
        vocab_size: usize,
        seed: u64,
        max_lines_per_corpus: Option<usize>,
    ) -> Result<Self> {
        if corpora.is_empty() {
            return Err(Error::Vocab("no corpora to learn a vocabulary from".into()));
        }
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for (ci, corpus) in corpora.iter().enumerate() {
            let mut order: Vec<usize> = (0..corpus.len()).collect();
            if let Some(cap) = max_lines_per_corpus {
                if cap < order.len() {
                    let mut rng = crate::rng::stream(seed, &format!("vocab-sample/{ci}"));
                    order.shuffle(&mut rng);
                    order.truncate(cap);
                    order.sort_unstable();
                }
            }
            for i in order {
                for w in normalize(corpus[i].as_ref()).split(' ').filter(|w| !w.is_empty()) {
                    *counts.entry(format!("{MARKER}{w}")).or_default() += 1;
                }
            }
        }
        if counts.is_empty() {
            return Err(Error::Vocab("corpora contain no words".into()));
        }

        let mut chars: Vec<char> = counts.keys().flat_map(|w| w.chars()).collect();
        chars.sort_unstable();
        chars.dedup();
        let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        pieces.extend(chars.iter().map(|c| c.to_string()));
        if vocab_size < pieces.len() {
            return Err(Error::Vocab(format!(
                "vocab_size {vocab_size} is below the {} special and character pieces",
                pieces.len()
            )));
        }
        let mut known: HashSet<String> = pieces.iter().cloned().collect();

        let mut words: Vec<(Vec<String>, u64)> = counts
            .into_iter()
            .map(|(w, c)| (w.chars().map(|ch| ch.to_string()).collect(), c))
            .collect();
        let mut merges = Vec::new();
        while pieces.len() < vocab_size {
            let mut pair_counts: HashMap<(&str, &str), u64> = HashMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    *pair_counts.entry((&w[0], &w[1])).or_default() += c;
                }
            }
            let best = pair_counts
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
            let Some(((a, b), _)) = best else {
                return Err(Error::Vocab(format!(
                    "vocab_size {vocab_size} unattainable: corpus supports only {} pieces",
                    pieces.len()
                )));
            };
            let (a, b) = (a.to_string(), b.to_string());
            let merged = format!("{a}{b}");
            for (syms, _) in words.iter_mut() {
                apply_merge(syms, &a, &b, &merged);
            }
            if known.insert(merged.clone()) {
                pieces.push(merged);
            }
            merges.push((a, b));
        }
        Self::from_parts(pieces, merges)
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut buf = [0u8; 4];
        let mut syms: Vec<u32> = word
            .chars()
            .map(|c| self.id(c.encode_utf8(&mut buf)).unwrap_or(UNK))
            .collect();
        loop {
            let mut best: Option<(usize, usize, u32)> = None;
            for (pos, w) in syms.windows(2).enumerate() {
                if let Some(&(r, merged)) = self.ranks.get(&(w[0], w[1])) {
                    if best.is_none_or(|(br, _, _)| r < br) {
                        best = Some((r, pos, merged));
                    }
                }
            }
            let Some((_, pos, merged)) = best else { break };
            syms[pos] = merged;
            syms.remove(pos + 1);
        }
        out.extend_from_slice(&syms);
    }

    /// Encodes normalized `text`. Characters outside the vocabulary map to
    /// the unknown piece. Empty text is an error.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let norm = normalize(text);
        if norm.is_empty() {
            return Err(Error::Vocab("cannot encode an empty line".into()));
        }
        let mut out = Vec::new();
        for w in norm.split(' ') {
            self.encode_word(&format!("{MARKER}{w}"), &mut out);
        }
        Ok(out)
    }

    /// Text for `ids`; padding, BOS and EOS are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                UNK => s.push('\u{2047}'),
                MASK => s.push_str("<mask>"),
                _ => match self.piece(id) {
                    Some(p) => s.push_str(p),
                    None => return Err(Error::Vocab(format!("id {id} outside vocabulary of {}", self.len()))),
                },
            }
        }
        Ok(s.replace(MARKER, " ").trim_start().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER_PREFIX}{}\n", self.len());
        for (i, p) in self.pieces.iter().enumerate() {
            let _ = writeln!(s, "{p}\t{i}");
        }
        s.push_str("#merges\n");
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let size: usize = header
            .strip_prefix(HEADER_PREFIX)
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::Vocab(format!("bad vocab header {header:?}")))?;
        let mut pieces = Vec::with_capacity(size);
        let mut in_merges = false;
        let mut merges = Vec::new();
        for line in lines {
            if !in_merges {
                if line == "#merges" {
                    in_merges = true;
                    continue;
                }
                let (piece, id) = line
                    .rsplit_once('\t')
                    .ok_or_else(|| Error::Vocab(format!("bad piece line {line:?}")))?;
                if id.parse::<usize>().ok() != Some(pieces.len()) {
                    return Err(Error::Vocab(format!("piece ids not dense at {line:?}")));
                }
                pieces.push(piece.to_string());
            } else {
                let (a, b) = line
                    .split_once(' ')
                    .ok_or_else(|| Error::Vocab(format!("bad merge line {line:?}")))?;
                merges.push((a.to_string(), b.to_string()));
            }
        }
        if !in_merges {
            return Err(Error::Vocab("missing #merges section".into()));
        }
        if pieces.len() != size {
            return Err(Error::Vocab(format!(
                "header promises {size} pieces, found {}",
                pieces.len()
            )));
        }
        Self::from_parts(pieces, merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

fn apply_merge(syms: &mut Vec<String>, a: &str, b: &str, merged: &str) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == a && syms[i + 1] == b {
            syms[i] = merged.to_string();
            syms.remove(i + 1);
        }
        i += 1;
    }
}

/// Anything with one or more token sides that must fit a length budget.
pub trait SideLengths {
    fn max_side_len(&self) -> usize;
}

impl SideLengths for Vec<u32> {
    fn max_side_len(&self) -> usize {
        self.len()
    }
}

impl SideLengths for TokenSeq {
    fn max_side_len(&self) -> usize {
        self.len()
    }
}

impl<A: SideLengths, B: SideLengths> SideLengths for (A, B) {
    fn max_side_len(&self) -> usize {
        self.0.max_side_len().max(self.1.max_side_len())
    }
}

/// Keeps the items whose every side is at most `max_pieces` long.
pub fn filter_by_length<T: SideLengths>(items: Vec<T>, max_pieces: usize) -> Vec<T> {
    items.into_iter().filter(|it| it.max_side_len() <= max_pieces).collect()
}
