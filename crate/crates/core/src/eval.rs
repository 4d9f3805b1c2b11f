//! Corpus BLEU and translation reports.
//!
//! Scores follow sacreBLEU's defaults: case-sensitive BLEU-4 against one
//! reference, `13a` tokenization, and exponential smoothing. Under that
//! smoothing, the k-th n-gram order (counting from the lowest) that has no
//! match at all gets precision `1 / (2^k * total_n)` instead of zero, where
//! `total_n` is the number of hypothesis n-grams of that order. An order
//! with no hypothesis n-grams at all makes the score zero.

use std::collections::HashMap;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::LangId;
use crate::{Error, Result};

pub const MAX_ORDER: usize = 4;

static RE_PUNCT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").expect("valid regex"));
static RE_PERIOD_COMMA_AFTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([^0-9])([\.,])").expect("valid regex"));
static RE_PERIOD_COMMA_BEFORE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([\.,])([^0-9])").expect("valid regex"));
static RE_DASH: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([0-9])(-)").expect("valid regex"));

/// The `13a` tokenizer: unescapes a few HTML entities, pads punctuation and
/// symbols with spaces (periods and commas stay attached between digits,
/// dashes split after a digit), then splits on whitespace.
pub fn tokenize_13a(text: &str) -> Vec<String> {
    let mut line = text.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if line.contains('&') {
        line = line
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let line = format!(" {line} ");
    let line = RE_PUNCT.replace_all(&line, " ${1} ");
    let line = RE_PERIOD_COMMA_AFTER.replace_all(&line, "${1} ${2} ");
    let line = RE_PERIOD_COMMA_BEFORE.replace_all(&line, " ${1} ${2}");
    let line = RE_DASH.replace_all(&line, "${1} ${2} ");
    line.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BleuMode {
    /// `13a` tokenization of detokenized text.
    Detok13a,
    /// Text is already space-tokenized.
    Pretokenized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    /// Smoothed n-gram precisions in percent, orders 1 to 4.
    pub precisions: [f64; MAX_ORDER],
    pub bp: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Sufficient statistics of corpus BLEU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add_sentence(&mut self, hyp: &[String], reference: &[String]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let mut ref_counts: HashMap<&[String], usize> = HashMap::new();
            for w in reference.windows(n) {
                *ref_counts.entry(w).or_default() += 1;
            }
            let mut hyp_counts: HashMap<&[String], usize> = HashMap::new();
            for w in hyp.windows(n) {
                *hyp_counts.entry(w).or_default() += 1;
            }
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
            self.matches[n - 1] += hyp_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }

    pub fn score(&self) -> BleuScore {
        let bp = if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        let mut precisions = [0.0; MAX_ORDER];
        let mut smooth = 1.0;
        for n in 0..MAX_ORDER {
            if self.totals[n] == 0 {
                break;
            }
            precisions[n] = if self.matches[n] == 0 {
                smooth *= 2.0;
                100.0 / (smooth * self.totals[n] as f64)
            } else {
                100.0 * self.matches[n] as f64 / self.totals[n] as f64
            };
        }
        let score = if self.hyp_len == 0 || precisions.contains(&0.0) {
            0.0
        } else {
            let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
            (bp * mean_log.exp()).min(100.0)
        };
        BleuScore {
            score,
            precisions,
            bp,
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
        }
    }
}

fn tokens(text: &str, mode: BleuMode) -> Vec<String> {
    match mode {
        BleuMode::Detok13a => tokenize_13a(text),
        BleuMode::Pretokenized => text.split_whitespace().map(str::to_string).collect(),
    }
}

/// Corpus-level BLEU of `hyps` against one reference each.
pub fn bleu<S: AsRef<str>, T: AsRef<str>>(hyps: &[S], refs: &[T], mode: BleuMode) -> Result<BleuScore> {
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Data("BLEU over an empty corpus".into()));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        stats.add_sentence(&tokens(h.as_ref(), mode), &tokens(r.as_ref(), mode));
    }
    Ok(stats.score())
}

/// Anything that turns sentences of one language into another.
pub trait Translator {
    fn translate(&self, srcs: &[String], src_lang: LangId, tgt_lang: LangId) -> Result<Vec<String>>;
}

/// A held-out source corpus with references, in one direction.
#[derive(Clone, Debug, PartialEq)]
pub struct TestSet {
    pub src_lang: LangId,
    pub tgt_lang: LangId,
    /// `Src-Tgt` label, e.g. `X1-En`.
    pub direction: String,
    pub src: Vec<String>,
    pub refs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub direction: String,
    pub score: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
    pub bp: f64,
}

/// Per-direction BLEU table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn score(&self, direction: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.direction == direction).map(|r| r.score)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("direction\tscore\tp1\tp2\tp3\tp4\tbp\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.4}\n",
                r.direction, r.score, r.p1, r.p2, r.p3, r.p4, r.bp
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `<stem>.tsv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        crate::pipeline::write_atomic(&dir.join(format!("{stem}.tsv")), self.to_tsv().as_bytes())?;
        crate::pipeline::write_atomic(&dir.join(format!("{stem}.json")), self.to_json().as_bytes())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("report {}: {e}", path.display())))
    }
}

/// Translates every test set and scores it against its references.
pub fn evaluate<T: Translator + ?Sized>(model: &T, testsets: &[TestSet], mode: BleuMode) -> Result<Report> {
    let mut rows = Vec::with_capacity(testsets.len());
    for t in testsets {
        if t.src_lang == t.tgt_lang {
            return Err(Error::Data(format!("direction {} translates into itself", t.direction)));
        }
        let hyps = model.translate(&t.src, t.src_lang, t.tgt_lang)?;
        let s = bleu(&hyps, &t.refs, mode)?;
        rows.push(ReportRow {
            direction: t.direction.clone(),
            score: s.score,
            p1: s.precisions[0],
            p2: s.precisions[1],
            p3: s.precisions[2],
            p4: s.precisions[3],
            bp: s.bp,
        });
    }
    Ok(Report { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenizer_13a_examples() {
        assert_eq!(tokenize_13a("Hello, world!"), toks(&["Hello", ",", "world", "!"]));
        assert!(tokenize_13a("").is_empty());
        assert_eq!(tokenize_13a("abc"), toks(&["abc"]));
        assert_eq!(tokenize_13a("3.14 and 1,000"), toks(&["3.14", "and", "1,000"]));
        assert_eq!(tokenize_13a("end."), toks(&["end", "."]));
        assert_eq!(tokenize_13a("1990-2000"), toks(&["1990", "-", "2000"]));
        assert_eq!(tokenize_13a("a&amp;b"), toks(&["a", "&", "b"]));
        assert_eq!(tokenize_13a("it's (x)"), toks(&["it's", "(", "x", ")"]));
    }

    #[test]
    fn identical_corpus_scores_100() {
        let c = ["the cat sat on the mat", "a b c d e"];
        let s = bleu(&c, &c, BleuMode::Detok13a).unwrap();
        assert_eq!(s.score, 100.0);
        assert_eq!(s.bp, 1.0);
    }

    #[test]
    fn no_overlap_is_near_zero() {
        let hyps = vec!["a b c d e"; 10];
        let refs = vec!["f g h i j"; 10];
        let s = bleu(&hyps, &refs, BleuMode::Pretokenized).unwrap();
        assert!(s.score < 1.0 && s.score > 0.0);
        assert_eq!(s.precisions[0], 100.0 / (2.0 * 50.0));
        assert_eq!(s.precisions[3], 100.0 / (16.0 * 20.0));
    }

    #[test]
    fn short_hypothesis_example() {
        // 1-grams 5/5, 2-grams 3/4, 3-grams 2/3, 4-grams 1/2; lengths 5 vs 6.
        let s = bleu(
            &["the cat sat on mat"],
            &["the cat sat on the mat"],
            BleuMode::Pretokenized,
        )
        .unwrap();
        let expected = (1.0 - 6.0 / 5.0f64).exp() * ((1.0 * 0.75 * (2.0 / 3.0) * 0.5f64).powf(0.25)) * 100.0;
        assert!((s.score - expected).abs() < 1e-9);
    }

    #[test]
    fn empty_hypothesis_scores_zero() {
        let s = bleu(&[""], &["a b"], BleuMode::Pretokenized).unwrap();
        assert_eq!(s.score, 0.0);
        assert!(bleu(&["a"], &["a", "b"], BleuMode::Pretokenized).is_err());
    }

    #[test]
    fn report_formats() {
        struct Identity;
        impl Translator for Identity {
            fn translate(&self, srcs: &[String], _: LangId, _: LangId) -> Result<Vec<String>> {
                Ok(srcs.to_vec())
            }
        }
        assert!(evaluate(&Identity, &[], BleuMode::Pretokenized)
            .unwrap()
            .rows
            .is_empty());
        let t = TestSet {
            src_lang: LangId(1),
            tgt_lang: LangId(0),
            direction: "X1-En".into(),
            src: vec!["a b c d".into(), "e f g h i".into()],
            refs: vec!["a b c d".into(), "e f g h i".into()],
        };
        let r = evaluate(&Identity, &[t], BleuMode::Pretokenized).unwrap();
        assert_eq!(r.score("X1-En"), Some(100.0));
        let tsv = r.to_tsv();
        assert!(tsv.starts_with("direction\tscore\tp1\tp2\tp3\tp4\tbp\n"));
        assert!(tsv.contains("X1-En\t100.00"));
        let back: Report = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
