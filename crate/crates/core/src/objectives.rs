//! Training losses: teacher-forced cross-entropy, masked-segment
//! reconstruction, on-the-fly back-translation and cross-translation.
//!
//! Every loss takes a batch and records its computation on a caller-owned
//! graph. Encoder inputs are the sentence followed by EOS; decoder inputs
//! are BOS followed by the target, scored against the target followed by
//! EOS. Losses average over all non-padding target positions of the batch.
//! Translations produced inside back- and cross-translation come from a
//! separate inference pass, so no gradient flows through them.

use rand::Rng;

use crate::corpus::{LangId, PaddedBatch};
use crate::model::{body, ModelParams};
use crate::tensor::{Graph, Scalar, Var};
use crate::tokenizer::{BOS, EOS, MASK};
use crate::{Error, Result};

/// Where a masked segment sits in a sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub start: usize,
    pub length: usize,
    pub mask_token: u32,
}

/// Chooses and applies a mask. The segment covers `max(1, l / 2)` pieces;
/// it starts at 0 with probability 0.2, right after the first half with
/// probability 0.2, and otherwise uniformly over every valid start.
pub fn mass_mask<R: Rng>(x: &[u32], rng: &mut R) -> Result<(Vec<u32>, Vec<u32>, MaskSpec)> {
    let l = x.len();
    if l < 2 {
        return Err(Error::Data(format!("masking needs at least 2 pieces, got {l}")));
    }
    let length = (l / 2).max(1);
    let r: f64 = rng.random();
    let start = if r < 0.2 {
        0
    } else if r < 0.4 {
        l / 2
    } else {
        rng.random_range(0..=l - length)
    };
    let spec = MaskSpec {
        start,
        length,
        mask_token: MASK,
    };
    let (masked, segment) = apply_mask(x, &spec)?;
    Ok((masked, segment, spec))
}

/// Masked input and target segment for a fixed `spec`.
pub fn apply_mask(x: &[u32], spec: &MaskSpec) -> Result<(Vec<u32>, Vec<u32>)> {
    if spec.length == 0 || spec.start + spec.length > x.len() {
        return Err(Error::Data(format!(
            "mask [{}, {}) outside a {}-piece sentence",
            spec.start,
            spec.start + spec.length,
            x.len()
        )));
    }
    let range = spec.start..spec.start + spec.length;
    let segment = x[range.clone()].to_vec();
    let mut masked = x.to_vec();
    masked[range].fill(spec.mask_token);
    Ok((masked, segment))
}

fn with_eos(x: &[u32]) -> Vec<u32> {
    let mut v = x.to_vec();
    v.push(EOS);
    v
}

fn with_bos(x: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(x.len() + 1);
    v.push(BOS);
    v.extend_from_slice(x);
    v
}

/// Mean token negative log-likelihood of `tgt` given `src`, teacher forced
/// and conditioned on `tgt_lang`.
pub fn cross_entropy_loss<S: Scalar, T: AsRef<[u32]>>(
    params: &ModelParams<S>,
    g: &mut Graph<S>,
    src: &[T],
    tgt: &[T],
    tgt_lang: LangId,
) -> Result<Var> {
    if src.len() != tgt.len() || src.is_empty() {
        return Err(Error::Data(format!(
            "cross-entropy batch of {} sources and {} targets",
            src.len(),
            tgt.len()
        )));
    }
    if tgt.iter().any(|t| t.as_ref().is_empty()) {
        return Err(Error::Data("cross-entropy with an empty target".into()));
    }
    let enc_in: Vec<Vec<u32>> = src.iter().map(|s| with_eos(s.as_ref())).collect();
    let dec_in: Vec<Vec<u32>> = tgt.iter().map(|t| with_bos(t.as_ref())).collect();
    let gold: Vec<Vec<u32>> = tgt.iter().map(|t| with_eos(t.as_ref())).collect();
    let enc_batch = PaddedBatch::from_seqs(&enc_in);
    let dec_batch = PaddedBatch::from_seqs(&dec_in);
    let gold_batch = PaddedBatch::from_seqs(&gold);
    let enc = params.encode(g, &enc_batch)?;
    let logits = params.decode_logits(g, &enc, &dec_batch, tgt_lang)?;
    let targets: Vec<usize> = gold_batch.ids.iter().map(|&i| i as usize).collect();
    g.cross_entropy(logits, &targets, &gold_batch.valid())
}

/// Masked-segment reconstruction: each sentence is masked independently,
/// and only the segment is scored, with the decoder conditioned on `lang`.
pub fn mass_loss<S: Scalar, R: Rng>(
    params: &ModelParams<S>,
    g: &mut Graph<S>,
    xs: &[Vec<u32>],
    lang: LangId,
    rng: &mut R,
) -> Result<Var> {
    let mut masked = Vec::with_capacity(xs.len());
    let mut segments = Vec::with_capacity(xs.len());
    for x in xs {
        let (m, s, _) = mass_mask(x, rng)?;
        masked.push(m);
        segments.push(s);
    }
    cross_entropy_loss(params, g, &masked, &segments, lang)
}

/// Outcome of a loss that decodes first. Rows whose translation came out
/// empty are skipped; when every row is skipped there is no loss.
#[derive(Clone, Debug)]
pub struct DecodedLoss {
    pub loss: Option<Var>,
    pub used: usize,
    pub skipped: usize,
}

/// Decode length budget for a batch whose longest source has `src_len`
/// pieces.
pub fn decode_budget(src_len: usize, max_positions: usize) -> usize {
    (2 * src_len + 10).min(max_positions.saturating_sub(1)).max(1)
}

fn translate_nonempty<S: Scalar>(
    params: &ModelParams<S>,
    srcs: &[Vec<u32>],
    lang: LangId,
    max_positions: usize,
) -> Result<Vec<Option<Vec<u32>>>> {
    let enc_in: Vec<Vec<u32>> = srcs.iter().map(|s| with_eos(s)).collect();
    let longest = enc_in.iter().map(Vec::len).max().unwrap_or(1);
    let out = params.greedy_decode(&enc_in, lang, decode_budget(longest, max_positions))?;
    Ok(out
        .iter()
        .map(|d| {
            let b = body(d);
            (!b.is_empty()).then(|| b.to_vec())
        })
        .collect())
}

/// Back-translation: translate `xs` into `l_y` with the current weights,
/// hold the result fixed, and score reconstructing `xs` from it.
pub fn back_translation_loss<S: Scalar>(
    params: &ModelParams<S>,
    g: &mut Graph<S>,
    xs: &[Vec<u32>],
    x_lang: LangId,
    l_y: LangId,
    max_positions: usize,
) -> Result<DecodedLoss> {
    if x_lang == l_y {
        return Err(Error::Model(format!(
            "back-translation into the source language {}",
            l_y.0
        )));
    }
    let ys = translate_nonempty(params, xs, l_y, max_positions)?;
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    for (y, x) in ys.into_iter().zip(xs) {
        if let Some(y) = y {
            src.push(y);
            tgt.push(x.clone());
        }
    }
    finish(params, g, src, tgt, x_lang, xs.len())
}

/// Cross-translation: translate the `x` side of real pairs into a third
/// language `l_z`, hold it fixed, and score producing the `y` side from it.
pub fn cross_translation_loss<S: Scalar>(
    params: &ModelParams<S>,
    g: &mut Graph<S>,
    pairs: &[(Vec<u32>, Vec<u32>)],
    x_lang: LangId,
    y_lang: LangId,
    l_z: LangId,
    max_positions: usize,
) -> Result<DecodedLoss> {
    if l_z == x_lang || l_z == y_lang {
        return Err(Error::Model(format!(
            "cross-translation pivot {} must differ from both sides",
            l_z.0
        )));
    }
    let xs: Vec<Vec<u32>> = pairs.iter().map(|p| p.0.clone()).collect();
    let zs = translate_nonempty(params, &xs, l_z, max_positions)?;
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    for (z, (_, y)) in zs.into_iter().zip(pairs) {
        if let Some(z) = z {
            src.push(z);
            tgt.push(y.clone());
        }
    }
    finish(params, g, src, tgt, y_lang, pairs.len())
}

fn finish<S: Scalar>(
    params: &ModelParams<S>,
    g: &mut Graph<S>,
    src: Vec<Vec<u32>>,
    tgt: Vec<Vec<u32>>,
    lang: LangId,
    total: usize,
) -> Result<DecodedLoss> {
    let used = src.len();
    let loss = if used == 0 {
        None
    } else {
        Some(cross_entropy_loss(params, g, &src, &tgt, lang)?)
    };
    Ok(DecodedLoss {
        loss,
        used,
        skipped: total - used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn mask_length_and_edges() {
        let mut rng = stream(0, "m");
        let x: Vec<u32> = (10..20).collect();
        for _ in 0..200 {
            let (m, s, spec) = mass_mask(&x, &mut rng).unwrap();
            assert_eq!(spec.length, 5);
            assert!(spec.start <= 5);
            assert_eq!(s, x[spec.start..spec.start + 5]);
            for i in 0..10 {
                let inside = (spec.start..spec.start + 5).contains(&i);
                assert_eq!(m[i] != x[i], inside);
            }
        }
        let (_, s, spec) = mass_mask(&[7, 8], &mut rng).unwrap();
        assert_eq!(spec.length, 1);
        assert!(spec.start <= 1);
        assert_eq!(s.len(), 1);
        assert!(mass_mask(&[7], &mut rng).is_err());
    }

    #[test]
    fn odd_length_segment_is_floor_half() {
        let mut rng = stream(1, "m");
        let (_, s, spec) = mass_mask(&[5, 6, 7, 8, 9, 10, 11], &mut rng).unwrap();
        assert_eq!(spec.length, 3);
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn decode_budget_respects_positions() {
        assert_eq!(decode_budget(5, 100), 20);
        assert_eq!(decode_budget(80, 100), 99);
    }
}
