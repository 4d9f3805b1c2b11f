//! Pre-layernorm transformer encoder-decoder with a language-blind encoder
//! and a language-conditioned decoder.
//!
//! The decoder adds a learned language embedding to its inputs, and every
//! decoder attention sublayer (self and cross) owns a bank of output
//! projections with one entry per language; the target language selects the
//! entry. Input and output token embeddings are tied and positions use
//! learned embeddings.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{LangId, PaddedBatch};
use crate::tensor::{AttentionSpec, Graph, Scalar, Tensor, Var};
use crate::tokenizer::{BOS, EOS, MASK, PAD};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub num_languages: usize,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            ffn: 256,
            heads: 4,
            vocab_size: 1000,
            num_languages: 4,
            max_positions: 100,
        }
    }
}

impl ModelConfig {
    /// Number of parameter tensors.
    pub fn tensor_count(&self) -> usize {
        param_specs(self).len()
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("ffn", self.ffn),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("num_languages", self.num_languages),
            ("max_positions", self.max_positions),
        ] {
            if v == 0 {
                out.push(format!("model.{name} must be >= 1"));
            }
        }
        if self.heads > 0 && self.hidden % self.heads != 0 {
            out.push(format!(
                "model.hidden ({}) must be divisible by model.heads ({})",
                self.hidden, self.heads
            ));
        }
        if self.vocab_size > 0 && self.vocab_size <= MASK as usize {
            out.push("model.vocab_size must exceed the special pieces".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (h, f, l, v, p) = (
            self.hidden,
            self.ffn,
            self.num_languages,
            self.vocab_size,
            self.max_positions,
        );
        let ln = 2 * h;
        let proj = h * h + h;
        let ffn = h * f + f + f * h + h;
        let enc_layer = ln + 4 * proj + ln + ffn;
        let dec_layer = ln + 3 * proj + l * proj + ln + 3 * proj + l * proj + ln + ffn;
        v * h + p * h + l * h + self.layers * (enc_layer + dec_layer) + 2 * ln
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (h, f, l) = (cfg.hidden, cfg.ffn, cfg.num_languages);
    let emb = Init::Normal((h as f64).powf(-0.5));
    let w_h = Init::Normal((h as f64).powf(-0.5));
    let w_f = Init::Normal((f as f64).powf(-0.5));
    let mut out = vec![
        ("tok_emb".to_string(), vec![cfg.vocab_size, h], emb),
        ("pos_emb".to_string(), vec![cfg.max_positions, h], emb),
        ("lang_emb".to_string(), vec![l, h], emb),
    ];
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    let ln = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.g"), vec![h], Init::Ones);
        push(format!("{p}.b"), vec![h], Init::Zeros);
    };
    let lin = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str, i: usize, o: usize, init: Init| {
        push(format!("{p}.w"), vec![i, o], init);
        push(format!("{p}.b"), vec![o], Init::Zeros);
    };
    for i in 0..cfg.layers {
        let p = format!("enc.{i}");
        ln(&mut push, &format!("{p}.ln1"));
        for m in ["q", "k", "v", "o"] {
            lin(&mut push, &format!("{p}.attn.{m}"), h, h, w_h);
        }
        ln(&mut push, &format!("{p}.ln2"));
        lin(&mut push, &format!("{p}.ffn1"), h, f, w_h);
        lin(&mut push, &format!("{p}.ffn2"), f, h, w_f);
    }
    ln(&mut push, "enc.ln_f");
    for i in 0..cfg.layers {
        let p = format!("dec.{i}");
        for (n, att) in [(1, "self"), (2, "cross")] {
            ln(&mut push, &format!("{p}.ln{n}"));
            for m in ["q", "k", "v"] {
                lin(&mut push, &format!("{p}.{att}.{m}"), h, h, w_h);
            }
            push(format!("{p}.{att}.o_bank.w"), vec![l, h, h], w_h);
            push(format!("{p}.{att}.o_bank.b"), vec![l, h], Init::Zeros);
        }
        ln(&mut push, &format!("{p}.ln3"));
        lin(&mut push, &format!("{p}.ffn1"), h, f, w_h);
        lin(&mut push, &format!("{p}.ffn2"), f, h, w_f);
    }
    ln(&mut push, "dec.ln_f");
    out
}

/// All model weights, keyed by name. Parameter ids are positions in
/// [`ModelParams::names`], which is fixed by the configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    layout: Layout,
}

impl<S: Scalar> ModelParams<S> {
    /// Assembles parameters from named tensors, checking names and shapes
    /// against `cfg`.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor<S>)>) -> Result<Self> {
        let specs = param_specs(cfg);
        if specs.len() != named.len() {
            return Err(Error::Model(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                named.len()
            )));
        }
        for ((name, shape, _), (n, t)) in specs.iter().zip(&named) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::Model(format!(
                    "parameter {n} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self {
            names,
            tensors,
            layout: Layout::new(cfg),
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.id(name).map(move |i| &mut self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    fn p(&self, g: &mut Graph<S>, id: usize) -> Var {
        g.param(id, &self.tensors[id])
    }
}

/// Deterministic initialization: scaled normals for matrices and
/// embeddings, zeros for biases and layernorm offsets, ones for gains.
/// Every tensor draws from its own named stream.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let named = param_specs(cfg)
        .into_iter()
        .map(|(name, shape, init)| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let mut rng = crate::rng::stream(seed, &format!("init/{name}"));
                    let dist = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
                }
            };
            let t = Tensor::new(shape, data)?;
            Ok((name, t))
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_named(cfg, named)
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Ln {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct EncLayer {
    ln1: Ln,
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
    ln2: Ln,
    ffn1: Lin,
    ffn2: Lin,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct DecAttn {
    ln: Ln,
    q: Lin,
    k: Lin,
    v: Lin,
    o_bank: Lin,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct DecLayer {
    self_attn: DecAttn,
    cross: DecAttn,
    ln3: Ln,
    ffn1: Lin,
    ffn2: Lin,
}

/// Parameter ids resolved once from the fixed naming order.
#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tok: usize,
    pos: usize,
    lang: usize,
    enc: Vec<EncLayer>,
    enc_ln: Ln,
    dec: Vec<DecLayer>,
    dec_ln: Ln,
    heads: usize,
    hidden: usize,
    vocab: usize,
    languages: usize,
    max_positions: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let index: std::collections::HashMap<String, usize> = param_specs(cfg)
            .into_iter()
            .enumerate()
            .map(|(i, (n, _, _))| (n, i))
            .collect();
        let id = |n: String| index[&n];
        let lin = |p: String| Lin {
            w: id(format!("{p}.w")),
            b: id(format!("{p}.b")),
        };
        let ln = |p: String| Ln {
            g: id(format!("{p}.g")),
            b: id(format!("{p}.b")),
        };
        let enc = (0..cfg.layers)
            .map(|i| EncLayer {
                ln1: ln(format!("enc.{i}.ln1")),
                q: lin(format!("enc.{i}.attn.q")),
                k: lin(format!("enc.{i}.attn.k")),
                v: lin(format!("enc.{i}.attn.v")),
                o: lin(format!("enc.{i}.attn.o")),
                ln2: ln(format!("enc.{i}.ln2")),
                ffn1: lin(format!("enc.{i}.ffn1")),
                ffn2: lin(format!("enc.{i}.ffn2")),
            })
            .collect();
        let attn = |i: usize, n: usize, a: &str| DecAttn {
            ln: ln(format!("dec.{i}.ln{n}")),
            q: lin(format!("dec.{i}.{a}.q")),
            k: lin(format!("dec.{i}.{a}.k")),
            v: lin(format!("dec.{i}.{a}.v")),
            o_bank: lin(format!("dec.{i}.{a}.o_bank")),
        };
        let dec = (0..cfg.layers)
            .map(|i| DecLayer {
                self_attn: attn(i, 1, "self"),
                cross: attn(i, 2, "cross"),
                ln3: ln(format!("dec.{i}.ln3")),
                ffn1: lin(format!("dec.{i}.ffn1")),
                ffn2: lin(format!("dec.{i}.ffn2")),
            })
            .collect();
        Self {
            tok: id("tok_emb".into()),
            pos: id("pos_emb".into()),
            lang: id("lang_emb".into()),
            enc,
            enc_ln: ln("enc.ln_f".into()),
            dec,
            dec_ln: ln("dec.ln_f".into()),
            heads: cfg.heads,
            hidden: cfg.hidden,
            vocab: cfg.vocab_size,
            languages: cfg.num_languages,
            max_positions: cfg.max_positions,
        }
    }
}

/// Encoder output for a padded batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `(batch * src_len, hidden)` states.
    pub states: Var,
    pub batch: usize,
    pub len: usize,
    pub key_valid: Vec<bool>,
}

impl<S: Scalar> ModelParams<S> {
    fn check_batch(&self, b: &PaddedBatch, what: &str) -> Result<()> {
        if b.rows() == 0 || b.width == 0 {
            return Err(Error::Model(format!("{what} batch is empty")));
        }
        if b.width > self.layout.max_positions {
            return Err(Error::Model(format!(
                "{what} length {} exceeds max_positions {}",
                b.width, self.layout.max_positions
            )));
        }
        if let Some(&bad) = b.ids.iter().find(|&&id| id as usize >= self.layout.vocab) {
            return Err(Error::Model(format!(
                "{what} id {bad} outside vocabulary of {}",
                self.layout.vocab
            )));
        }
        Ok(())
    }

    fn check_lang(&self, lang: LangId) -> Result<()> {
        if lang.index() >= self.layout.languages {
            return Err(Error::Model(format!(
                "language id {} outside the model's {} languages",
                lang.0, self.layout.languages
            )));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph<S>, ids: &[u32], positions: &[usize]) -> Result<Var> {
        let tok = self.p(g, self.layout.tok);
        let pos = self.p(g, self.layout.pos);
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let t = g.gather(tok, &ids)?;
        let p = g.gather(pos, positions)?;
        g.add(t, p)
    }

    fn ln(&self, g: &mut Graph<S>, x: Var, ln: Ln) -> Result<Var> {
        let gain = self.p(g, ln.g);
        let bias = self.p(g, ln.b);
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn lin(&self, g: &mut Graph<S>, x: Var, l: Lin) -> Result<Var> {
        let w = self.p(g, l.w);
        let b = self.p(g, l.b);
        g.linear(x, w, Some(b))
    }

    fn bank(&self, g: &mut Graph<S>, x: Var, l: Lin, lang: LangId) -> Result<Var> {
        let wb = self.p(g, l.w);
        let bb = self.p(g, l.b);
        let w = g.select(wb, lang.index())?;
        let b = g.select(bb, lang.index())?;
        g.linear(x, w, Some(b))
    }

    fn ffn(&self, g: &mut Graph<S>, x: Var, ln: Ln, f1: Lin, f2: Lin) -> Result<Var> {
        let h = self.ln(g, x, ln)?;
        let h = self.lin(g, h, f1)?;
        let h = g.relu(h);
        let h = self.lin(g, h, f2)?;
        g.add(x, h)
    }

    /// Runs the shared encoder over `src`. Padding keys are masked.
    pub fn encode(&self, g: &mut Graph<S>, src: &PaddedBatch) -> Result<Encoded> {
        self.check_batch(src, "source")?;
        let (batch, len) = (src.rows(), src.width);
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let key_valid = src.valid();
        let mut x = self.embed(g, &src.ids, &positions)?;
        for l in self.layout.enc.clone() {
            let h = self.ln(g, x, l.ln1)?;
            let q = self.lin(g, h, l.q)?;
            let k = self.lin(g, h, l.k)?;
            let v = self.lin(g, h, l.v)?;
            let spec = AttentionSpec {
                batch,
                q_len: len,
                k_len: len,
                heads: self.layout.heads,
                causal: false,
                key_valid: key_valid.clone(),
            };
            let a = g.attention(q, k, v, spec)?;
            let a = self.lin(g, a, l.o)?;
            x = g.add(x, a)?;
            x = self.ffn(g, x, l.ln2, l.ffn1, l.ffn2)?;
        }
        let states = self.ln(g, x, self.layout.enc_ln)?;
        Ok(Encoded {
            states,
            batch,
            len,
            key_valid,
        })
    }

    /// Teacher-forced decoder logits, `(batch * tgt_len, vocab)`, for the
    /// prefix batch `tgt` conditioned on `lang`.
    pub fn decode_logits(&self, g: &mut Graph<S>, enc: &Encoded, tgt: &PaddedBatch, lang: LangId) -> Result<Var> {
        self.check_batch(tgt, "target")?;
        self.check_lang(lang)?;
        if tgt.rows() != enc.batch {
            return Err(Error::Shape(format!(
                "target batch {} vs source batch {}",
                tgt.rows(),
                enc.batch
            )));
        }
        let (batch, len) = (tgt.rows(), tgt.width);
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let mut x = self.embed(g, &tgt.ids, &positions)?;
        let lang_tab = self.p(g, self.layout.lang);
        let lemb = g.select(lang_tab, lang.index())?;
        x = g.add_row(x, lemb)?;
        let self_valid = tgt.valid();
        for l in self.layout.dec.clone() {
            let a = l.self_attn;
            let h = self.ln(g, x, a.ln)?;
            let q = self.lin(g, h, a.q)?;
            let k = self.lin(g, h, a.k)?;
            let v = self.lin(g, h, a.v)?;
            let spec = AttentionSpec {
                batch,
                q_len: len,
                k_len: len,
                heads: self.layout.heads,
                causal: true,
                key_valid: self_valid.clone(),
            };
            let o = g.attention(q, k, v, spec)?;
            let o = self.bank(g, o, a.o_bank, lang)?;
            x = g.add(x, o)?;

            let c = l.cross;
            let h = self.ln(g, x, c.ln)?;
            let q = self.lin(g, h, c.q)?;
            let k = self.lin(g, enc.states, c.k)?;
            let v = self.lin(g, enc.states, c.v)?;
            let spec = AttentionSpec {
                batch,
                q_len: len,
                k_len: enc.len,
                heads: self.layout.heads,
                causal: false,
                key_valid: enc.key_valid.clone(),
            };
            let o = g.attention(q, k, v, spec)?;
            let o = self.bank(g, o, c.o_bank, lang)?;
            x = g.add(x, o)?;
            x = self.ffn(g, x, l.ln3, l.ffn1, l.ffn2)?;
        }
        let h = self.ln(g, x, self.layout.dec_ln)?;
        let tok = self.p(g, self.layout.tok);
        g.matmul_t(h, tok)
    }

    /// Greedy decoding of each source row into `lang`. Each output holds the
    /// generated pieces, ending with EOS unless `max_len` cut it short.
    /// PAD, BOS and MASK are never emitted; ties go to the lowest id.
    pub fn greedy_decode(&self, srcs: &[Vec<u32>], lang: LangId, max_len: usize) -> Result<Vec<Vec<u32>>> {
        if srcs.is_empty() {
            return Ok(Vec::new());
        }
        if max_len == 0 {
            return Err(Error::Model("max_len must be >= 1".into()));
        }
        self.check_lang(lang)?;
        let max_len = max_len.min(self.layout.max_positions);
        let src = PaddedBatch::from_seqs(srcs);
        let mut g = Graph::<S>::inference();
        let enc = self.encode(&mut g, &src)?;
        let batch = srcs.len();
        let (hd, heads) = (self.layout.hidden, self.layout.heads);

        let mut cross_kv = Vec::new();
        for l in &self.layout.dec {
            let k = self.lin(&mut g, enc.states, l.cross.k)?;
            let v = self.lin(&mut g, enc.states, l.cross.v)?;
            cross_kv.push((k, v));
        }
        let lang_row = self.tensors[self.layout.lang].row(lang.index()).to_vec();
        let lang_t = g.constant(Tensor::new(vec![hd], lang_row)?);
        // Per layer self-attention keys and values, `batch x t x hidden`.
        let nl = self.layout.dec.len();
        let mut cache_k: Vec<Vec<S>> = vec![Vec::new(); nl];
        let mut cache_v: Vec<Vec<S>> = vec![Vec::new(); nl];

        let mut outputs: Vec<Vec<u32>> = vec![Vec::new(); batch];
        let mut done = vec![false; batch];
        let mut current = vec![BOS; batch];
        for t in 0..max_len {
            let mut x = self.embed(&mut g, &current, &vec![t; batch])?;
            x = g.add_row(x, lang_t)?;
            for (li, l) in self.layout.dec.clone().into_iter().enumerate() {
                let a = l.self_attn;
                let h = self.ln(&mut g, x, a.ln)?;
                let q = self.lin(&mut g, h, a.q)?;
                let k = self.lin(&mut g, h, a.k)?;
                let v = self.lin(&mut g, h, a.v)?;
                let kn = append_rows(&cache_k[li], g.value(k).data(), batch, t, hd);
                let vn = append_rows(&cache_v[li], g.value(v).data(), batch, t, hd);
                cache_k[li] = kn.clone();
                cache_v[li] = vn.clone();
                let kc = g.constant(Tensor::new(vec![batch * (t + 1), hd], kn)?);
                let vc = g.constant(Tensor::new(vec![batch * (t + 1), hd], vn)?);
                let spec = AttentionSpec {
                    batch,
                    q_len: 1,
                    k_len: t + 1,
                    heads,
                    causal: false,
                    key_valid: vec![true; batch * (t + 1)],
                };
                let o = g.attention(q, kc, vc, spec)?;
                let o = self.bank(&mut g, o, a.o_bank, lang)?;
                x = g.add(x, o)?;

                let c = l.cross;
                let h = self.ln(&mut g, x, c.ln)?;
                let q = self.lin(&mut g, h, c.q)?;
                let spec = AttentionSpec {
                    batch,
                    q_len: 1,
                    k_len: enc.len,
                    heads,
                    causal: false,
                    key_valid: enc.key_valid.clone(),
                };
                let o = g.attention(q, cross_kv[li].0, cross_kv[li].1, spec)?;
                let o = self.bank(&mut g, o, c.o_bank, lang)?;
                x = g.add(x, o)?;
                x = self.ffn(&mut g, x, l.ln3, l.ffn1, l.ffn2)?;
            }
            let h = self.ln(&mut g, x, self.layout.dec_ln)?;
            let tok = self.p(&mut g, self.layout.tok);
            let logits = g.matmul_t(h, tok)?;
            let vocab = self.layout.vocab;
            for b in 0..batch {
                if done[b] {
                    current[b] = PAD;
                    continue;
                }
                let row = &g.value(logits).data()[b * vocab..(b + 1) * vocab];
                let next = argmax_allowed(row);
                outputs[b].push(next);
                current[b] = next;
                if next == EOS {
                    done[b] = true;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(outputs)
    }
}

fn argmax_allowed<S: Scalar>(row: &[S]) -> u32 {
    let mut best: Option<(usize, S)> = None;
    for (i, &v) in row.iter().enumerate() {
        if i as u32 == PAD || i as u32 == BOS || i as u32 == MASK {
            continue;
        }
        // Strict comparison keeps the lowest id among ties; NaN never wins.
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map_or(EOS, |(i, _)| i as u32)
}

/// Interleaves one new row per batch element into a `batch x t x d` cache.
fn append_rows<S: Scalar>(cache: &[S], new: &[S], batch: usize, t: usize, d: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(batch * (t + 1) * d);
    for b in 0..batch {
        out.extend_from_slice(&cache[b * t * d..(b + 1) * t * d]);
        out.extend_from_slice(&new[b * d..(b + 1) * d]);
    }
    out
}

/// The generated pieces without a trailing EOS.
pub fn body(decoded: &[u32]) -> &[u32] {
    match decoded.last() {
        Some(&EOS) => &decoded[..decoded.len() - 1],
        _ => decoded,
    }
}
