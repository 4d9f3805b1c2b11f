//! Tape of primitive operations and its reverse sweep.
//!
//! Nodes are appended in evaluation order and every input refers to an
//! earlier node, so the tape is always a valid topological order.

use std::collections::{BTreeMap, HashMap};

use super::gemm::{gemm, MatMut, MatRef};
use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout and masking of one multi-head attention call.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Disallow attending to later key positions (requires `q_len == k_len`).
    pub causal: bool,
    /// `batch * k_len` flags; `false` marks padding keys.
    pub key_valid: Vec<bool>,
}

impl AttentionSpec {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_valid[b * self.k_len + j] && (!self.causal || j <= i)
    }
}

enum Op<S> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Softmax(Var),
    Sum(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Select {
        bank: Var,
        index: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        valid: Vec<bool>,
        count: usize,
        probs: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Record of a forward computation.
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<usize, Var>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads<S> {
    leaves: HashMap<usize, Tensor<S>>,
    params: BTreeMap<usize, Tensor<S>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of a leaf created with [`Graph::leaf`] or [`Graph::param`].
    pub fn of(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaves.get(&v.0)
    }

    /// Gradient of a registered parameter (zeros when it was unreachable).
    pub fn param(&self, id: usize) -> Option<&Tensor<S>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<usize, Tensor<S>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<usize, Tensor<S>> {
        self.params
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; nothing on it can be differentiated.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: usize, value: &Tensor<S>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Parameters registered on this graph, keyed by parameter id.
    pub fn param_vars(&self) -> &BTreeMap<usize, Var> {
        &self.params
    }

    /// `a @ b` for 2-d operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` for 2-d operands.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err(format!("matmul needs 2-d operands, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return shape_err(format!("matmul {sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let mut out = vec![S::zero(); m * n];
        {
            let av = MatRef::dense(self.value(a).data(), m, k);
            let bv = if trans_b {
                MatRef::dense(self.value(b).data(), n, k).t()
            } else {
                MatRef::dense(self.value(b).data(), k, n)
            };
            gemm(S::one(), av, bv, S::zero(), MatMut::dense(&mut out, m, n));
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    /// `x @ w + b` where `x` is viewed as rows over its last dimension.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last().copied() != Some(sw[0]) {
            return shape_err(format!("linear input {sx:?} with weight {sw:?}"));
        }
        let (k, n) = (sw[0], sw[1]);
        let m = self.value(x).rows();
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return shape_err(format!("linear bias {:?}, want [{n}]", self.shape(b)));
            }
        }
        let mut out = vec![S::zero(); m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { S::one() } else { S::zero() };
        gemm(
            S::one(),
            MatRef::dense(self.value(x).data(), m, k),
            MatRef::dense(self.value(w).data(), k, n),
            beta,
            MatMut::dense(&mut out, m, n),
        );
        let mut shape = sx;
        *shape.last_mut().expect("non-empty") = n;
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        if self.shape(row) != [d] {
            return shape_err(format!("add_row: {:?} with row {:?}", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(a).clone();
        for chunk in t.data_mut().chunks_exact_mut(d) {
            for (x, &y) in chunk.iter_mut().zip(&r) {
                *x = *x + y;
            }
        }
        let rg = self.needs(a) || self.needs(row);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.needs(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        let rg = self.needs(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Normalizes each row over the last dimension, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return shape_err(format!("layer_norm over {d} with gain {:?}", self.shape(gain)));
        }
        let rows = self.value(x).rows();
        let mut xhat = vec![S::zero(); rows * d];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * d];
        let dn = S::of(d as f64);
        {
            let xs = self.value(x).data();
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            for r in 0..rows {
                let row = &xs[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<S>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
                let rs = S::one() / (var + S::of(eps)).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = g[j] * h + b[j];
                }
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        let (xhat, rstd) = if rg && self.grad_enabled {
            (xhat, rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = self.value(x).last_dim();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let rg = self.needs(x);
        self.push(t, Op::Softmax(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(x);
        self.push(t, Op::Sum(x), rg)
    }

    /// Rows of a 2-d table selected by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return shape_err(format!("gather needs a 2-d table, got {st:?}"));
        }
        let (n, d) = (st[0], st[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return shape_err(format!("gather index {i} out of range {n}"));
            }
            out.extend_from_slice(self.value(table).row(i));
        }
        let rg = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Entry `index` along the first dimension of `bank`.
    pub fn select(&mut self, bank: Var, index: usize) -> Result<Var> {
        let sb = self.shape(bank).to_vec();
        if sb.is_empty() || index >= sb[0] {
            return shape_err(format!("select {index} from bank {sb:?}"));
        }
        let inner: usize = sb[1..].iter().product();
        let data = self.value(bank).data()[index * inner..(index + 1) * inner].to_vec();
        let rg = self.needs(bank);
        Ok(self.push(Tensor::new(sb[1..].to_vec(), data)?, Op::Select { bank, index }, rg))
    }

    /// Scaled dot-product attention over `heads` slices of the model width.
    ///
    /// `q` is `(batch * q_len, d)`, `k` and `v` are `(batch * k_len, d)`.
    /// Query rows with no admissible key produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let d = self.value(q).last_dim();
        let AttentionSpec {
            batch,
            q_len,
            k_len,
            heads,
            ..
        } = spec;
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("width {d} not divisible into {heads} heads"));
        }
        if self.shape(q) != [batch * q_len, d]
            || self.shape(k) != [batch * k_len, d]
            || self.shape(v) != [batch * k_len, d]
            || spec.key_valid.len() != batch * k_len
            || (spec.causal && q_len != k_len)
        {
            return shape_err(format!(
                "attention q {:?} k {:?} v {:?} for batch {batch} q_len {q_len} k_len {k_len}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            ));
        }
        let dh = d / heads;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![S::zero(); batch * heads * q_len * k_len];
        let mut out = vec![S::zero(); batch * q_len * d];
        {
            let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for b in 0..batch {
                for h in 0..heads {
                    let p_off = (b * heads + h) * q_len * k_len;
                    let p = &mut probs[p_off..p_off + q_len * k_len];
                    gemm(
                        scale,
                        head_view(qd, b * q_len, q_len, h * dh, dh, d),
                        head_view(kd, b * k_len, k_len, h * dh, dh, d).t(),
                        S::zero(),
                        MatMut::dense(p, q_len, k_len),
                    );
                    for i in 0..q_len {
                        let row = &mut p[i * k_len..(i + 1) * k_len];
                        masked_softmax(row, |j| spec.allowed(b, i, j));
                    }
                    gemm(
                        S::one(),
                        MatRef::dense(p, q_len, k_len),
                        head_view(vd, b * k_len, k_len, h * dh, dh, d),
                        S::zero(),
                        head_view_mut(&mut out, b * q_len, q_len, h * dh, dh, d),
                    );
                }
            }
        }
        let rg = self.needs(q) || self.needs(k) || self.needs(v);
        let probs = if rg { probs } else { Vec::new() };
        Ok(self.push(
            Tensor::new(vec![batch * q_len, d], out)?,
            Op::Attention { q, k, v, spec, probs },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` over the rows marked valid.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], valid: &[bool]) -> Result<Var> {
        let vocab = self.value(logits).last_dim();
        let rows = self.value(logits).rows();
        if targets.len() != rows || valid.len() != rows {
            return shape_err(format!("cross_entropy over {rows} rows with {} targets", targets.len()));
        }
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(Error::Model("cross-entropy over an empty target".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (r, row) in probs.chunks_exact_mut(vocab).enumerate() {
            if !valid[r] {
                row.iter_mut().for_each(|x| *x = S::zero());
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return shape_err(format!("target {t} out of vocabulary {vocab}"));
            }
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<S>().ln() + max;
            total += (lse - row[t]).f64();
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let loss = S::of(total / count as f64);
        let rg = self.needs(logits);
        let probs = if rg { probs } else { Vec::new() };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
                count,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every registered parameter receives a gradient; parameters with no path
    /// to `loss` receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        if self.nodes[loss.0].value.len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        let mut leaves = HashMap::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &node.op, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                leaves.insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        let mut params = BTreeMap::new();
        for (&id, &v) in &self.params {
            let g = leaves
                .get(&v.0)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
            params.insert(id, g);
        }
        Ok(Grads { leaves, params })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var, from: usize) -> Result<Option<&'g mut Vec<S>>> {
        if v.0 >= from {
            return Err(Error::Model(format!(
                "graph cycle: node {from} consumes later node {}",
                v.0
            )));
        }
        if !self.nodes[v.0].requires_grad {
            return Ok(None);
        }
        let len = self.nodes[v.0].value.len();
        Ok(Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); len])))
    }

    fn take_acc(&self, grads: &mut [Option<Vec<S>>], v: Var, from: usize) -> Result<Option<Vec<S>>> {
        if v.0 >= from {
            return Err(Error::Model(format!(
                "graph cycle: node {from} consumes later node {}",
                v.0
            )));
        }
        if !self.nodes[v.0].requires_grad {
            return Ok(None);
        }
        let len = self.nodes[v.0].value.len();
        Ok(Some(grads[v.0].take().unwrap_or_else(|| vec![S::zero(); len])))
    }

    fn propagate(&self, i: usize, op: &Op<S>, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { self.shape(*b)[0] } else { self.shape(*b)[1] };
                let gv = MatRef::dense(g, m, n);
                let bval = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a, i)? {
                    // da = g @ b^T (or g @ b when b was transposed)
                    let bv = if *trans_b {
                        MatRef::dense(bval, n, k)
                    } else {
                        MatRef::dense(bval, k, n).t()
                    };
                    gemm(S::one(), gv, bv, S::one(), MatMut::dense(ga, m, k));
                }
                let aval = self.value(*a).data();
                if let Some(gb) = self.acc(grads, *b, i)? {
                    if *trans_b {
                        gemm(
                            S::one(),
                            gv.t(),
                            MatRef::dense(aval, m, k),
                            S::one(),
                            MatMut::dense(gb, n, k),
                        );
                    } else {
                        gemm(
                            S::one(),
                            MatRef::dense(aval, m, k).t(),
                            gv,
                            S::one(),
                            MatMut::dense(gb, k, n),
                        );
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (k, n) = (sw[0], sw[1]);
                let m = self.value(*x).rows();
                let gv = MatRef::dense(g, m, n);
                if let Some(gx) = self.acc(grads, *x, i)? {
                    let wv = MatRef::dense(self.value(*w).data(), k, n).t();
                    gemm(S::one(), gv, wv, S::one(), MatMut::dense(gx, m, k));
                }
                if let Some(gw) = self.acc(grads, *w, i)? {
                    let xv = MatRef::dense(self.value(*x).data(), m, k).t();
                    gemm(S::one(), xv, gv, S::one(), MatMut::dense(gw, k, n));
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b, i)? {
                        for row in g.chunks_exact(n) {
                            for (acc, &x) in gb.iter_mut().zip(row) {
                                *acc = *acc + x;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(ga) = self.acc(grads, *v, i)? {
                        for (acc, &x) in ga.iter_mut().zip(g) {
                            *acc = *acc + x;
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, *a, i)? {
                    for (acc, &x) in ga.iter_mut().zip(g) {
                        *acc = *acc + x;
                    }
                }
                let d = self.value(*row).len();
                if let Some(gr) = self.acc(grads, *row, i)? {
                    for chunk in g.chunks_exact(d) {
                        for (acc, &x) in gr.iter_mut().zip(chunk) {
                            *acc = *acc + x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let bval = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a, i)? {
                    for ((acc, &x), &y) in ga.iter_mut().zip(g).zip(bval) {
                        *acc = *acc + x * y;
                    }
                }
                let aval = self.value(*a).data();
                if let Some(gb) = self.acc(grads, *b, i)? {
                    for ((acc, &x), &y) in gb.iter_mut().zip(g).zip(aval) {
                        *acc = *acc + x * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a, i)? {
                    for (acc, &x) in ga.iter_mut().zip(g) {
                        *acc = *acc + x * *c;
                    }
                }
            }
            Op::Relu(a) => {
                let aval = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a, i)? {
                    for ((acc, &x), &y) in ga.iter_mut().zip(g).zip(aval) {
                        if y > S::zero() {
                            *acc = *acc + x;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let rows = rstd.len();
                let gvals = self.value(*gain).data();
                if let Some(gg) = self.acc(grads, *gain, i)? {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias, i)? {
                    for chunk in g.chunks_exact(d) {
                        for (acc, &v) in gb.iter_mut().zip(chunk) {
                            *acc = *acc + v;
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x, i)? {
                    let dn = S::of(d as f64);
                    let mut dxhat = vec![S::zero(); d];
                    for r in 0..rows {
                        let mut mean_d = S::zero();
                        let mut mean_dx = S::zero();
                        for j in 0..d {
                            let v = g[r * d + j] * gvals[j];
                            dxhat[j] = v;
                            mean_d = mean_d + v;
                            mean_dx = mean_dx + v * xhat[r * d + j];
                        }
                        mean_d = mean_d / dn;
                        mean_dx = mean_dx / dn;
                        for j in 0..d {
                            let h = xhat[r * d + j];
                            gx[r * d + j] = gx[r * d + j] + rstd[r] * (dxhat[j] - mean_d - h * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let d = self.nodes[i].value.last_dim();
                if let Some(gx) = self.acc(grads, *x, i)? {
                    for ((gr, yr), accr) in g.chunks_exact(d).zip(y.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                        let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            accr[j] = accr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x, i)? {
                    for acc in gx.iter_mut() {
                        *acc = *acc + g[0];
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).last_dim();
                if let Some(gt) = self.acc(grads, *table, i)? {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + g[r * d + j];
                        }
                    }
                }
            }
            Op::Select { bank, index } => {
                let inner = g.len();
                if let Some(gb) = self.acc(grads, *bank, i)? {
                    for (acc, &x) in gb[index * inner..(index + 1) * inner].iter_mut().zip(g) {
                        *acc = *acc + x;
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => self.attention_backward(i, *q, *k, *v, spec, probs, g, grads)?,
            Op::CrossEntropy {
                logits,
                targets,
                valid,
                count,
                probs,
            } => {
                let vocab = self.value(*logits).last_dim();
                let scale = g[0] / S::of(*count as f64);
                if let Some(gl) = self.acc(grads, *logits, i)? {
                    for (r, (accr, pr)) in gl.chunks_exact_mut(vocab).zip(probs.chunks_exact(vocab)).enumerate() {
                        if !valid[r] {
                            continue;
                        }
                        for (acc, &p) in accr.iter_mut().zip(pr) {
                            *acc = *acc + scale * p;
                        }
                        accr[targets[r]] = accr[targets[r]] - scale;
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        i: usize,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[S],
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) -> Result<()> {
        let d = self.value(q).last_dim();
        let (batch, q_len, k_len, heads) = (spec.batch, spec.q_len, spec.k_len, spec.heads);
        let dh = d / heads;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        // Take the three accumulators out so they can be borrowed together.
        let mut gq = self.take_acc(grads, q, i)?;
        let mut gk = self.take_acc(grads, k, i)?;
        let mut gv = self.take_acc(grads, v, i)?;
        let mut dp = vec![S::zero(); q_len * k_len];
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * q_len * k_len;
                let p = &probs[p_off..p_off + q_len * k_len];
                let go = head_view(g, b * q_len, q_len, h * dh, dh, d);
                if let Some(gv) = gv.as_mut() {
                    gemm(
                        S::one(),
                        MatRef::dense(p, q_len, k_len).t(),
                        go,
                        S::one(),
                        head_view_mut(gv, b * k_len, k_len, h * dh, dh, d),
                    );
                }
                if gq.is_none() && gk.is_none() {
                    continue;
                }
                gemm(
                    S::one(),
                    go,
                    head_view(vd, b * k_len, k_len, h * dh, dh, d).t(),
                    S::zero(),
                    MatMut::dense(&mut dp, q_len, k_len),
                );
                for r in 0..q_len {
                    let pr = &p[r * k_len..(r + 1) * k_len];
                    let dr = &mut dp[r * k_len..(r + 1) * k_len];
                    let dot: S = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..k_len {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                if let Some(gq) = gq.as_mut() {
                    gemm(
                        S::one(),
                        MatRef::dense(&dp, q_len, k_len),
                        head_view(kd, b * k_len, k_len, h * dh, dh, d),
                        S::one(),
                        head_view_mut(gq, b * q_len, q_len, h * dh, dh, d),
                    );
                }
                if let Some(gk) = gk.as_mut() {
                    gemm(
                        S::one(),
                        MatRef::dense(&dp, q_len, k_len).t(),
                        head_view(qd, b * q_len, q_len, h * dh, dh, d),
                        S::one(),
                        head_view_mut(gk, b * k_len, k_len, h * dh, dh, d),
                    );
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(buf) = buf {
                let slot = grads[var.0].get_or_insert_with(Vec::new);
                if slot.is_empty() {
                    *slot = buf;
                } else {
                    // q, k and v may be the same node.
                    for (a, b) in slot.iter_mut().zip(buf) {
                        *a = *a + b;
                    }
                }
            }
        }
        Ok(())
    }
}

fn head_view<S>(data: &[S], row0: usize, rows: usize, col0: usize, cols: usize, width: usize) -> MatRef<'_, S> {
    MatRef {
        data,
        offset: row0 * width + col0,
        rows,
        cols,
        rs: width,
        cs: 1,
    }
}

fn head_view_mut<S>(data: &mut [S], row0: usize, rows: usize, col0: usize, cols: usize, width: usize) -> MatMut<'_, S> {
    MatMut {
        data,
        offset: row0 * width + col0,
        rows,
        cols,
        rs: width,
        cs: 1,
    }
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

fn masked_softmax<S: Scalar>(row: &mut [S], allowed: impl Fn(usize) -> bool) {
    let mut max = S::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if allowed(j) && x > max {
            max = x;
        }
    }
    if max == S::neg_infinity() {
        row.iter_mut().for_each(|x| *x = S::zero());
        return;
    }
    let mut total = S::zero();
    for (j, x) in row.iter_mut().enumerate() {
        *x = if allowed(j) { (*x - max).exp() } else { S::zero() };
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}
