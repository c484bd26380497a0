//! Tensor-level tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value plus whatever it needs
//! for the backward pass. Node indices are assigned in execution order, so a
//! single reverse sweep over the node vector is a valid topological order.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{GradientMap, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    tape: u64,
}

impl Var {
    pub fn tape_id(self) -> u64 {
        self.tape
    }
}

/// Which keys a query row may look at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    /// Every query sees every key.
    Full,
    /// Query row `i` sits at absolute position `query_offset + i` and sees keys `0..=query_offset + i`.
    Causal { query_offset: usize },
}

enum Op<S> {
    Leaf,
    Param,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    AddRow { x: usize, row: usize },
    Sum(usize),
    Mean(usize),
    WeightedSum(Vec<(S, usize)>),
    Gelu(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<S>, rstd: Vec<S> },
    Softmax(usize),
    PickLogSoftmax { logits: usize, rows: Vec<usize>, targets: Vec<usize>, probs: Vec<S> },
    Gather { table: usize, ids: Vec<usize> },
    ConcatRows(Vec<usize>),
    ConcatCols(usize, usize),
    SliceRows { x: usize, start: usize },
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<S> },
    SqErrMean(usize, usize),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Ordered record of operations. One tape per forward/backward pass.
pub struct Tape<S> {
    id: u64,
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    #[inline]
    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
        v.idx
    }

    #[inline]
    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[self.idx(v)].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(self.idx(v))
    }

    /// Differentiable input that is not a registered parameter.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter node; repeated requests for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Value-identical copy that blocks all gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::dim(format!(
                "matmul needs matrices, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, k2, n) = (av.shape()[0], av.shape()[1], bv.shape()[0], bv.shape()[1]);
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a: ai, b: bi, m, k, n },
            rg,
        ))
    }

    fn same_shape(&self, a: usize, b: usize, what: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::dim(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, what: &str, f: impl Fn(S, S) -> S) -> Result<(usize, usize, Tensor<S>)> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        self.same_shape(ai, bi, what)?;
        let av = &self.nodes[ai].value;
        let bv = &self.nodes[bi].value;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ai, bi, Tensor::from_parts(av.shape().to_vec(), data)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, t) = self.zip_op(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(t, Op::Add(ai, bi), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, t) = self.zip_op(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(t, Op::Sub(ai, bi), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, t) = self.zip_op(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(t, Op::Mul(ai, bi), rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let xi = self.idx(x);
        let t = self.nodes[xi].value.map(|v| v * c);
        let rg = self.rg(xi);
        self.push(t, Op::Scale(xi, c), rg)
    }

    /// Adds a length-`N` vector to every row of an `M×N` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xi, ri) = (self.idx(x), self.idx(row));
        let xv = &self.nodes[xi].value;
        let rv = &self.nodes[ri].value;
        let n = xv.cols();
        if rv.len() != n {
            return Err(Error::dim(format!(
                "add_row: row of {} vs {} columns",
                rv.len(),
                n
            )));
        }
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(rv.data()) {
                *o = *o + b;
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(xi) || self.rg(ri);
        Ok(self.push(t, Op::AddRow { x: xi, row: ri }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let s = self.nodes[xi].value.data().iter().fold(S::zero(), |a, &b| a + b);
        let rg = self.rg(xi);
        self.push(Tensor::scalar(s), Op::Sum(xi), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let v = &self.nodes[xi].value;
        let s = v.data().iter().fold(S::zero(), |a, &b| a + b) / S::of(v.len() as f64);
        let rg = self.rg(xi);
        self.push(Tensor::scalar(s), Op::Mean(xi), rg)
    }

    /// `Σ cᵢ·xᵢ` over same-shaped inputs, accumulated left to right.
    pub fn weighted_sum(&mut self, terms: &[(S, Var)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::contract("weighted_sum of no terms"))?;
        let fi = self.idx(first.1);
        let shape = self.nodes[fi].value.shape().to_vec();
        let mut out = vec![S::zero(); self.nodes[fi].value.len()];
        let mut idxs = Vec::with_capacity(terms.len());
        let mut rg = false;
        for &(c, v) in terms {
            let vi = self.idx(v);
            self.same_shape(fi, vi, "weighted_sum")?;
            for (o, &x) in out.iter_mut().zip(self.nodes[vi].value.data()) {
                *o = *o + c * x;
            }
            rg |= self.rg(vi);
            idxs.push((c, vi));
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::WeightedSum(idxs), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let t = self.nodes[xi].value.map(gelu_fwd);
        let rg = self.rg(xi);
        self.push(t, Op::Gelu(xi), rg)
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x), self.idx(gain), self.idx(bias));
        let xv = &self.nodes[xi].value;
        let n = xv.cols();
        let m = xv.rows();
        let g = self.nodes[gi].value.data();
        let b = self.nodes[bi].value.data();
        if g.len() != n || b.len() != n {
            return Err(Error::dim(format!("layer_norm width {n} vs gain {} bias {}", g.len(), b.len())));
        }
        let nn = S::of(n as f64);
        let eps = S::of(eps);
        let mut out = vec![S::zero(); m * n];
        let mut xhat = vec![S::zero(); m * n];
        let mut rstd = vec![S::zero(); m];
        for i in 0..m {
            let row = &xv.data()[i * n..(i + 1) * n];
            let mu = row.iter().fold(S::zero(), |a, &v| a + v) / nn;
            let var = row.iter().fold(S::zero(), |a, &v| a + (v - mu) * (v - mu)) / nn;
            let r = S::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mu) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        Ok(self.push(t, Op::LayerNorm { x: xi, gain: gi, bias: bi, xhat, rstd }, rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let n = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(xi);
        self.push(t, Op::Softmax(xi), rg)
    }

    /// `log softmax(logits[rows[r]])[targets[r]]` for each r, as a vector.
    pub fn pick_log_softmax(&mut self, logits: Var, rows: &[usize], targets: &[usize]) -> Result<Var> {
        if rows.len() != targets.len() || rows.is_empty() {
            return Err(Error::contract(format!(
                "pick_log_softmax: {} rows vs {} targets",
                rows.len(),
                targets.len()
            )));
        }
        let li = self.idx(logits);
        let lv = &self.nodes[li].value;
        let (m, v) = (lv.rows(), lv.cols());
        let mut out = Vec::with_capacity(rows.len());
        let mut probs = Vec::with_capacity(rows.len() * v);
        for (&r, &t) in rows.iter().zip(targets) {
            if r >= m {
                return Err(Error::Index(format!("row {r} of {m}")));
            }
            if t >= v {
                return Err(Error::Index(format!("target {t} outside vocabulary of {v}")));
            }
            let row = lv.row(r);
            let mx = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let z = row.iter().fold(S::zero(), |a, &b| a + (b - mx).exp());
            let lse = mx + z.ln();
            out.push(row[t] - lse);
            probs.extend(row.iter().map(|&b| (b - mx).exp() / z));
        }
        let t = Tensor::from_parts(vec![rows.len()], out);
        let rg = self.rg(li);
        Ok(self.push(
            t,
            Op::PickLogSoftmax { logits: li, rows: rows.to_vec(), targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Mean negative log-likelihood over masked positions, natural log.
    ///
    /// Returns the loss and an empty-mask flag; an all-false mask yields a
    /// constant `+0`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<(Var, bool)> {
        let m = self.value(logits).rows();
        if targets.len() != m || mask.len() != m {
            return Err(Error::dim(format!(
                "cross_entropy: {m} rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let rows: Vec<usize> = (0..m).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Ok((self.constant(Tensor::scalar(S::zero())), true));
        }
        let tg: Vec<usize> = rows.iter().map(|&i| targets[i]).collect();
        let lp = self.pick_log_softmax(logits, &rows, &tg)?;
        let mean = self.mean(lp);
        Ok((self.scale(mean, -S::one()), false))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ti = self.idx(table);
        let tv = &self.nodes[ti].value;
        let (r, c) = (tv.rows(), tv.cols());
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Index(format!("token id {id} outside table of {r} rows")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::from_parts(vec![ids.len(), c], out);
        let rg = self.rg(ti);
        Ok(self.push(t, Op::Gather { table: ti, ids: ids.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let c = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        let mut idxs = Vec::with_capacity(parts.len());
        let mut rg = false;
        for &p in parts {
            let pi = self.idx(p);
            let pv = &self.nodes[pi].value;
            if pv.cols() != c {
                return Err(Error::dim(format!("concat_rows: {} vs {c} columns", pv.cols())));
            }
            out.extend_from_slice(pv.data());
            rows += pv.rows();
            rg |= self.rg(pi);
            idxs.push(pi);
        }
        Ok(self.push(Tensor::from_parts(vec![rows, c], out), Op::ConcatRows(idxs), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let m = av.rows();
        if bv.rows() != m {
            return Err(Error::dim(format!("concat_cols: {m} vs {} rows", bv.rows())));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Vec::with_capacity(m * (ca + cb));
        for i in 0..m {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(i));
        }
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(Tensor::from_parts(vec![m, ca + cb], out), Op::ConcatCols(ai, bi), rg))
    }

    /// Contiguous row range `start..start+len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let (m, c) = (xv.rows(), xv.cols());
        if len == 0 || start + len > m {
            return Err(Error::Index(format!("rows {start}..{} of {m}", start + len)));
        }
        let t = Tensor::from_parts(vec![len, c], xv.data()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(xi);
        Ok(self.push(t, Op::SliceRows { x: xi, start }, rg))
    }

    /// Multi-head scaled dot-product attention. `q` is `Tq×d`, `k`/`v` are `Tk×d`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Result<Var> {
        let (qi, ki, vi) = (self.idx(q), self.idx(k), self.idx(v));
        let (qv, kv, vv) = (&self.nodes[qi].value, &self.nodes[ki].value, &self.nodes[vi].value);
        let (tq, d) = (qv.rows(), qv.cols());
        let tk = kv.rows();
        if kv.cols() != d || vv.cols() != d || vv.rows() != tk {
            return Err(Error::dim(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("width {d} not divisible by {heads} heads")));
        }
        if let AttnMask::Causal { query_offset } = mask {
            if query_offset + tq > tk {
                return Err(Error::dim(format!(
                    "causal attention: queries end at {} but only {tk} keys",
                    query_offset + tq
                )));
            }
        }
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let mut probs = vec![S::zero(); heads * tq * tk];
        let mut out = vec![S::zero(); tq * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let visible = match mask {
                    AttnMask::Full => tk,
                    AttnMask::Causal { query_offset } => query_offset + i + 1,
                };
                let p = &mut probs[(h * tq + i) * tk..(h * tq + i) * tk + visible];
                let qrow = &qd[i * d + off..i * d + off + dh];
                for (j, pj) in p.iter_mut().enumerate() {
                    let krow = &kd[j * d + off..j * d + off + dh];
                    let mut s = S::zero();
                    for (&a, &b) in qrow.iter().zip(krow) {
                        s = s + a * b;
                    }
                    *pj = s * scale;
                }
                softmax_in_place(p);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vrow = &vd[j * d + off..j * d + off + dh];
                    for (o, &b) in orow.iter_mut().zip(vrow) {
                        *o = *o + pj * b;
                    }
                }
            }
        }
        let rg = self.rg(qi) || self.rg(ki) || self.rg(vi);
        Ok(self.push(
            Tensor::from_parts(vec![tq, d], out),
            Op::Attention { q: qi, k: ki, v: vi, heads, probs },
            rg,
        ))
    }

    /// `mean((a - b)²)` over all elements.
    pub fn sq_err_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        self.same_shape(ai, bi, "sq_err_mean")?;
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .fold(S::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let t = Tensor::scalar(s / S::of(av.len() as f64));
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(t, Op::SqErrMean(ai, bi), rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let li = self.idx(loss);
        if self.nodes[li].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(vec![S::one()]);
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            params: self
                .params
                .iter()
                .map(|(&p, &v)| (p, v.idx))
                .collect(),
        })
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    let bv = self.nodes[b].value.data();
                    gemm_nt_acc(g, bv, self.slot(grads, a), m, k, n);
                }
                if self.rg(b) {
                    let av = self.nodes[a].value.data();
                    gemm_tn_acc(av, g, self.slot(grads, b), m, k, n);
                }
            }
            &Op::Add(a, b) => {
                self.acc_scaled(grads, a, g, S::one());
                self.acc_scaled(grads, b, g, S::one());
            }
            &Op::Sub(a, b) => {
                self.acc_scaled(grads, a, g, S::one());
                self.acc_scaled(grads, b, g, -S::one());
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let bv = self.nodes[b].value.data();
                    for ((o, &gi), &y) in self.slot(grads, a).iter_mut().zip(g).zip(bv) {
                        *o = *o + gi * y;
                    }
                }
                if self.rg(b) {
                    let av = self.nodes[a].value.data();
                    for ((o, &gi), &x) in self.slot(grads, b).iter_mut().zip(g).zip(av) {
                        *o = *o + gi * x;
                    }
                }
            }
            &Op::Scale(x, c) => self.acc_scaled(grads, x, g, c),
            &Op::AddRow { x, row } => {
                self.acc_scaled(grads, x, g, S::one());
                if self.rg(row) {
                    let n = self.nodes[row].value.len();
                    let slot = self.slot(grads, row);
                    for chunk in g.chunks(n) {
                        for (o, &gi) in slot.iter_mut().zip(chunk) {
                            *o = *o + gi;
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if self.rg(x) {
                    for o in self.slot(grads, x).iter_mut() {
                        *o = *o + g[0];
                    }
                }
            }
            &Op::Mean(x) => {
                if self.rg(x) {
                    let c = g[0] / S::of(self.nodes[x].value.len() as f64);
                    for o in self.slot(grads, x).iter_mut() {
                        *o = *o + c;
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(c, x) in terms {
                    self.acc_scaled(grads, x, g, c);
                }
            }
            &Op::Gelu(x) => {
                if self.rg(x) {
                    let xv = self.nodes[x].value.data();
                    for ((o, &gi), &xi) in self.slot(grads, x).iter_mut().zip(g).zip(xv) {
                        *o = *o + gi * gelu_grad(xi);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let n = self.nodes[gain].value.len();
                let gv = self.nodes[gain].value.data();
                if self.rg(gain) {
                    let slot = self.slot(grads, gain);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((o, &gi), &h) in slot.iter_mut().zip(gr).zip(hr) {
                            *o = *o + gi * h;
                        }
                    }
                }
                if self.rg(bias) {
                    let slot = self.slot(grads, bias);
                    for gr in g.chunks(n) {
                        for (o, &gi) in slot.iter_mut().zip(gr) {
                            *o = *o + gi;
                        }
                    }
                }
                if self.rg(x) {
                    let nn = S::of(n as f64);
                    let slot = self.slot(grads, x);
                    let mut dh = vec![S::zero(); n];
                    for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_dh = S::zero();
                        let mut mean_dhh = S::zero();
                        for j in 0..n {
                            dh[j] = gr[j] * gv[j];
                            mean_dh = mean_dh + dh[j];
                            mean_dhh = mean_dhh + dh[j] * hr[j];
                        }
                        mean_dh = mean_dh / nn;
                        mean_dhh = mean_dhh / nn;
                        let out = &mut slot[r * n..(r + 1) * n];
                        for j in 0..n {
                            out[j] = out[j] + rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                if self.rg(x) {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let slot = self.slot(grads, x);
                    for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(slot.chunks_mut(n)) {
                        let dot = gr.iter().zip(yr).fold(S::zero(), |a, (&gi, &yi)| a + gi * yi);
                        for j in 0..n {
                            out[j] = out[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::PickLogSoftmax { logits, rows, targets, probs } => {
                if self.rg(*logits) {
                    let v = self.nodes[*logits].value.cols();
                    let slot = self.slot(grads, *logits);
                    for (r, (&row, &t)) in rows.iter().zip(targets).enumerate() {
                        let p = &probs[r * v..(r + 1) * v];
                        let out = &mut slot[row * v..(row + 1) * v];
                        for j in 0..v {
                            out[j] = out[j] - g[r] * p[j];
                        }
                        out[t] = out[t] + g[r];
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let c = self.nodes[*table].value.cols();
                    let slot = self.slot(grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        let out = &mut slot[id * c..(id + 1) * c];
                        for (o, &gi) in out.iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *o = *o + gi;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    self.acc_scaled(grads, p, &g[off..off + len], S::one());
                    off += len;
                }
            }
            &Op::ConcatCols(a, b) => {
                let ca = self.nodes[a].value.cols();
                let cb = self.nodes[b].value.cols();
                for (part, lo, w) in [(a, 0, ca), (b, ca, cb)] {
                    if self.rg(part) {
                        let slot = self.slot(grads, part);
                        for (r, gr) in g.chunks(ca + cb).enumerate() {
                            for j in 0..w {
                                slot[r * w + j] = slot[r * w + j] + gr[lo + j];
                            }
                        }
                    }
                }
            }
            &Op::SliceRows { x, start } => {
                if self.rg(x) {
                    let c = self.nodes[x].value.cols();
                    let slot = self.slot(grads, x);
                    for (o, &gi) in slot[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *o = *o + gi;
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
            &Op::SqErrMean(a, b) => {
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                let c = g[0] * S::of(2.0) / S::of(av.len() as f64);
                if self.rg(a) {
                    for ((o, &x), &y) in self.slot(grads, a).iter_mut().zip(av).zip(bv) {
                        *o = *o + c * (x - y);
                    }
                }
                if self.rg(b) {
                    for ((o, &x), &y) in self.slot(grads, b).iter_mut().zip(av).zip(bv) {
                        *o = *o - c * (x - y);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: &[S],
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let (qv, kv, vv) = (
            self.nodes[q].value.data(),
            self.nodes[k].value.data(),
            self.nodes[v].value.data(),
        );
        let d = self.nodes[q].value.cols();
        let tq = self.nodes[q].value.rows();
        let tk = self.nodes[k].value.rows();
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let mut dq = vec![S::zero(); tq * d];
        let mut dk = vec![S::zero(); tk * d];
        let mut dv = vec![S::zero(); tk * d];
        let mut ds = vec![S::zero(); tk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let grow = &g[i * d + off..i * d + off + dh];
                let mut dot = S::zero();
                for j in 0..tk {
                    if p[j] == S::zero() {
                        ds[j] = S::zero();
                        continue;
                    }
                    let vrow = &vv[j * d + off..j * d + off + dh];
                    let mut dp = S::zero();
                    for (&a, &b) in grow.iter().zip(vrow) {
                        dp = dp + a * b;
                    }
                    ds[j] = dp;
                    dot = dot + p[j] * dp;
                    let dvrow = &mut dv[j * d + off..j * d + off + dh];
                    for (o, &a) in dvrow.iter_mut().zip(grow) {
                        *o = *o + p[j] * a;
                    }
                }
                for j in 0..tk {
                    if p[j] == S::zero() {
                        continue;
                    }
                    let dsj = p[j] * (ds[j] - dot) * scale;
                    let krow = &kv[j * d + off..j * d + off + dh];
                    let qrow = &qv[i * d + off..i * d + off + dh];
                    let dqrow = &mut dq[i * d + off..i * d + off + dh];
                    for (o, &b) in dqrow.iter_mut().zip(krow) {
                        *o = *o + dsj * b;
                    }
                    let dkrow = &mut dk[j * d + off..j * d + off + dh];
                    for (o, &a) in dkrow.iter_mut().zip(qrow) {
                        *o = *o + dsj * a;
                    }
                }
            }
        }
        self.acc_scaled(grads, q, &dq, S::one());
        self.acc_scaled(grads, k, &dk, S::one());
        self.acc_scaled(grads, v, &dv, S::one());
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<S>>], i: usize) -> &'g mut Vec<S> {
        let len = self.nodes[i].value.len();
        grads[i].get_or_insert_with(|| vec![S::zero(); len])
    }

    fn acc_scaled(&self, grads: &mut [Option<Vec<S>>], i: usize, g: &[S], c: S) {
        if !self.rg(i) {
            return;
        }
        let slot = self.slot(grads, i);
        if c == S::one() {
            for (o, &x) in slot.iter_mut().zip(g) {
                *o = *o + x;
            }
        } else {
            for (o, &x) in slot.iter_mut().zip(g) {
                *o = *o + c * x;
            }
        }
    }

    pub(crate) fn node_shape(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<S> {
    tape: u64,
    grads: Vec<Option<Vec<S>>>,
    params: Vec<(ParamId, usize)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to any node; `None` if the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape<S>, v: Var) -> Option<Tensor<S>> {
        assert_eq!(v.tape, self.tape, "gradients queried with a foreign variable");
        let g = self.grads.get(v.idx)?.as_ref()?;
        Some(Tensor::from_parts(tape.node_shape(v.idx).to_vec(), g.clone()))
    }

    /// Gradient for every parameter in `store`. Parameters the loss never
    /// touched get an explicit zero gradient.
    pub fn param_map(&self, tape: &Tape<S>, store: &ParamStore<S>) -> GradientMap<S> {
        let mut map = GradientMap::zeros_like(store);
        for &(p, idx) in &self.params {
            if let Some(Some(g)) = self.grads.get(idx) {
                map.set(p, Tensor::from_parts(tape.node_shape(idx).to_vec(), g.clone()));
            }
        }
        map
    }
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let mx = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    let mut z = S::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        z = z + *x;
    }
    for x in row.iter_mut() {
        *x = *x / z;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `(1 + tanh u) / 2` written as a logistic, which costs one `exp`.
fn gelu_gate<S: Scalar>(x: S) -> S {
    let u = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    S::one() / (S::one() + (-(u + u)).exp())
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    x * gelu_gate(x)
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let s = gelu_gate(x);
    let du = S::of(GELU_C) * (S::one() + S::of(3.0 * GELU_A) * x * x);
    s + S::of(2.0) * x * s * (S::one() - s) * du
}
