//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every executed op in order; [`Graph::backward`]
//! replays the record in exact reverse order and sums gradient
//! contributions per node. Inputs can be borrowed (`constant`, `param`) so
//! frozen weights are never copied into the tape.

mod check;

use std::borrow::Cow;

pub use check::{grad_check, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, softmax_in_place, Scalar, Tensor};
use crate::vit::AttentionMask;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Additive bias standing in for −∞ on masked attention scores.
pub const MASK_FILL: f64 = -1e9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op<S> {
    Leaf,
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        allowed: Option<Vec<Vec<usize>>>,
        probs: Vec<S>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    Sum(Var),
}

struct Node<'a, S: Scalar> {
    value: Cow<'a, Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// The gradient tape. Single-threaded by construction; separate training
/// jobs each own their own graph.
pub struct Graph<'a, S: Scalar = f32> {
    nodes: Vec<Node<'a, S>>,
}

impl<S: Scalar> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<S>>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, t: &'a Tensor<S>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn param_owned(&mut self, t: Tensor<S>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Non-trainable leaf borrowing its value.
    pub fn constant(&mut self, t: &'a Tensor<S>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, t: Tensor<S>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Leaf that is trainable or not depending on `trainable`.
    pub fn leaf(&mut self, t: &'a Tensor<S>, trainable: bool) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    /// `a · b` for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (ta.dims2()?, tb.dims2()?);
        if ta.rank() != 2 || tb.rank() != 2 || k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(da[i * k + p], &db[p * n..(p + 1) * n], orow);
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.derived(t, Op::Matmul(a, b), &[a, b]))
    }

    /// `x · wᵀ + b` with `w` stored `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (rows, inp) = tx.dims2()?;
        let (outp, inp2) = tw.dims2()?;
        if inp != inp2 || tw.rank() != 2 {
            return Err(Error::shape("linear", tx.shape(), tw.shape()));
        }
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.numel() != outp {
                return Err(Error::shape("linear bias", tw.shape(), tb.shape()));
            }
        }
        let (dx, dw) = (tx.data(), tw.data());
        let mut out = vec![S::zero(); rows * outp];
        for r in 0..rows {
            let xr = &dx[r * inp..(r + 1) * inp];
            for o in 0..outp {
                out[r * outp + o] = dot(xr, &dw[o * inp..(o + 1) * inp]);
            }
        }
        if let Some(b) = b {
            let db = self.value(b).data();
            for r in 0..rows {
                for o in 0..outp {
                    out[r * outp + o] += db[o];
                }
            }
        }
        let t = Tensor::new(vec![rows, outp], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.derived(t, Op::Linear { x, w, b }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.derived(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`cols` row to every row of `x` (the only broadcast).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (rows, cols) = tx.dims2()?;
        if tr.numel() != cols {
            return Err(Error::shape("add_row", tx.shape(), tr.shape()));
        }
        let mut data = tx.data().to_vec();
        for r in 0..rows {
            for (o, &b) in data[r * cols..(r + 1) * cols].iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.derived(t, Op::AddRow(x, row), &[x, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.derived(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = S::of(c);
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.derived(t, Op::Scale(x, c), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (c, a, half) = (S::of(GELU_C), S::of(GELU_A), S::of(0.5));
        let data = tx
            .data()
            .iter()
            .map(|&v| half * v * (S::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.derived(t, Op::Gelu(x), &[x])
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2()?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != cols || tb.numel() != cols {
            return Err(Error::shape("layernorm", tx.shape(), tg.shape()));
        }
        let (g, b) = (tg.data(), tb.data());
        let n = S::of(cols as f64);
        let eps = S::of(eps);
        let mut xhat = vec![S::zero(); rows * cols];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let xr = tx.row(r);
            let mean = xr.iter().copied().sum::<S>() / n;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (xr[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let keep = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let (xhat, rstd) = if keep { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.derived(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = crate::tensor::softmax(self.value(x), axis)?;
        Ok(self.derived(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[Tq, d]`, `k` and `v` are `[Tk, d]`. Masked entries receive
    /// the additive [`MASK_FILL`] before the softmax; because every query
    /// row keeps at least one key, their weight underflows to exactly zero,
    /// so they are skipped rather than materialized.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&AttentionMask>) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = tq.dims2()?;
        let (nk, dk) = tk.dims2()?;
        if dk != d || tv.shape() != tk.shape() {
            return Err(Error::shape("attention", tq.shape(), tk.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{d} features do not split into {heads} heads")));
        }
        let allowed = match mask {
            Some(m) => {
                if m.queries() != nq || m.keys() != nk {
                    return Err(Error::shape("attention mask", &[m.queries(), m.keys()], &[nq, nk]));
                }
                m.validate()?;
                Some(m.allowed_keys())
            }
            None => {
                if nk == 0 {
                    return Err(Error::Mask("attention over zero keys".into()));
                }
                None
            }
        };
        let dh = d / heads;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![S::zero(); heads * nq * nk];
        let mut out = vec![S::zero(); nq * d];
        let all: Vec<usize> = (0..nk).collect();
        let mut scores = Vec::with_capacity(nk);
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let keys = allowed.as_ref().map_or(all.as_slice(), |a| a[i].as_slice());
                let qi = &qd[i * d + off..i * d + off + dh];
                scores.clear();
                scores.extend(
                    keys.iter()
                        .map(|&j| dot(qi, &kd[j * d + off..j * d + off + dh]) * scale),
                );
                softmax_in_place(&mut scores);
                let prow = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (&j, &p) in keys.iter().zip(&scores) {
                    prow[j] = p;
                    axpy(p, &vd[j * d + off..j * d + off + dh], orow);
                }
            }
        }
        let t = Tensor::new(vec![nq, d], out)?;
        let keep = self.requires_grad(q) || self.requires_grad(k) || self.requires_grad(v);
        let probs = if keep { probs } else { Vec::new() };
        Ok(self.derived(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                allowed,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_rows(&tensors)?;
        Ok(self.derived(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, end)?;
        Ok(self.derived(t, Op::SliceRows { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.derived(t, Op::Reshape(x), &[x]))
    }

    /// Column-wise mean of a rank-2 tensor, shape `[1, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2()?;
        let mut out = vec![S::zero(); cols];
        for r in 0..rows {
            for (o, &v) in out.iter_mut().zip(tx.row(r)) {
                *o += v;
            }
        }
        let n = S::of(rows as f64);
        out.iter_mut().for_each(|o| *o /= n);
        let t = Tensor::new(vec![1, cols], out)?;
        Ok(self.derived(t, Op::MeanRows(x), &[x]))
    }

    /// Mean over rows of `−log softmax(logits_r)[label_r]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, classes) = tl.dims2()?;
        if rows != labels.len() {
            return Err(Error::shape("cross_entropy", tl.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label: bad, classes });
        }
        let mut probs = tl.data().to_vec();
        let mut loss = S::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &mut probs[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            loss += lse - row[label];
            softmax_in_place(row);
        }
        loss /= S::of(rows as f64);
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite cross-entropy".into()));
        }
        Ok(self.derived(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<S>();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Runs reverse accumulation from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape("backward root", self.value(root).shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![S::one()]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a, S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.dims2(*a).expect("checked");
                let n = self.dims2(*b).expect("checked").1;
                if rg(*a) {
                    let db = val(*b);
                    let ga = slot(grads, *a, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] += dot(&g[i * n..(i + 1) * n], &db[p * n..(p + 1) * n]);
                        }
                    }
                }
                if rg(*b) {
                    let da = val(*a);
                    let gb = slot(grads, *b, k * n);
                    for i in 0..m {
                        for p in 0..k {
                            axpy(da[i * k + p], &g[i * n..(i + 1) * n], &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (rows, inp) = self.dims2(*x).expect("checked");
                let outp = self.dims2(*w).expect("checked").0;
                if rg(*x) {
                    let dw = val(*w);
                    let gx = slot(grads, *x, rows * inp);
                    for r in 0..rows {
                        for o in 0..outp {
                            axpy(
                                g[r * outp + o],
                                &dw[o * inp..(o + 1) * inp],
                                &mut gx[r * inp..(r + 1) * inp],
                            );
                        }
                    }
                }
                if rg(*w) {
                    let dx = val(*x);
                    let gw = slot(grads, *w, outp * inp);
                    for r in 0..rows {
                        for o in 0..outp {
                            axpy(
                                g[r * outp + o],
                                &dx[r * inp..(r + 1) * inp],
                                &mut gw[o * inp..(o + 1) * inp],
                            );
                        }
                    }
                }
                if let Some(b) = b {
                    if rg(*b) {
                        let gb = slot(grads, *b, outp);
                        for r in 0..rows {
                            for o in 0..outp {
                                gb[o] += g[r * outp + o];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        accumulate(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if rg(*x) {
                    accumulate(slot(grads, *x, g.len()), g);
                }
                if rg(*row) {
                    let cols = self.value(*row).numel();
                    let gr = slot(grads, *row, cols);
                    for chunk in g.chunks_exact(cols) {
                        accumulate(gr, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                if rg(*a) {
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * db[i];
                    }
                }
                if rg(*b) {
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * da[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if rg(*x) {
                    axpy(*c, g, slot(grads, *x, g.len()));
                }
            }
            Op::Gelu(x) => {
                if rg(*x) {
                    let dx = val(*x);
                    let (c, a, half) = (S::of(GELU_C), S::of(GELU_A), S::of(0.5));
                    let three = S::of(3.0);
                    let gx = slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        let v = dx[i];
                        let t = (c * (v + a * v * v * v)).tanh();
                        let d =
                            half * (S::one() + t) + half * v * (S::one() - t * t) * c * (S::one() + three * a * v * v);
                        gx[i] += g[i] * d;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = self.dims2(*x).expect("checked");
                let gam = val(*gamma);
                if rg(*gamma) {
                    let gg = slot(grads, *gamma, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if rg(*beta) {
                    let gb = slot(grads, *beta, cols);
                    for chunk in g.chunks_exact(cols) {
                        accumulate(gb, chunk);
                    }
                }
                if rg(*x) {
                    let n = S::of(cols as f64);
                    let gx = slot(grads, *x, rows * cols);
                    let mut dxhat = vec![S::zero(); cols];
                    for r in 0..rows {
                        let h = &xhat[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dxhat[c] = g[r * cols + c] * gam[c];
                        }
                        let mean_d = dxhat.iter().copied().sum::<S>() / n;
                        let mean_dh = dxhat.iter().zip(h).map(|(&a, &b)| a * b).sum::<S>() / n;
                        for c in 0..cols {
                            gx[r * cols + c] += rstd[r] * (dxhat[c] - mean_d - h[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if rg(*x) {
                    let y = node.value.data();
                    let shape = node.value.shape();
                    let len = shape.get(*axis).copied().unwrap_or(1);
                    let inner: usize = shape.get(axis + 1..).map_or(1, |s| s.iter().product());
                    let outer = y.len() / (len * inner).max(1);
                    let gx = slot(grads, *x, y.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let s: S = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                gx[p] += y[p] * (g[p] - s);
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                allowed,
                probs,
            } => {
                let (nq, d) = self.dims2(*q).expect("checked");
                let nk = self.dims2(*k).expect("checked").0;
                let dh = d / heads;
                let scale = S::of(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut gq = vec![S::zero(); nq * d];
                let mut gk = vec![S::zero(); nk * d];
                let mut gv = vec![S::zero(); nk * d];
                let all: Vec<usize> = (0..nk).collect();
                let mut dp = Vec::with_capacity(nk);
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..nq {
                        let keys = allowed.as_ref().map_or(all.as_slice(), |a| a[i].as_slice());
                        let prow = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                        let gi = &g[i * d + off..i * d + off + dh];
                        dp.clear();
                        dp.extend(keys.iter().map(|&j| dot(gi, &vd[j * d + off..j * d + off + dh])));
                        let s: S = keys.iter().zip(&dp).map(|(&j, &x)| prow[j] * x).sum();
                        let qi = &qd[i * d + off..i * d + off + dh];
                        for (&j, &dpj) in keys.iter().zip(&dp) {
                            let p = prow[j];
                            let ds = p * (dpj - s) * scale;
                            axpy(
                                ds,
                                &kd[j * d + off..j * d + off + dh],
                                &mut gq[i * d + off..i * d + off + dh],
                            );
                            axpy(ds, qi, &mut gk[j * d + off..j * d + off + dh]);
                            axpy(p, gi, &mut gv[j * d + off..j * d + off + dh]);
                        }
                    }
                }
                for (var, local) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if rg(var) {
                        accumulate(slot(grads, var, local.len()), &local);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if rg(p) {
                        accumulate(slot(grads, p, n), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                if rg(*x) {
                    let tx = self.value(*x);
                    let cols = tx.dims2().expect("checked").1;
                    let gx = slot(grads, *x, tx.numel());
                    accumulate(&mut gx[start * cols..start * cols + g.len()], g);
                }
            }
            Op::Reshape(x) => {
                if rg(*x) {
                    accumulate(slot(grads, *x, g.len()), g);
                }
            }
            Op::MeanRows(x) => {
                if rg(*x) {
                    let (rows, cols) = self.dims2(*x).expect("checked");
                    let inv = S::one() / S::of(rows as f64);
                    let gx = slot(grads, *x, rows * cols);
                    for r in 0..rows {
                        axpy(inv, g, &mut gx[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if rg(*logits) {
                    let rows = labels.len();
                    let classes = probs.len() / rows;
                    let coef = g[0] / S::of(rows as f64);
                    let gl = slot(grads, *logits, probs.len());
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { S::one() } else { S::zero() };
                            gl[r * classes + c] += coef * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if rg(*x) {
                    let gx = slot(grads, *x, self.value(*x).numel());
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
        }
    }
}

fn slot<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn accumulate<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient buffer for `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v` as a tensor shaped like `like`; zeros when absent.
    pub fn tensor(&self, v: Var, like: &Tensor<S>) -> Tensor<S> {
        match self.get(v) {
            Some(g) => Tensor::new(like.shape().to_vec(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(like.shape()),
        }
    }
}

#[cfg(test)]
mod tests;
