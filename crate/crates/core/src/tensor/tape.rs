//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. `backward` replays the tape in reverse and returns
//! gradients for the nodes registered with [`Tape::param`]. Nodes that do not
//! depend on any parameter are skipped entirely.

use std::collections::HashMap;

use rayon::prelude::*;

use super::{dot, gemm_nn, gemm_nt, gemm_tn, sigmoid, softmax_row_f64, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f32 },
    Relu { a: Var },
    Silu { a: Var },
    RmsNorm { x: Var, gain: Var, inv: Vec<f32> },
    Softmax { a: Var },
    Sum { a: Var },
    Mask { a: Var, keep: Vec<bool> },
    Embedding { table: Var, ids: Vec<u32> },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f32> },
    CrossEntropy { logits: Var, targets: Vec<u32>, probs: Vec<f32> },
    KlDiv { logits: Var, diff: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients of a scalar loss with respect to the registered parameters.
#[derive(Debug)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Result<&Tensor> {
        self.grads
            .get(&var)
            .ok_or_else(|| Error::Autodiff(format!("{var:?} is not a registered parameter")))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input: no gradient flows to it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable input whose gradient `backward` reports.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b }, rg))
    }

    /// `a × bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNt { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = super::add_row(self.value(a), self.value(row))?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow { a, row }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::mul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let out = super::scale(self.value(a), s)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale { a, s }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = super::relu(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Relu { a }, rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = super::silu(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Silu { a }, rg))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        let (out, inv) = super::rms_norm_with_inv(self.value(x), self.value(gain), eps)?;
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let axis = x.shape().len().checked_sub(1).ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let out = super::softmax(x, axis)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax { a }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = super::sum(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::Sum { a }, rg)
    }

    /// Zeroes entries with `|x| <= tau`. The keep pattern is a constant for
    /// differentiation: surviving entries pass gradient through, masked ones
    /// receive none. Returns the output and the number of masked entries.
    pub fn mask(&mut self, a: Var, tau: f32) -> Result<(Var, usize)> {
        if !(tau >= 0.0) {
            return Err(Error::InvalidArgument(format!("mask threshold must be >= 0, got {tau}")));
        }
        let x = self.value(a);
        let keep: Vec<bool> = x.data().iter().map(|v| v.abs() > tau).collect();
        let data = x.data().iter().zip(&keep).map(|(&v, &k)| if k { v } else { 0.0 }).collect();
        let out = Tensor::from_raw(x.shape().to_vec(), data);
        let masked = keep.iter().filter(|k| !**k).count();
        let rg = self.rg(a);
        Ok((self.push(out, Op::Mask { a, keep }, rg), masked))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = match t.shape() {
            &[r, c] => (r, c),
            s => return Err(Error::shape("embedding", format!("table shape {s:?}"))),
        };
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            let id = id as usize;
            if id >= rows {
                return Err(Error::shape("embedding", format!("index {id} >= {rows} rows")));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::from_raw(vec![ids.len(), cols], data);
        let rg = self.rg(table);
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Multi-head causal self-attention over `[batch·seq, d]` projections.
    /// Position `t` attends to positions `0..=t` of its own sequence only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let d = match qt.shape() {
            &[n, d] if n == batch * seq => d,
            s => return Err(Error::shape("attention", format!("q shape {s:?} for batch {batch} seq {seq}"))),
        };
        if kt.shape() != qt.shape() || vt.shape() != qt.shape() {
            return Err(Error::shape("attention", "q, k, v shapes differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("d {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        let mut out = vec![0f32; batch * seq * d];
        let mut probs = vec![0f32; batch * heads * seq * seq];
        out.par_chunks_mut(seq * d.max(1))
            .zip(probs.par_chunks_mut((heads * seq * seq).max(1)))
            .enumerate()
            .for_each(|(b, (o, p))| {
                let base = b * seq * d;
                let mut scores = vec![0f32; seq];
                for h in 0..heads {
                    let off = h * dh;
                    for t in 0..seq {
                        let qrow = &qd[base + t * d + off..base + t * d + off + dh];
                        let mut max = f32::NEG_INFINITY;
                        for s in 0..=t {
                            let krow = &kd[base + s * d + off..base + s * d + off + dh];
                            scores[s] = dot(qrow, krow) * scale;
                            max = max.max(scores[s]);
                        }
                        let mut total = 0f64;
                        for sc in scores[..=t].iter_mut() {
                            *sc = (*sc - max).exp();
                            total += f64::from(*sc);
                        }
                        let prow = &mut p[(h * seq + t) * seq..(h * seq + t + 1) * seq];
                        let orow = &mut o[t * d + off..t * d + off + dh];
                        for s in 0..=t {
                            let w = (f64::from(scores[s]) / total) as f32;
                            prow[s] = w;
                            let vrow = &vd[base + s * d + off..base + s * d + off + dh];
                            for (oi, vi) in orow.iter_mut().zip(vrow) {
                                *oi += w * vi;
                            }
                        }
                    }
                }
            });
        let out = Tensor::checked("attention", vec![batch * seq, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        if !rg {
            probs = Vec::new();
        }
        Ok(self.push(out, Op::Attention { q, k, v, batch, seq, heads, probs }, rg))
    }

    /// Mean next-token negative log-likelihood of `logits[N, V]` against
    /// `targets[N]`, accumulated in f64.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let x = self.value(logits);
        let (n, v) = x.as_rows();
        if targets.len() != n || x.shape().len() != 2 || n == 0 {
            return Err(Error::shape("cross_entropy", format!("logits {:?}, {} targets", x.shape(), targets.len())));
        }
        let rg = self.rg(logits);
        let mut probs = if rg { vec![0f32; n * v] } else { Vec::new() };
        let mut buf = vec![0f64; v];
        let mut total = 0f64;
        for (i, &t) in targets.iter().enumerate() {
            let t = t as usize;
            if t >= v {
                return Err(Error::shape("cross_entropy", format!("target {t} >= vocab {v}")));
            }
            let row = x.row(i);
            let (log_z, max) = softmax_row_f64(row, &mut buf);
            total += log_z + max - f64::from(row[t]);
            if rg {
                for (p, b) in probs[i * v..(i + 1) * v].iter_mut().zip(&buf) {
                    *p = *b as f32;
                }
            }
        }
        let loss = Tensor::checked("cross_entropy", Vec::new(), vec![(total / n as f64) as f32])?;
        Ok(self.push(loss, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    /// Mean over rows of `KL(softmax(teacher) ‖ softmax(student))`, the
    /// teacher being a constant.
    pub fn kl_div(&mut self, teacher_logits: &Tensor, student_logits: Var) -> Result<Var> {
        let s = self.value(student_logits);
        if s.shape() != teacher_logits.shape() || s.shape().len() != 2 {
            return Err(Error::shape("kl_div", format!("{:?} vs {:?}", teacher_logits.shape(), s.shape())));
        }
        let (n, v) = s.as_rows();
        let rg = self.rg(student_logits);
        let mut diff = if rg { vec![0f32; n * v] } else { Vec::new() };
        let mut p = vec![0f64; v];
        let mut q = vec![0f64; v];
        let mut total = 0f64;
        for i in 0..n {
            total += kl_row(teacher_logits.row(i), s.row(i), &mut p, &mut q);
            if rg {
                for (d, (qi, pi)) in diff[i * v..(i + 1) * v].iter_mut().zip(q.iter().zip(&p)) {
                    *d = (qi - pi) as f32;
                }
            }
        }
        let loss = Tensor::checked("kl_div", Vec::new(), vec![(total / n.max(1) as f64) as f32])?;
        Ok(self.push(loss, Op::KlDiv { logits: student_logits, diff }, rg))
    }

    /// Gradients of the scalar `loss` for every registered parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Autodiff(format!("{loss:?} is not on this tape")));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!("loss must be scalar, got shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let grads = self
            .params
            .iter()
            .filter(|p| p.0 <= loss.0)
            .map(|&p| {
                let shape = self.value(p).shape().to_vec();
                let n = self.value(p).len();
                let g = grads[p.0].take().unwrap_or_else(|| vec![0.0; n]);
                (p, Tensor::from_raw(shape, g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, delta: Vec<f32>| accumulate(grads, v, delta);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, k) = self.value(a).as_rows();
                let n = self.value(b).shape()[1];
                if self.rg(a) {
                    acc(a, gemm_nt(g, val(b), m, n, k));
                }
                if self.rg(b) {
                    acc(b, gemm_tn(val(a), g, m, k, n));
                }
            }
            &Op::MatMulNt { a, b } => {
                let (m, k) = self.value(a).as_rows();
                let n = self.value(b).shape()[0];
                if self.rg(a) {
                    acc(a, gemm_nn(g, val(b), m, n, k));
                }
                if self.rg(b) {
                    acc(b, gemm_tn(g, val(a), m, n, k));
                }
            }
            &Op::Add { a, b } => {
                if self.rg(a) {
                    acc(a, g.to_vec());
                }
                if self.rg(b) {
                    acc(b, g.to_vec());
                }
            }
            &Op::AddRow { a, row } => {
                if self.rg(a) {
                    acc(a, g.to_vec());
                }
                if self.rg(row) {
                    let cols = self.value(row).len();
                    let mut s = vec![0f64; cols];
                    for r in g.chunks(cols) {
                        for (si, gi) in s.iter_mut().zip(r) {
                            *si += f64::from(*gi);
                        }
                    }
                    acc(row, s.into_iter().map(|x| x as f32).collect());
                }
            }
            &Op::Mul { a, b } => {
                if self.rg(a) {
                    acc(a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                }
                if self.rg(b) {
                    acc(b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect());
                }
            }
            &Op::Scale { a, s } => acc(a, g.iter().map(|g| g * s).collect()),
            &Op::Relu { a } => {
                acc(a, g.iter().zip(val(a)).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect());
            }
            &Op::Silu { a } => {
                let d = g
                    .iter()
                    .zip(val(a))
                    .map(|(&g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                acc(a, d);
            }
            Op::RmsNorm { x, gain, inv } => {
                let (xd, gd) = (val(*x), val(*gain));
                let cols = gd.len();
                let mut dx = vec![0f32; xd.len()];
                let mut dgain = vec![0f64; cols];
                for (r, &s) in inv.iter().enumerate() {
                    let xr = &xd[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut proj = 0f64;
                    for j in 0..cols {
                        let xhat = f64::from(xr[j] * s);
                        dgain[j] += f64::from(gr[j]) * xhat;
                        proj += f64::from(gr[j] * gd[j]) * xhat;
                    }
                    let proj = proj / cols as f64;
                    for j in 0..cols {
                        let xhat = f64::from(xr[j] * s);
                        dx[r * cols + j] = (f64::from(s) * (f64::from(gr[j] * gd[j]) - xhat * proj)) as f32;
                    }
                }
                if self.rg(*x) {
                    acc(*x, dx);
                }
                if self.rg(*gain) {
                    acc(*gain, dgain.into_iter().map(|v| v as f32).collect());
                }
            }
            &Op::Softmax { a } => {
                let y = node.value.data();
                let (_, cols) = node.value.as_rows();
                let mut dx = vec![0f32; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let inner: f64 = yr.iter().zip(gr).map(|(y, g)| f64::from(y * g)).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = (f64::from(yv) * (f64::from(gv) - inner)) as f32;
                    }
                }
                acc(a, dx);
            }
            &Op::Sum { a } => acc(a, vec![g[0]; self.value(a).len()]),
            Op::Mask { a, keep } => {
                acc(*a, g.iter().zip(keep).map(|(&g, &k)| if k { g } else { 0.0 }).collect());
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let cols = t.shape()[1];
                let mut dt = vec![0f32; t.len()];
                for (i, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    for (d, gv) in dt[id * cols..(id + 1) * cols].iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                        *d += gv;
                    }
                }
                acc(*table, dt);
            }
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                let (dq, dk, dv) = attention_backward(val(*q), val(*k), val(*v), g, probs, *batch, *seq, *heads);
                if self.rg(*q) {
                    acc(*q, dq);
                }
                if self.rg(*k) {
                    acc(*k, dk);
                }
                if self.rg(*v) {
                    acc(*v, dv);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).as_rows().1;
                let scale = g[0] / targets.len() as f32;
                let mut d: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * v + t as usize] -= scale;
                }
                acc(*logits, d);
            }
            Op::KlDiv { logits, diff } => {
                let n = self.value(*logits).as_rows().0;
                let scale = g[0] / n as f32;
                acc(*logits, diff.iter().map(|d| d * scale).collect());
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, delta: Vec<f32>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// `KL(softmax(p) ‖ softmax(q))` for one row, in f64. Leaves the two
/// probability vectors in the scratch buffers.
pub(crate) fn kl_row(p_logits: &[f32], q_logits: &[f32], p: &mut [f64], q: &mut [f64]) -> f64 {
    let (lzp, mp) = softmax_row_f64(p_logits, p);
    let (lzq, mq) = softmax_row_f64(q_logits, q);
    let mut kl = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            let log_p = f64::from(p_logits[i]) - mp - lzp;
            let log_q = f64::from(q_logits[i]) - mq - lzq;
            kl += p[i] * (log_p - log_q);
        }
    }
    kl
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    g: &[f32],
    probs: &[f32],
    batch: usize,
    seq: usize,
    heads: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let d = q.len() / (batch * seq).max(1);
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dq = vec![0f32; q.len()];
    let mut dk = vec![0f32; k.len()];
    let mut dv = vec![0f32; v.len()];
    let chunk = (seq * d).max(1);
    dq.par_chunks_mut(chunk)
        .zip(dk.par_chunks_mut(chunk))
        .zip(dv.par_chunks_mut(chunk))
        .enumerate()
        .for_each(|(b, ((dqb, dkb), dvb))| {
            let base = b * seq * d;
            let mut dp = vec![0f32; seq];
            for h in 0..heads {
                let off = h * dh;
                for t in 0..seq {
                    let prow = &probs[((b * heads + h) * seq + t) * seq..][..seq];
                    let grow = &g[base + t * d + off..][..dh];
                    let mut inner = 0f64;
                    for s in 0..=t {
                        let vrow = &v[base + s * d + off..][..dh];
                        dp[s] = dot(grow, vrow);
                        inner += f64::from(prow[s] * dp[s]);
                        for (dvi, gi) in dvb[s * d + off..][..dh].iter_mut().zip(grow) {
                            *dvi += prow[s] * gi;
                        }
                    }
                    let inner = inner as f32;
                    let qrow = &q[base + t * d + off..][..dh];
                    for s in 0..=t {
                        let ds = prow[s] * (dp[s] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = &k[base + s * d + off..][..dh];
                        for (dqi, ki) in dqb[t * d + off..][..dh].iter_mut().zip(krow) {
                            *dqi += ds * ki;
                        }
                        for (dki, qi) in dkb[s * d + off..][..dh].iter_mut().zip(qrow) {
                            *dki += ds * qi;
                        }
                    }
                }
            }
        });
    (dq, dk, dv)
}
