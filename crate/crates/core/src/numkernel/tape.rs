//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order and each node is visited exactly once.

use std::sync::Arc;

use super::attention_plan::AttentionPlan;
use super::counter;
use super::kernels::{self, dot, softmax_in_place};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics recorded by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for the running estimate.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// `Some` in training mode: statistics depend on `x`.
        stats: Option<BatchStats>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Gather {
        src: Var,
        index: Arc<Vec<Option<usize>>>,
    },
    ConcatRows(Vec<Var>),
    RowMean {
        x: Var,
        groups: Arc<Vec<Vec<usize>>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        plan: Arc<AttentionPlan>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-threaded recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    /// Training-mode batch statistics recorded by a batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { stats, .. } => stats.as_ref(),
            _ => None,
        }
    }

    /// Attention probabilities recorded by an attention node, laid out as
    /// `[group][head][query][key]` following the plan's group order.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ----- ops -------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// Affine map over the trailing dimension: `x[.., in] * w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[0] {
            return Err(mismatch("linear", &sx, sw));
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(mismatch("linear bias", self.shape(b), &[dout]));
            }
        }
        let rows = self.value(x).rows();
        let mut out = kernels::matmul(self.value(x).data(), self.value(w).data(), rows, din, dout);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in out.chunks_mut(dout) {
                for (o, bv) in r.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        let t = Tensor::new(&shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push("linear", t, Op::Linear { x, w, b }, &parents)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("add", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(va.shape(), data)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("mul", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(va.shape(), data)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v * s);
        self.push("scale", t, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| v.max(0.0));
        self.push("relu", t, Op::Relu(a), &[a])
    }

    /// Softmax over the trailing dimension, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.cols() == 0 {
            return Err(Error::EmptyReduction("softmax"));
        }
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(v.cols()) {
            softmax_in_place(row);
        }
        counter::add_elementwise(data.len() as u64);
        let t = Tensor::new(v.shape(), data)?;
        self.push("softmax", t, Op::Softmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::EmptyReduction("mean"));
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    /// Layer normalization over the trailing dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        if c == 0 {
            return Err(Error::EmptyReduction("layer_norm"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("layer_norm affine", self.shape(gamma), &[c]));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; v.len()];
        let mut out = vec![0.0; v.len()];
        let mut inv_std = Vec::with_capacity(v.rows());
        for (r, row) in v.data().chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        counter::add_elementwise(v.len() as u64);
        let t = Tensor::new(v.shape(), out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        self.push("layer_norm", t, op, &[x, gamma, beta])
    }

    /// Batch normalization of `x[rows, channels]` per channel.
    ///
    /// With `running = None` the statistics are taken from the batch (training
    /// mode) and recorded for [`Tape::batch_stats`]; otherwise the given
    /// `(mean, var)` are used as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("batch_norm affine", self.shape(gamma), &[c]));
        }
        let data = v.data();
        let (mean, var, stats) = match running {
            Some((m, s)) => {
                if m.len() != c || s.len() != c {
                    return Err(mismatch("batch_norm running stats", &[m.len()], &[c]));
                }
                (m.to_vec(), s.to_vec(), None)
            }
            None => {
                if r == 0 {
                    return Err(Error::EmptyReduction("batch_norm"));
                }
                let mut mean = vec![0.0; c];
                for row in data.chunks(c) {
                    for (m, x) in mean.iter_mut().zip(row) {
                        *m += x;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= r as f64);
                let mut var = vec![0.0; c];
                for row in data.chunks(c) {
                    for j in 0..c {
                        var[j] += (row[j] - mean[j]).powi(2);
                    }
                }
                let biased: Vec<f64> = var.iter().map(|s| s / r as f64).collect();
                let denom = if r > 1 { (r - 1) as f64 } else { 1.0 };
                let unbiased = var.iter().map(|s| s / denom).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, biased, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + NORM_EPS).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for i in 0..r {
            for j in 0..c {
                let h = (data[i * c + j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        counter::add_elementwise(data.len() as u64);
        let t = Tensor::new(v.shape(), out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            stats,
        };
        self.push("batch_norm", t, op, &[x, gamma, beta])
    }

    /// Mean cross-entropy of `logits[batch, classes]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let (b, k) = (v.rows(), v.cols());
        if b == 0 || k == 0 {
            return Err(Error::EmptyReduction("cross_entropy"));
        }
        if labels.len() != b {
            return Err(mismatch("cross_entropy labels", v.shape(), &[labels.len()]));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: k,
            });
        }
        let mut probs = v.data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(k).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
            softmax_in_place(row);
        }
        loss /= b as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Row gather into `[index.len() / slots, slots * width]`.
    ///
    /// Output row `i` concatenates source rows `index[i*slots .. (i+1)*slots]`;
    /// `None` entries produce zero padding.
    pub fn gather(
        &mut self,
        src: Var,
        index: Arc<Vec<Option<usize>>>,
        slots: usize,
    ) -> Result<Var> {
        let v = self.value(src);
        let (rows, w) = (v.rows(), v.cols());
        if slots == 0 || !index.len().is_multiple_of(slots) {
            return Err(mismatch("gather", &[index.len()], &[slots]));
        }
        let mut out = vec![0.0; index.len() * w];
        for (o, idx) in out.chunks_mut(w.max(1)).zip(index.iter()) {
            if let Some(s) = *idx {
                if s >= rows {
                    return Err(Error::IndexOutOfRange {
                        what: "gather",
                        index: s,
                        len: rows,
                    });
                }
                o.copy_from_slice(v.row(s));
            }
        }
        let t = Tensor::new(&[index.len() / slots, slots * w], out)?;
        self.push("gather", t, Op::Gather { src, index }, &[src])
    }

    /// Stack rank-2 inputs with equal width along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let w = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != w {
                return Err(mismatch("concat_rows", self.shape(parts[0]), v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / w.max(1);
        let t = Tensor::new(&[rows, w], data)?;
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Mean over each listed row set, giving `[groups, width]`.
    pub fn row_mean(&mut self, x: Var, groups: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let v = self.value(x);
        let (rows, w) = (v.rows(), v.cols());
        let mut out = vec![0.0; groups.len() * w];
        for (o, g) in out.chunks_mut(w.max(1)).zip(groups.iter()) {
            if g.is_empty() {
                return Err(Error::EmptyReduction("row_mean"));
            }
            for &r in g {
                if r >= rows {
                    return Err(Error::IndexOutOfRange {
                        what: "row_mean",
                        index: r,
                        len: rows,
                    });
                }
                for (a, b) in o.iter_mut().zip(v.row(r)) {
                    *a += b;
                }
            }
            let inv = 1.0 / g.len() as f64;
            o.iter_mut().for_each(|a| *a *= inv);
        }
        let t = Tensor::new(&[groups.len(), w], out)?;
        self.push("row_mean", t, Op::RowMean { x, groups }, &[x])
    }

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `q[nq, C]`, `k[nk, C]`, `v[nk, C]`; each head uses a contiguous slice of
    /// `C / heads` channels and scale `1/sqrt(C / heads)`. Query rows outside
    /// every group produce zero rows.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        plan: Arc<AttentionPlan>,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
            return Err(mismatch("attention", sq, sk));
        }
        let c = sq[1];
        if heads == 0 || c % heads != 0 {
            return Err(Error::config(format!(
                "{heads} heads do not divide width {c}"
            )));
        }
        if plan.query_rows() != sq[0] || plan.key_rows() != sk[0] {
            return Err(mismatch(
                "attention plan",
                &[plan.query_rows(), plan.key_rows()],
                &[sq[0], sk[0]],
            ));
        }
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; sq[0] * c];
        let mut probs = Vec::with_capacity(plan.score_entries() * heads);
        let mut madds = 0u64;
        let mut soft = 0u64;
        let mut scores = Vec::new();
        for g in plan.groups() {
            for h in 0..heads {
                let off = h * d;
                for &qi in &g.queries {
                    let qrow = &qd[qi * c + off..qi * c + off + d];
                    scores.clear();
                    for &kj in &g.keys {
                        scores.push(dot(qrow, &kd[kj * c + off..kj * c + off + d]) * scale);
                    }
                    madds += (g.keys.len() * d) as u64;
                    softmax_in_place(&mut scores);
                    soft += g.keys.len() as u64;
                    let orow = &mut out[qi * c + off..qi * c + off + d];
                    for (&p, &kj) in scores.iter().zip(&g.keys) {
                        for (o, x) in orow.iter_mut().zip(&vd[kj * c + off..kj * c + off + d]) {
                            *o += p * x;
                        }
                    }
                    madds += (g.keys.len() * d) as u64;
                    probs.extend_from_slice(&scores);
                }
            }
        }
        counter::add_madds(madds);
        counter::add_elementwise(soft);
        let t = Tensor::new(&[sq[0], c], out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            plan,
            probs,
        };
        self.push("attention", t, op, &[q, k, v])
    }

    // ----- backward --------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(mismatch(
                "backward (loss must be scalar)",
                self.shape(loss),
                &[],
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.needs(*a) {
                    let da = kernels::matmul_bt(gd, vb.data(), m, n, k);
                    accumulate(&mut grads[a.0], Tensor::new(va.shape(), da).unwrap());
                }
                if self.needs(*b) {
                    let db = kernels::matmul_at(va.data(), gd, m, k, n);
                    accumulate(&mut grads[b.0], Tensor::new(vb.shape(), db).unwrap());
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (rows, din, dout) = (vx.rows(), vw.shape()[0], vw.shape()[1]);
                if self.needs(*x) {
                    let dx = kernels::matmul_bt(gd, vw.data(), rows, dout, din);
                    accumulate(&mut grads[x.0], Tensor::new(vx.shape(), dx).unwrap());
                }
                if self.needs(*w) {
                    let dw = kernels::matmul_at(vx.data(), gd, rows, din, dout);
                    accumulate(&mut grads[w.0], Tensor::new(vw.shape(), dw).unwrap());
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; dout];
                        for r in gd.chunks(dout) {
                            for (d, x) in db.iter_mut().zip(r) {
                                *d += x;
                            }
                        }
                        accumulate(&mut grads[b.0], Tensor::new(&[dout], db).unwrap());
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if self.needs(*p) {
                        accumulate(&mut grads[p.0], g.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = gd.iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.0], Tensor::new(va.shape(), d).unwrap());
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], Tensor::new(vb.shape(), d).unwrap());
                }
            }
            Op::Scale(a, s) => {
                accumulate(&mut grads[a.0], g.map(|x| x * s));
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let d = gd
                    .iter()
                    .zip(va.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], Tensor::new(va.shape(), d).unwrap());
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c)) {
                    let s = dot(yr, gr);
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                accumulate(&mut grads[a.0], Tensor::new(y.shape(), d).unwrap());
            }
            Op::Sum(a) => {
                let s = self.shape(*a);
                accumulate(&mut grads[a.0], Tensor::full(s, gd[0]));
            }
            Op::Mean(a) => {
                let v = self.value(*a);
                accumulate(
                    &mut grads[a.0],
                    Tensor::full(v.shape(), gd[0] / v.len() as f64),
                );
            }
            Op::Reshape(a) => {
                let s = self.shape(*a);
                accumulate(&mut grads[a.0], g.clone().reshape(s).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let vx = self.value(*x);
                let c = vx.cols();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (gr, hr) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    accumulate(&mut grads[gamma.0], Tensor::new(&[c], dg).unwrap());
                    accumulate(&mut grads[beta.0], Tensor::new(&[c], db).unwrap());
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; vx.len()];
                    let mut dh = vec![0.0; c];
                    for (r, (gr, hr)) in gd.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dh[j] = gr[j] * gam[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / c as f64;
                        let m2 = dot(&dh, hr) / c as f64;
                        for j in 0..c {
                            dx[r * c + j] = inv_std[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(vx.shape(), dx).unwrap());
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stats,
            } => {
                let vx = self.value(*x);
                let (r, c) = (vx.rows(), vx.cols());
                let gam = self.value(*gamma).data();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (gr, hr) in gd.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; vx.len()];
                    for i in 0..r {
                        for j in 0..c {
                            let dh = gd[i * c + j] * gam[j];
                            dx[i * c + j] = if stats.is_some() {
                                let n = r as f64;
                                inv_std[j] / n
                                    * (n * dh - db[j] * gam[j] - xhat[i * c + j] * dg[j] * gam[j])
                            } else {
                                dh * inv_std[j]
                            };
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(vx.shape(), dx).unwrap());
                }
                if self.needs(*gamma) {
                    accumulate(&mut grads[gamma.0], Tensor::new(&[c], dg).unwrap());
                }
                if self.needs(*beta) {
                    accumulate(&mut grads[beta.0], Tensor::new(&[c], db).unwrap());
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let v = self.value(*logits);
                let (b, k) = (v.rows(), v.cols());
                let scale = gd[0] / b as f64;
                let mut d = probs.clone();
                for (i, row) in d.chunks_mut(k).enumerate() {
                    row[labels[i]] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= scale);
                }
                accumulate(&mut grads[logits.0], Tensor::new(v.shape(), d).unwrap());
            }
            Op::Gather { src, index } => {
                let v = self.value(*src);
                let w = v.cols();
                let mut d = vec![0.0; v.len()];
                for (gr, idx) in gd.chunks(w.max(1)).zip(index.iter()) {
                    if let Some(s) = *idx {
                        for (a, b) in d[s * w..(s + 1) * w].iter_mut().zip(gr) {
                            *a += b;
                        }
                    }
                }
                accumulate(&mut grads[src.0], Tensor::new(v.shape(), d).unwrap());
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let v = self.value(*p);
                    let n = v.len();
                    if self.needs(*p) {
                        let d = gd[off..off + n].to_vec();
                        accumulate(&mut grads[p.0], Tensor::new(v.shape(), d).unwrap());
                    }
                    off += n;
                }
            }
            Op::RowMean { x, groups } => {
                let v = self.value(*x);
                let w = v.cols();
                let mut d = vec![0.0; v.len()];
                for (gr, rows) in gd.chunks(w.max(1)).zip(groups.iter()) {
                    let inv = 1.0 / rows.len() as f64;
                    for &r in rows {
                        for (a, b) in d[r * w..(r + 1) * w].iter_mut().zip(gr) {
                            *a += b * inv;
                        }
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(v.shape(), d).unwrap());
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                plan,
                probs,
            } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let c = vq.cols();
                let d = c / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
                let mut dq = vec![0.0; vq.len()];
                let mut dk = vec![0.0; vk.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut dp = Vec::new();
                let mut pos = 0;
                for grp in plan.groups() {
                    let nk = grp.keys.len();
                    for h in 0..*heads {
                        let off = h * d;
                        for &qi in &grp.queries {
                            let p = &probs[pos..pos + nk];
                            pos += nk;
                            let go = &gd[qi * c + off..qi * c + off + d];
                            dp.clear();
                            for (&pj, &kj) in p.iter().zip(&grp.keys) {
                                let vrow = kj * c + off;
                                dp.push(dot(go, &vd[vrow..vrow + d]));
                                for (a, b) in dv[vrow..vrow + d].iter_mut().zip(go) {
                                    *a += pj * b;
                                }
                            }
                            let s = dot(p, &dp);
                            let qrow = qi * c + off;
                            for (j, &kj) in grp.keys.iter().enumerate() {
                                let ds = p[j] * (dp[j] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = kj * c + off;
                                for t in 0..d {
                                    dq[qrow + t] += ds * kd[krow + t];
                                    dk[krow + t] += ds * qd[qrow + t];
                                }
                            }
                        }
                    }
                }
                for (var, t, shape) in [
                    (q, dq, vq.shape()),
                    (k, dk, vk.shape()),
                    (v, dv, vv.shape()),
                ] {
                    if self.needs(*var) {
                        accumulate(&mut grads[var.0], Tensor::new(shape, t).unwrap());
                    }
                }
            }
        }
    }
}
