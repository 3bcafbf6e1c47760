//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in execution order, so node ids are already
//! a topological order and [`Graph::backward`] walks the tape in reverse.
//! Each forward op checks its output for NaN/Inf and fails instead of
//! propagating non-finite values.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId, broadcast: bool },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    Softmax { a: NodeId },
    Gelu { a: NodeId },
    Relu { a: NodeId },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d { x: NodeId, filters: NodeId },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    Dropout { a: NodeId, keep_scale: Vec<f64> },
    Concat { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize },
    SelectRow { a: NodeId, row: usize },
    Embedding { table: NodeId, ids: Vec<usize> },
    Sum { a: NodeId },
    Mean { a: NodeId },
    AddN { parts: Vec<NodeId> },
    CrossEntropySum {
        logits: NodeId,
        targets: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Record of executed ops. One graph belongs to one forward/backward pass.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Elementwise sum. `b` may also be a vector matching the last axis of `a`,
    /// in which case it is added to every row.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let broadcast = if va.shape() == vb.shape() {
            false
        } else if vb.rank() == 1 && va.rank() >= 1 && va.last_dim() == vb.len() {
            true
        } else {
            return Err(mismatch("add", va.shape(), vb.shape()));
        };
        let n = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vb.data()[if broadcast { i % n } else { i }])
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", value, Op::Add { a, b, broadcast }, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    fn zip_same(&self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    fn map(&mut self, op_name: &'static str, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let va = self.value(a);
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())?;
        self.push(op_name, value, op, &[a])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.map("scale", a, Op::Scale { a, factor }, |x| x * factor)
    }

    /// Exact Gaussian error linear unit, `x·Φ(x)`.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.map("gelu", a, Op::Gelu { a }, gelu_value)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.map("relu", a, Op::Relu { a }, |x| if x > 0.0 { x } else { 0.0 })
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(mismatch("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let out = matmul_raw(va.data(), vb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b }, &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::invalid(format!("transpose needs a matrix, got {:?}", va.shape())));
        }
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let value = Tensor::new(vec![n, m], transpose_raw(va.data(), m, n))?;
        self.push("transpose", value, Op::Transpose { a }, &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        if shape.iter().product::<usize>() != va.len() {
            return Err(mismatch("reshape", va.shape(), shape));
        }
        let value = Tensor::new(shape.to_vec(), va.data().to_vec())?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    ///
    /// `mask` is either one flag per column (shared by every row) or one flag
    /// per element; `false` entries get exactly zero probability.
    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let va = self.value(a);
        let n = va.last_dim();
        let rows = va.len() / n;
        if let Some(m) = mask {
            if m.len() != n && m.len() != va.len() {
                return Err(mismatch("softmax_rows", va.shape(), &[m.len()]));
            }
        }
        let keep = |r: usize, c: usize| match mask {
            None => true,
            Some(m) if m.len() == n => m[c],
            Some(m) => m[r * n + c],
        };
        let mut out = vec![0.0; va.len()];
        for r in 0..rows {
            let row = va.row(r);
            let mut max = f64::NEG_INFINITY;
            for (c, &v) in row.iter().enumerate() {
                if keep(r, c) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMaskedRow { row: r });
            }
            let mut total = 0.0;
            for c in 0..n {
                if keep(r, c) {
                    let e = libm::exp(row[c] - max);
                    out[r * n + c] = e;
                    total += e;
                }
            }
            for v in &mut out[r * n..(r + 1) * n] {
                *v /= total;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        self.push("softmax_rows", value, Op::Softmax { a }, &[a])
    }

    /// Standardizes each last-axis row, then applies `gain` and `bias`.
    /// Variance is the population variance of the row.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let d = vx.last_dim();
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(mismatch("layer_norm", vx.shape(), vg.shape()));
        }
        let rows = vx.len() / d;
        let mut normalized = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                normalized[r * d + c] = h;
                out[r * d + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        self.push("layer_norm", value, op, &[x, gain, bias])
    }

    /// Valid 1-D cross-correlation with stride 1.
    ///
    /// `x` is `[L, d]`, `filters` is `[s, d, m]`; the filter spans the full
    /// embedding axis and the output is `[L - s + 1, m]`.
    pub fn conv1d(&mut self, x: NodeId, filters: NodeId) -> Result<NodeId> {
        let (vx, vf) = (self.value(x), self.value(filters));
        if vx.rank() != 2 || vf.rank() != 3 || vf.shape()[1] != vx.shape()[1] {
            return Err(mismatch("conv1d", vx.shape(), vf.shape()));
        }
        let (len, d) = (vx.shape()[0], vx.shape()[1]);
        let (s, m) = (vf.shape()[0], vf.shape()[2]);
        if len < s {
            return Err(Error::SequenceTooShort { len, required: s });
        }
        let out_len = len - s + 1;
        let (xd, wd) = (vx.data(), vf.data());
        let mut out = vec![0.0; out_len * m];
        for t in 0..out_len {
            let acc = &mut out[t * m..(t + 1) * m];
            for k in 0..s {
                let xrow = &xd[(t + k) * d..(t + k + 1) * d];
                for (c, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let w = &wd[(k * d + c) * m..(k * d + c + 1) * m];
                    for (o, &wv) in acc.iter_mut().zip(w) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![out_len, m], out)?;
        self.push("conv1d", value, Op::Conv1d { x, filters }, &[x, filters])
    }

    /// Per-channel maximum over the length axis of `[L, m]`.
    /// Ties resolve to the first position.
    pub fn max_pool_over_length(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(Error::invalid(format!("max pool needs [L, m], got {:?}", vx.shape())));
        }
        let (len, m) = (vx.shape()[0], vx.shape()[1]);
        if len == 0 {
            return Err(Error::SequenceTooShort { len, required: 1 });
        }
        let mut argmax = vec![0usize; m];
        let mut out = vx.row(0).to_vec();
        for t in 1..len {
            for (c, &v) in vx.row(t).iter().enumerate() {
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = t;
                }
            }
        }
        let value = Tensor::new(vec![m], out)?;
        self.push("max_pool", value, Op::MaxPool { x, argmax }, &[x])
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout<R: RngCore + ?Sized>(&mut self, a: NodeId, rate: f64, training: bool, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let scale = 1.0 / (1.0 - rate);
        let va = self.value(a);
        let keep_scale: Vec<f64> = (0..va.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let data = va.data().iter().zip(&keep_scale).map(|(x, k)| x * k).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { a, keep_scale }, &[a])
    }

    /// Concatenation along the last axis. Leading dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        if self.value(first).rank() == 0 {
            return Err(Error::invalid("concat needs tensors of rank >= 1"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(mismatch("concat", self.shape(first), s));
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        self.push("concat", value, Op::Concat { parts: parts.to_vec() }, parts)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() != 2 || len == 0 || start + len > va.shape()[1] {
            return Err(Error::invalid(format!(
                "cannot slice columns {start}..{} of {:?}",
                start + len,
                va.shape()
            )));
        }
        let rows = va.shape()[0];
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&va.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        self.push("slice_cols", value, Op::SliceCols { a, start }, &[a])
    }

    pub fn select_row(&mut self, a: NodeId, row: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() != 2 || row >= va.shape()[0] {
            return Err(Error::invalid(format!("row {row} out of range for {:?}", va.shape())));
        }
        let value = Tensor::vector(va.row(row).to_vec())?;
        self.push("select_row", value, Op::SelectRow { a, row }, &[a])
    }

    /// Gathers rows of a `[V, D]` table; backward scatter-adds into the table.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(Error::invalid(format!("embedding table must be [V, D], got {:?}", vt.shape())));
        }
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        if ids.is_empty() {
            return Err(Error::invalid("embedding lookup of zero ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::InvalidTokenId { id, vocab_size: v });
            }
            out.extend_from_slice(vt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.push("embedding", value, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum { a }, &[a])
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let mean = va.data().iter().sum::<f64>() / va.len() as f64;
        self.push("mean", Tensor::scalar(mean), Op::Mean { a }, &[a])
    }

    /// Sum of same-shaped tensors.
    pub fn add_n(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::invalid("add_n of zero tensors"))?;
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            let vp = self.value(p);
            if vp.shape() != acc.shape() {
                return Err(mismatch("add_n", acc.shape(), vp.shape()));
            }
            for (x, y) in acc.data_mut().iter_mut().zip(vp.data()) {
                *x += y;
            }
        }
        self.push("add_n", acc, Op::AddN { parts: parts.to_vec() }, parts)
    }

    /// Summed negative log-likelihood of `class` at each `(row, class)` target
    /// of a `[L, V]` logit matrix. Rows without a target do not contribute.
    pub fn cross_entropy_sum(&mut self, logits: NodeId, targets: &[(usize, usize)]) -> Result<NodeId> {
        let vl = self.value(logits);
        if vl.rank() != 2 {
            return Err(Error::invalid(format!("logits must be [L, V], got {:?}", vl.shape())));
        }
        let (rows, v) = (vl.shape()[0], vl.shape()[1]);
        let mut probs = Vec::with_capacity(targets.len() * v);
        let mut loss = 0.0;
        for &(row, class) in targets {
            if row >= rows || class >= v {
                return Err(Error::invalid(format!("target ({row}, {class}) outside logits {:?}", vl.shape())));
            }
            let r = vl.row(row);
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = r.iter().map(|x| libm::exp(x - max)).sum();
            loss += libm::log(total) + max - r[class];
            probs.extend(r.iter().map(|x| libm::exp(x - max) / total));
        }
        let op = Op::CrossEntropySum {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Populates gradients of the scalar `loss` for every node that requires them.
    /// Gradients from previous calls are discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                for (target, contribution) in self.input_grads(i, &grad) {
                    self.accumulate(target, contribution);
                }
            }
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contribution: Vec<f64>) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(x, c)| *x += c),
            None => node.grad = Some(contribution),
        }
    }

    fn input_grads(&self, i: usize, grad: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let node = &self.nodes[i];
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b, broadcast } => {
                if needs(*a) {
                    out.push((*a, grad.to_vec()));
                }
                if needs(*b) {
                    if *broadcast {
                        let n = self.value(*b).len();
                        let mut gb = vec![0.0; n];
                        for (k, g) in grad.iter().enumerate() {
                            gb[k % n] += g;
                        }
                        out.push((*b, gb));
                    } else {
                        out.push((*b, grad.to_vec()));
                    }
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    out.push((*a, grad.to_vec()));
                }
                if needs(*b) {
                    out.push((*b, grad.iter().map(|g| -g).collect()));
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    out.push((*a, grad.iter().zip(vb).map(|(g, y)| g * y).collect()));
                }
                if needs(*b) {
                    out.push((*b, grad.iter().zip(va).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale { a, factor } => out.push((*a, grad.iter().map(|g| g * factor).collect())),
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if needs(*a) {
                    // dA = dC · Bᵀ
                    let bt = transpose_raw(vb.data(), k, n);
                    out.push((*a, matmul_raw(grad, &bt, m, n, k)));
                }
                if needs(*b) {
                    // dB = Aᵀ · dC
                    let at = transpose_raw(va.data(), m, k);
                    out.push((*b, matmul_raw(&at, grad, k, m, n)));
                }
            }
            Op::Transpose { a } => {
                let s = node.value.shape();
                out.push((*a, transpose_raw(grad, s[0], s[1])));
            }
            Op::Reshape { a } => out.push((*a, grad.to_vec())),
            Op::Softmax { a } => {
                let y = &node.value;
                let n = y.last_dim();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let yr = y.row(r);
                    let gr = &grad[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for c in 0..n {
                        dx[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                out.push((*a, dx));
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                out.push((*a, grad.iter().zip(x).map(|(g, &x)| g * gelu_derivative(x)).collect()));
            }
            Op::Relu { a } => {
                let x = self.value(*a).data();
                out.push((*a, grad.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let g = self.value(*gain).data();
                if needs(*x) {
                    let mut dx = vec![0.0; grad.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &grad[r * d..(r + 1) * d];
                        let h = &normalized[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(g).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            dx[r * d + c] = is * (dh[c] - mean_dh - h[c] * mean_dh_h);
                        }
                    }
                    out.push((*x, dx));
                }
                if needs(*gain) {
                    let mut dg = vec![0.0; d];
                    for (k, (gv, h)) in grad.iter().zip(normalized).enumerate() {
                        dg[k % d] += gv * h;
                    }
                    out.push((*gain, dg));
                }
                if needs(*bias) {
                    let mut db = vec![0.0; d];
                    for (k, gv) in grad.iter().enumerate() {
                        db[k % d] += gv;
                    }
                    out.push((*bias, db));
                }
            }
            Op::Conv1d { x, filters } => {
                let (vx, vf) = (self.value(*x), self.value(*filters));
                let d = vx.shape()[1];
                let (s, m) = (vf.shape()[0], vf.shape()[2]);
                let out_len = node.value.shape()[0];
                let (xd, wd) = (vx.data(), vf.data());
                if needs(*x) {
                    let mut dx = vec![0.0; xd.len()];
                    for t in 0..out_len {
                        let gt = &grad[t * m..(t + 1) * m];
                        for k in 0..s {
                            for c in 0..d {
                                let w = &wd[(k * d + c) * m..(k * d + c + 1) * m];
                                dx[(t + k) * d + c] += w.iter().zip(gt).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if needs(*filters) {
                    let mut dw = vec![0.0; wd.len()];
                    for t in 0..out_len {
                        let gt = &grad[t * m..(t + 1) * m];
                        for k in 0..s {
                            for c in 0..d {
                                let xv = xd[(t + k) * d + c];
                                if xv == 0.0 {
                                    continue;
                                }
                                let dwr = &mut dw[(k * d + c) * m..(k * d + c + 1) * m];
                                for (o, g) in dwr.iter_mut().zip(gt) {
                                    *o += xv * g;
                                }
                            }
                        }
                    }
                    out.push((*filters, dw));
                }
            }
            Op::MaxPool { x, argmax } => {
                let vx = self.value(*x);
                let m = vx.shape()[1];
                let mut dx = vec![0.0; vx.len()];
                for (c, &t) in argmax.iter().enumerate() {
                    dx[t * m + c] += grad[c];
                }
                out.push((*x, dx));
            }
            Op::Dropout { a, keep_scale } => {
                out.push((*a, grad.iter().zip(keep_scale).map(|(g, k)| g * k).collect()));
            }
            Op::Concat { parts } => {
                let total = node.value.last_dim();
                let rows = node.value.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if needs(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&grad[r * total + offset..r * total + offset + w]);
                        }
                        out.push((p, gp));
                    }
                    offset += w;
                }
            }
            Op::SliceCols { a, start } => {
                let va = self.value(*a);
                let (rows, cols) = (va.shape()[0], va.shape()[1]);
                let len = node.value.shape()[1];
                let mut ga = vec![0.0; rows * cols];
                for r in 0..rows {
                    ga[r * cols + start..r * cols + start + len].copy_from_slice(&grad[r * len..(r + 1) * len]);
                }
                out.push((*a, ga));
            }
            Op::SelectRow { a, row } => {
                let va = self.value(*a);
                let cols = va.shape()[1];
                let mut ga = vec![0.0; va.len()];
                ga[row * cols..(row + 1) * cols].copy_from_slice(grad);
                out.push((*a, ga));
            }
            Op::Embedding { table, ids } => {
                let vt = self.value(*table);
                let d = vt.shape()[1];
                let mut gt = vec![0.0; vt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] += grad[r * d + c];
                    }
                }
                out.push((*table, gt));
            }
            Op::Sum { a } => out.push((*a, vec![grad[0]; self.value(*a).len()])),
            Op::Mean { a } => {
                let n = self.value(*a).len();
                out.push((*a, vec![grad[0] / n as f64; n]));
            }
            Op::AddN { parts } => {
                for &p in parts {
                    if needs(p) {
                        out.push((p, grad.to_vec()));
                    }
                }
            }
            Op::CrossEntropySum { logits, targets, probs } => {
                let vl = self.value(*logits);
                let v = vl.shape()[1];
                let mut gl = vec![0.0; vl.len()];
                for (t, &(row, class)) in targets.iter().enumerate() {
                    let p = &probs[t * v..(t + 1) * v];
                    for c in 0..v {
                        let indicator = if c == class { 1.0 } else { 0.0 };
                        gl[row * v + c] += grad[0] * (p[c] - indicator);
                    }
                }
                out.push((*logits, gl));
            }
        }
        out
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_gradients_match, seeded_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let y = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let z = g.matmul(x, y).unwrap();
        assert_eq!(g.value(z).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, [2, 3]);
                assert_eq!(rhs, [4, 5]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = g.softmax_rows(a, None).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = g.constant(t(&[2], &[1000.0, 1000.0]));
        let s = g.softmax_rows(b, None).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        // exp(k - 3) / (e^-2 + e^-1 + 1), evaluated to 10 digits offline
        let c = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.softmax_rows(c, None).unwrap();
        let expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (v, e) in g.value(s).data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_mask_zeroes_entries_and_rejects_empty_rows() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0, 5.0, 2.0, 0.5, 0.1, 9.0]));
        let s = g.softmax_rows(a, Some(&[true, false, true])).unwrap();
        let out = g.value(s);
        assert_eq!(out.row(0)[1], 0.0);
        assert_eq!(out.row(1)[1], 0.0);
        for r in 0..2 {
            assert!((out.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(
            g.softmax_rows(a, Some(&[false, false, false])).unwrap_err(),
            Error::FullyMaskedRow { row: 0 }
        );
    }

    #[test]
    fn gelu_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[0.0, 10.0, 1.0]));
        let y = g.gelu(a).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-6);
        // Φ(1) = 0.8413447460685429
        assert!((v[2] - 0.8413447).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::full(&[3], 1.0));
        let zero = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(t(&[3], &[4.0, 4.0, 4.0]));
        let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));

        let one2 = g.constant(Tensor::full(&[2], 1.0));
        let zero2 = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[2], &[1.0, 3.0]));
        let y = g.layer_norm(x, one2, zero2, 1e-15).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);

        let gain0 = g.constant(Tensor::zeros(&[2]));
        let bias = g.constant(t(&[2], &[0.25, -2.0]));
        let x = g.constant(t(&[2, 2], &[1.0, 7.0, -3.0, 2.0]));
        let y = g.layer_norm(x, gain0, bias, 1e-12).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -2.0, 0.25, -2.0]);
    }

    #[test]
    fn conv1d_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[5, 1], 1.0));
        let f = g.constant(Tensor::full(&[2, 1, 1], 1.0));
        let y = g.conv1d(x, f).unwrap();
        assert_eq!(g.shape(y), &[4, 1]);
        assert_eq!(g.value(y).data(), &[2.0, 2.0, 2.0, 2.0]);

        // delta at offset 0 reproduces the input window
        let x = g.constant(t(&[4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let mut w = Tensor::zeros(&[3, 2, 2]);
        w.data_mut()[0] = 1.0; // k=0, c=0 -> o=0
        w.data_mut()[3] = 1.0; // k=0, c=1 -> o=1
        let f = g.constant(w);
        let y = g.conv1d(x, f).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let short = g.constant(Tensor::zeros(&[3, 1]));
        let long = g.constant(Tensor::zeros(&[5, 1, 1]));
        assert!(matches!(g.conv1d(short, long), Err(Error::SequenceTooShort { len: 3, required: 5 })));
    }

    #[test]
    fn max_pool_examples_and_tie_rule() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2, 2], &[1.0, 5.0, 3.0, 2.0]));
        let p = g.max_pool_over_length(x).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 5.0]);

        let row = g.constant(t(&[1, 3], &[4.0, -1.0, 2.0]));
        let p = g.max_pool_over_length(row).unwrap();
        assert_eq!(g.value(p).data(), &[4.0, -1.0, 2.0]);

        let tied = g.variable(Tensor::full(&[3, 1], 2.0));
        let p = g.max_pool_over_length(tied).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(tied).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_identity_cases_and_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4], 3.0));
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
        assert!(g.dropout(x, -0.1, true, &mut rng).is_err());

        let n = 1_000_000;
        let big = g.constant(Tensor::full(&[n], 1.0));
        let y = g.dropout(big, 0.5, true, &mut rng).unwrap();
        let v = g.value(y).data();
        let survivors = v.iter().filter(|x| **x != 0.0).count() as f64 / n as f64;
        let mean = v.iter().sum::<f64>() / n as f64;
        assert!((survivors - 0.5).abs() < 0.01, "survivor fraction {survivors}");
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn backward_simple_losses() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 0.0, 1.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);

        let nonscalar = g.variable(Tensor::zeros(&[2]));
        assert!(g.backward(nonscalar).is_err());
    }

    #[test]
    fn non_finite_outputs_are_errors() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[f64::MAX]));
        assert_eq!(g.scale(x, 10.0).unwrap_err(), Error::NonFinite { op: "scale" });
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let mut g = Graph::new();
        let data = [0.3, -1.2, 2.0, 0.7];
        let x = g.variable(t(&[2, 2], &data));
        let y = g.gelu(x).unwrap();
        let z = g.softmax_rows(y, None).unwrap();
        let l = g.sum(z).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.value(x).data(), &data);
    }

    // Central finite differences against reverse mode for every op.

    #[test]
    fn gradcheck_elementwise_and_matmul() {
        let a = seeded_tensor(&[3, 4], 1);
        let b = seeded_tensor(&[4, 2], 2);
        let c = seeded_tensor(&[3, 4], 3);
        let bias = seeded_tensor(&[4], 4);
        assert_gradients_match(&[a, b, c, bias], |g, v| {
            let ab = g.matmul(v[0], v[1])?;
            let t = g.transpose(ab)?;
            let r = g.reshape(t, &[3, 2])?;
            let s = g.add(v[0], v[2])?;
            let s = g.add(s, v[3])?;
            let m = g.mul(s, v[2])?;
            let d = g.sub(m, v[0])?;
            let d = g.scale(d, 0.7)?;
            let ge = g.gelu(d)?;
            let re = g.relu(ge)?;
            let x = g.matmul(re, v[1])?;
            let x = g.concat(&[x, ab])?;
            let q = g.mul(x, x)?;
            let l1 = g.reduce_mean(q)?;
            let l2 = g.sum(r)?;
            g.add_n(&[l1, l2])
        });
    }

    #[test]
    fn gradcheck_softmax_layernorm_slice() {
        let x = seeded_tensor(&[3, 4], 11);
        let gain = seeded_tensor(&[4], 12);
        let bias = seeded_tensor(&[4], 13);
        let w = seeded_tensor(&[3, 4], 14);
        assert_gradients_match(&[x, gain, bias, w], |g, v| {
            let s = g.softmax_rows(v[0], Some(&[true, false, true, true]))?;
            let n = g.layer_norm(v[0], v[1], v[2], 1e-12)?;
            let sl = g.slice_cols(n, 1, 2)?;
            let row = g.select_row(s, 2)?;
            let sw = g.mul(s, v[3])?;
            let a = g.sum(sw)?;
            let sl2 = g.mul(sl, sl)?;
            let b = g.sum(sl2)?;
            let c = g.sum(row)?;
            let nw = g.mul(n, v[3])?;
            let d = g.sum(nw)?;
            g.add_n(&[a, b, c, d])
        });
    }

    #[test]
    fn gradcheck_conv_pool_embedding_cross_entropy() {
        let table = seeded_tensor(&[5, 3], 21);
        let filters = seeded_tensor(&[2, 3, 4], 22);
        let head = seeded_tensor(&[4, 5], 23);
        assert_gradients_match(&[table, filters, head], |g, v| {
            let e = g.embedding_lookup(v[0], &[1, 3, 3, 0, 4, 2])?;
            let c = g.conv1d(e, v[1])?;
            let p = g.max_pool_over_length(c)?;
            let p2 = g.reshape(p, &[1, 4])?;
            let logits = g.matmul(c, v[2])?;
            let ce = g.cross_entropy_sum(logits, &[(0, 2), (3, 1), (3, 4)])?;
            let pl = g.matmul(p2, v[2])?;
            let pl = g.sum(pl)?;
            g.add(ce, pl)
        });
    }

    #[test]
    fn fan_out_accumulates() {
        let x = seeded_tensor(&[2, 2], 31);
        assert_gradients_match(&[x], |g, v| {
            let a = g.matmul(v[0], v[0])?;
            let b = g.mul(v[0], a)?;
            let c = g.add(b, v[0])?;
            g.sum(c)
        });
    }
}
