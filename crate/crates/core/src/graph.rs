//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Graph`]; nodes are stored in
//! execution order so a single reverse sweep visits each node exactly once.
//! A node requires a gradient when any of its inputs does.

use crate::error::{Error, Result};
use crate::tensor::{axis_extents, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    Concat(Var, Var, usize),
    Reshape(Var),
    Transpose(Var),
    PairwiseAdd(Var, Var),
    SoftCrossEntropy(Var, Vec<f64>),
    Select(Var, usize),
    StopGradientRows(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::AddBias(..) => "add_bias",
            Op::Affine(..) => "affine",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAll(_) => "sum_all",
            Op::Concat(..) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::PairwiseAdd(..) => "pairwise_add",
            Op::SoftCrossEntropy(..) => "soft_cross_entropy",
            Op::Select(..) => "select",
            Op::StopGradientRows(..) => "stop_gradient_rows",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single-threaded; build one graph per sample.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.check_finite("leaf")?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`. Nodes that
    /// require a gradient but were unreachable from the root report zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad || !self.backward_done {
            return None;
        }
        Some(
            self.grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(node.value.shape())),
        )
    }

    /// Clears gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op.name())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (p, q, r) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), p, q, r);
        let value = Tensor::new(&[p, r], out)?;
        self.record(value, Op::MatMul(a, b), &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.record(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Hadamard(a, b), |x, y| x * y)
    }

    /// Adds a vector to every row (last axis) of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sb[0] != *sx.last().expect("rank >= 1") {
            return Err(Error::dim(
                "add_bias",
                format!("bias {sb:?} does not broadcast over rows of {sx:?}"),
            ));
        }
        let tx = self.value(x);
        let tb = self.value(bias).data();
        let cols = tb.len();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb[i % cols])
            .collect();
        let value = Tensor::new(tx.shape(), data)?;
        self.record(value, Op::AddBias(x, bias), &[x, bias])
    }

    /// `scale * x + shift`, componentwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| scale * v + shift).collect();
        let value = Tensor::new(tx.shape(), data)?;
        self.record(value, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    /// `1 - x`, componentwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(tx.shape(), data)?;
        self.record(value, op, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::dim(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape(x)),
            ));
        }
        Ok(())
    }

    /// Softmax along `axis`, subtracting each slice's maximum first.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let tx = self.value(x);
        let (outer, len, inner) = axis_extents(tx.shape(), axis);
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        self.record(value, Op::Softmax(x, axis), &[x])
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean" } else { "sum" };
        self.check_axis(name, x, axis)?;
        let tx = self.value(x);
        let (outer, len, inner) = axis_extents(tx.shape(), axis);
        let src = tx.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut shape: Vec<usize> = tx.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(&shape, out)?;
        let op = if mean { Op::Mean(x, axis) } else { Op::Sum(x, axis) };
        self.record(value, op, &[x])
    }

    /// Sum along `axis`, dropping that axis.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Mean along `axis`, dropping that axis.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(total), Op::SumAll(x), &[x])
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(k, (x, y))| k == axis || x == y);
        if !compatible {
            return Err(Error::dim(
                "concat",
                format!("cannot concatenate {sa:?} and {sb:?} along axis {axis}"),
            ));
        }
        let (outer, la, inner) = axis_extents(&sa, axis);
        let lb = sb[axis];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            out.extend_from_slice(&da[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&db[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = sa.clone();
        shape[axis] = la + lb;
        let value = Tensor::new(&shape, out)?;
        self.record(value, Op::Concat(a, b, axis), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .reshaped(shape)
            .map_err(|_| Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(x))))?;
        self.record(value, Op::Reshape(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("expected a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let value = Tensor::new(&[c, r], transpose_raw(self.value(x).data(), r, c))?;
        self.record(value, Op::Transpose(x), &[x])
    }

    /// `out[p, j, :] = a[p, :] + b[j, :]` for `a: m×d`, `b: n×d`.
    pub fn pairwise_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim(
                "pairwise_add",
                format!("expected m×d and n×d, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, n, d) = (sa[0], sb[0], sa[1]);
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * n * d);
        for p in 0..m {
            let ra = ta.row(p);
            for j in 0..n {
                out.extend(ra.iter().zip(tb.row(j)).map(|(x, y)| x + y));
            }
        }
        let value = Tensor::new(&[m, n, d], out)?;
        self.record(value, Op::PairwiseAdd(a, b), &[a, b])
    }

    /// `-Σ target · log softmax(logits)` for a rank-1 logit vector, via
    /// log-sum-exp. Returns a one-element tensor.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 1 || s[0] != target.len() {
            return Err(Error::dim(
                "soft_cross_entropy",
                format!("logits {s:?} vs target of length {}", target.len()),
            ));
        }
        let x = self.value(logits).data();
        let lse = log_sum_exp(x);
        let loss: f64 = x.iter().zip(target).map(|(&xi, &qi)| qi * (lse - xi)).sum();
        self.record(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy(logits, target.to_vec()),
            &[logits],
        )
    }

    /// Picks one element by flat index into a one-element tensor.
    pub fn select(&mut self, x: Var, flat_index: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if flat_index >= n {
            return Err(Error::dim(
                "select",
                format!("index {flat_index} out of range for {n} elements"),
            ));
        }
        let v = self.value(x).data()[flat_index];
        self.record(Tensor::scalar(v), Op::Select(x, flat_index), &[x])
    }

    /// Identity in the forward pass; blocks gradient flow through the listed
    /// rows (last-axis rows) of `x`.
    pub fn stop_gradient_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x).clone();
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.rows()) {
            return Err(Error::dim(
                "stop_gradient_rows",
                format!("row {bad} out of range for {} rows", t.rows()),
            ));
        }
        self.record(t, Op::StopGradientRows(x, rows.to_vec()), &[x])
    }

    /// Propagates d`root`/d`node` to every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(Tensor::ones(self.shape(root)));
        for idx in (0..=root.0).rev() {
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            for (input, delta) in self.input_grads(idx, &upstream) {
                self.accumulate(input, delta);
            }
            self.grads[idx] = Some(upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g
                .data_mut()
                .iter_mut()
                .zip(delta)
                .for_each(|(a, b)| *a += b),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape();
                *slot = Some(Tensor::new(shape, delta).expect("gradient shape"));
            }
        }
    }

    fn input_grads(&self, idx: usize, upstream: &Tensor) -> Vec<(Var, Vec<f64>)> {
        let dy = upstream.data();
        let op = self.nodes[idx].op.clone();
        let out = &self.nodes[idx].value;
        let mut grads = Vec::with_capacity(2);
        match op.clone() {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (p, q, r) = (sa[0], sa[1], sb[1]);
                let bt = transpose_raw(self.value(b).data(), q, r);
                let at = transpose_raw(self.value(a).data(), p, q);
                let da = matmul_raw(dy, &bt, p, r, q);
                let db = matmul_raw(&at, dy, q, p, r);
                grads.push((a, da));
                grads.push((b, db));
            }
            Op::Add(a, b) => {
                grads.push((a, dy.to_vec()));
                grads.push((b, dy.to_vec()));
            }
            Op::Sub(a, b) => {
                grads.push((a, dy.to_vec()));
                grads.push((b, dy.iter().map(|g| -g).collect()));
            }
            Op::Hadamard(a, b) => {
                let da = mul(dy, self.value(b).data());
                let db = mul(dy, self.value(a).data());
                grads.push((a, da));
                grads.push((b, db));
            }
            Op::AddBias(x, bias) => {
                let cols = self.value(bias).numel();
                let mut db = vec![0.0; cols];
                for (i, g) in dy.iter().enumerate() {
                    db[i % cols] += g;
                }
                grads.push((x, dy.to_vec()));
                grads.push((bias, db));
            }
            Op::Affine(x, scale) => {
                grads.push((x, dy.iter().map(|g| g * scale).collect()));
            }
            Op::Tanh(x) => {
                let dx = dy.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                grads.push((x, dx));
            }
            Op::Sigmoid(x) => {
                let dx = dy.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                grads.push((x, dx));
            }
            Op::Relu(x) => {
                let dx = dy
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                grads.push((x, dx));
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_extents(out.shape(), axis);
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| y[at(k)] * dy[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (dy[at(k)] - dot);
                        }
                    }
                }
                grads.push((x, dx));
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let is_mean = matches!(op, Op::Mean(..));
                let (outer, len, inner) = axis_extents(self.shape(x), axis);
                let factor = if is_mean { 1.0 / len as f64 } else { 1.0 };
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            dx[(o * len + k) * inner + i] = dy[o * inner + i] * factor;
                        }
                    }
                }
                grads.push((x, dx));
            }
            Op::SumAll(x) => {
                let n = self.value(x).numel();
                grads.push((x, vec![dy[0]; n]));
            }
            Op::Concat(a, b, axis) => {
                let (outer, la, inner) = axis_extents(self.shape(a), axis);
                let lb = self.shape(b)[axis];
                let mut da = Vec::with_capacity(outer * la * inner);
                let mut db = Vec::with_capacity(outer * lb * inner);
                let stride = (la + lb) * inner;
                for o in 0..outer {
                    let block = &dy[o * stride..(o + 1) * stride];
                    da.extend_from_slice(&block[..la * inner]);
                    db.extend_from_slice(&block[la * inner..]);
                }
                grads.push((a, da));
                grads.push((b, db));
            }
            Op::Reshape(x) => grads.push((x, dy.to_vec())),
            Op::Transpose(x) => {
                let s = out.shape();
                grads.push((x, transpose_raw(dy, s[0], s[1])));
            }
            Op::PairwiseAdd(a, b) => {
                let (m, n, d) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                let mut da = vec![0.0; m * d];
                let mut db = vec![0.0; n * d];
                for p in 0..m {
                    for j in 0..n {
                        let g = &dy[(p * n + j) * d..(p * n + j + 1) * d];
                        for k in 0..d {
                            da[p * d + k] += g[k];
                            db[j * d + k] += g[k];
                        }
                    }
                }
                grads.push((a, da));
                grads.push((b, db));
            }
            Op::SoftCrossEntropy(logits, target) => {
                let x = self.value(logits).data();
                let lse = log_sum_exp(x);
                let mass: f64 = target.iter().sum();
                let dx = x
                    .iter()
                    .zip(&target)
                    .map(|(&xi, &qi)| dy[0] * (mass * (xi - lse).exp() - qi))
                    .collect();
                grads.push((logits, dx));
            }
            Op::Select(x, flat) => {
                let mut dx = vec![0.0; self.value(x).numel()];
                dx[flat] = dy[0];
                grads.push((x, dx));
            }
            Op::StopGradientRows(x, rows) => {
                let cols = out.cols();
                let mut dx = dy.to_vec();
                for r in rows {
                    dx[r * cols..(r + 1) * cols].iter_mut().for_each(|g| *g = 0.0);
                }
                grads.push((x, dx));
            }
        }
        grads
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Row-major `(p×q)·(q×r)`.
fn matmul_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in row.iter_mut().zip(&b[k * r..(k + 1) * r]) {
                *o += aik * bkj;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn zero_matmul() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let x = g.constant(t(&[3, 2], &[1.0, -2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let y = g.matmul(z, x).unwrap();
        assert_eq!(g.value(y), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn activations_at_known_points() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, -1.0])).unwrap();
        let s = g.sigmoid(x).unwrap();
        let th = g.tanh(x).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(th).data()[0], 0.0);
        assert_eq!(g.value(r).data()[1], 0.0);
    }

    #[test]
    fn hadamard_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.constant(t(&[2], &[3.0, 4.0])).unwrap();
        let c = g.hadamard(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 8.0]);
    }

    #[test]
    fn binary_ops_reject_mismatched_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
        let bias = g.constant(Tensor::zeros(&[3])).unwrap();
        assert!(matches!(g.add_bias(a, bias), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_uniform_and_large_logits() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[3], &[1000.0, 0.0, 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 1.0);
        assert!(v[1] < 1e-300 && v[1] >= 0.0);
    }

    #[test]
    fn softmax_matches_scalar_formula() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (k, &v) in g.value(y).data().iter().enumerate() {
            assert!((v - ((k + 1) as f64).exp() / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.0, 5.0, 0.0, 5.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let s = g.sum(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        assert_eq!(g.shape(s), &[2]);
        let m = g.mean(x, 1).unwrap();
        assert_eq!(g.value(m).data(), &[1.5, 3.5]);
        let row = g.constant(t(&[1, 3], &[7.0, 8.0, 9.0])).unwrap();
        let s = g.sum(row, 0).unwrap();
        assert_eq!(g.value(s).data(), &[7.0, 8.0, 9.0]);
        assert!(g.sum(x, 2).is_err());
    }

    #[test]
    fn concat_shapes() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[1.0])).unwrap();
        let b = g.constant(t(&[1], &[2.0])).unwrap();
        let c = g.concat(a, b, 0).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0]);

        let a = g.constant(t(&[2, 1], &[1.0, 2.0])).unwrap();
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let c = g.concat(a, b, 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert!(g.concat(a, b, 0).is_err());
    }

    #[test]
    fn pairwise_add_layout() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[10.0, 20.0])).unwrap();
        let b = g.constant(t(&[3, 1], &[1.0, 2.0, 3.0])).unwrap();
        let c = g.pairwise_add(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 1]);
        assert_eq!(g.value(c).data(), &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0])).unwrap();
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn backward_of_zero_scaled_is_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let y = g.tanh(x).unwrap();
        let s = g.sum_all(y).unwrap();
        let z = g.scale(s, 0.0).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap(), Tensor::zeros(&[3]));
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::State(_))));
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn constants_have_no_grad() {
        let mut g = Graph::new();
        let c = g.constant(t(&[1], &[2.0])).unwrap();
        let x = g.param(t(&[1], &[3.0])).unwrap();
        let y = g.hadamard(c, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_finite_is_reported_with_op_name() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[1e308])).unwrap();
        let err = g.affine(x, 10.0, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "affine" }));
        assert!(g.constant(t(&[1], &[f64::NAN])).is_err());
    }

    #[test]
    fn stop_gradient_rows_blocks_selected_rows() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = g.stop_gradient_rows(x, &[1]).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn soft_cross_entropy_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[6])).unwrap();
        let mut target = vec![0.0; 6];
        target[2] = 1.0;
        let l = g.soft_cross_entropy(x, &target).unwrap();
        assert!((g.value(l).data()[0] - 6f64.ln()).abs() < 1e-15);
    }
}
