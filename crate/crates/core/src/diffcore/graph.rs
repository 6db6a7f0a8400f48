//! Reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] is an append-only arena of nodes. Because every node can only
//! reference nodes created before it, insertion order is already a topological
//! order and [`Graph::backward`] simply walks the arena in reverse.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{HectoError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the forward input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Affine(Var, f64),
    ScaleBy(Var, Var),
    Act(Var, Activation),
    Softmax(Var, f64),
    LnClamped(Var, f64),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanRows(Var),
    Gather(Var, Vec<usize>),
    Element(Var, usize, usize),
    Rows(Var, usize),
    ConcatRows(Vec<Var>),
    ShiftRows(Var, usize),
    CrossEntropy(Var, Vec<usize>, Vec<f64>),
    Mse(Var, Vec<f64>),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Computation graph recorded during one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `a (m×k) · b (k×n)`
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].tensor.data()
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        self.nodes[v.0].tensor.grad()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].tensor;
        (t.rows(), t.cols())
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.needs_grad(v));
        let tensor = Tensor::new(shape, data)
            .expect("primitive output shape is consistent")
            .with_requires_grad(requires_grad);
        self.nodes.push(Node {
            tensor,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding a caller-supplied tensor. Gradients are tracked when the
    /// tensor was built with `requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Leaf bound to a registered parameter. The value is copied on first use,
    /// so a graph sees one consistent snapshot of each parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = store.value(id);
        let tensor = Tensor::new(value.shape().to_vec(), value.data().to_vec())
            .expect("parameter shape is consistent")
            .with_requires_grad(true);
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Parameter leaves together with their accumulated gradients.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes
            .iter()
            .filter_map(|n| n.param.map(|id| (id, n.tensor.grad())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(HectoError::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(HectoError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    /// `x (m×n) + bias (1×n)` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.shape(bias) != [1, n] {
            return Err(HectoError::dim("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        Ok(self.push(vec![m, n], out, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// `x · w + b`, the affine layer used throughout the model.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(xw, b)
    }

    /// `scale · x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.data(x).iter().map(|v| scale * v + shift).collect();
        self.push(self.shape(x).to_vec(), out, Op::Affine(x, scale), &[x])
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(HectoError::dim("scale_by", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        let out = self.data(x).iter().map(|v| v * sv).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::ScaleBy(x, s), &[x, s]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.data(x).iter().map(|&v| kind.apply(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Act(x, kind), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Row-wise `softmax(x / tau)` with max subtraction.
    pub fn softmax_temperature(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(HectoError::Parameter(format!(
                "softmax temperature must be positive, got {tau}"
            )));
        }
        let (m, n) = self.dims(x);
        let mut out = Vec::with_capacity(m * n);
        for row in self.data(x).chunks(n) {
            out.extend(softmax_row(row, tau));
        }
        Ok(self.push(vec![m, n], out, Op::Softmax(x, tau), &[x]))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, x: Var, floor: f64) -> Var {
        let out = self.data(x).iter().map(|v| v.max(floor).ln()).collect();
        self.push(self.shape(x).to_vec(), out, Op::LnClamped(x, floor), &[x])
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| 1.0 / v).collect();
        self.push(self.shape(x).to_vec(), out, Op::Recip(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(vec![1, 1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(vec![1, 1], vec![s], Op::Mean(x), &[x])
    }

    /// Column sums: `m×n → 1×n`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (_, n) = self.dims(x);
        let mut out = vec![0.0; n];
        for row in self.data(x).chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        self.push(vec![1, n], out, Op::SumRows(x), &[x])
    }

    /// Column means: `m×n → 1×n`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let mut out = vec![0.0; n];
        for row in self.data(x).chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        self.push(vec![1, n], out, Op::MeanRows(x), &[x])
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(HectoError::Data(format!(
                "index {bad} out of range for table with {rows} rows"
            )));
        }
        let t = self.value(table);
        let out = ids.iter().flat_map(|&i| t.row_slice(i).to_vec()).collect();
        Ok(self.push(vec![ids.len(), n], out, Op::Gather(table, ids.to_vec()), &[table]))
    }

    /// The single element `x[i][j]` as a `1×1` tensor.
    pub fn element(&mut self, x: Var, i: usize, j: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if i >= m || j >= n {
            return Err(HectoError::dim("element", self.shape(x), &[i, j]));
        }
        let v = self.value(x).get(i, j);
        Ok(self.push(vec![1, 1], vec![v], Op::Element(x, i, j), &[x]))
    }

    /// Rows `start..start + len`.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > m {
            return Err(HectoError::dim("rows", self.shape(x), &[start, len]));
        }
        let out = self.data(x)[start * n..(start + len) * n].to_vec();
        Ok(self.push(vec![len, n], out, Op::Rows(x, start), &[x]))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.rows(x, i, 1)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(HectoError::Contract("concat_rows of nothing".into()));
        };
        let n = self.dims(first).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(HectoError::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.data(p));
            m += pm;
        }
        Ok(self.push(vec![m, n], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Shifts rows down by `shift`, filling the top with zeros:
    /// `out[t] = x[t - shift]` for `t >= shift`. Used for causal convolution.
    pub fn shift_rows(&mut self, x: Var, shift: usize) -> Var {
        let (m, n) = self.dims(x);
        let mut out = vec![0.0; m * n];
        if shift < m {
            out[shift * n..].copy_from_slice(&self.data(x)[..(m - shift) * n]);
        }
        self.push(vec![m, n], out, Op::ShiftRows(x, shift), &[x])
    }

    /// Mean over the batch of `-ln softmax(logits_i)[label_i]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims(logits);
        if labels.len() != b {
            return Err(HectoError::dim("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(HectoError::Data(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (row, &label) in self.data(logits).chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let op = Op::CrossEntropy(logits, labels.to_vec(), probs);
        Ok(self.push(vec![1, 1], vec![loss / b as f64], op, &[logits]))
    }

    /// Mean squared error against constant targets.
    pub fn mse(&mut self, pred: Var, targets: &[f64]) -> Result<Var> {
        let p = self.data(pred);
        if p.len() != targets.len() {
            return Err(HectoError::dim("mse", self.shape(pred), &[targets.len()]));
        }
        let loss = p.iter().zip(targets).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            / targets.len() as f64;
        Ok(self.push(vec![1, 1], vec![loss], Op::Mse(pred, targets.to_vec()), &[pred]))
    }

    /// Forward value `1 + (x - detached)`, gradient `1` with respect to `x`.
    ///
    /// With `detached` equal to the current value of `x` the output is exactly
    /// `1.0`: a hard selection in the forward pass whose gradient flows
    /// through the soft probability.
    pub fn straight_through(&mut self, x: Var, detached: f64) -> Result<Var> {
        if self.value(x).numel() != 1 {
            return Err(HectoError::dim("straight_through", self.shape(x), &[1, 1]));
        }
        let v = 1.0 + (self.value(x).item() - detached);
        Ok(self.push(vec![1, 1], vec![v], Op::StraightThrough(x), &[x]))
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.tensor.zero_grad());
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    ///
    /// Leaf gradients accumulate across calls; interior gradients hold the
    /// result of the latest pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(HectoError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                for (a, b) in node.tensor.grad_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            } else {
                node.tensor.grad_mut().copy_from_slice(&g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.tensor.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.needs_grad(v) {
                return;
            }
            let len = self.value(v).numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).1;
                let (ad, bd) = (self.data(a), self.data(b));
                acc(a, &mut |da| {
                    for r in 0..m {
                        for t in 0..k {
                            let mut s = 0.0;
                            for c in 0..n {
                                s += g[r * n + c] * bd[t * n + c];
                            }
                            da[r * k + t] += s;
                        }
                    }
                });
                acc(b, &mut |db| {
                    for r in 0..m {
                        for t in 0..k {
                            let av = ad[r * k + t];
                            if av == 0.0 {
                                continue;
                            }
                            for c in 0..n {
                                db[t * n + c] += av * g[r * n + c];
                            }
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                acc(a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bd) {
                        *d += g * y;
                    }
                });
                acc(b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(ad) {
                        *d += g * x;
                    }
                });
            }
            &Op::AddRowBias(x, bias) => {
                let n = self.dims(x).1;
                acc(x, &mut |d| add_into(d, g));
                acc(bias, &mut |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            &Op::Affine(x, scale) => {
                acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += scale * g));
            }
            &Op::ScaleBy(x, s) => {
                let sv = self.value(s).item();
                let xd = self.data(x);
                acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += sv * g));
                acc(s, &mut |d| d[0] += g.iter().zip(xd).map(|(g, x)| g * x).sum::<f64>());
            }
            &Op::Act(x, kind) => {
                let xd = self.data(x);
                acc(x, &mut |d| {
                    for (((d, g), &xv), &yv) in d.iter_mut().zip(g).zip(xd).zip(out) {
                        *d += g * kind.derivative(xv, yv);
                    }
                });
            }
            &Op::Softmax(x, tau) => {
                let n = self.dims(x).1;
                acc(x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot) / tau;
                        }
                    }
                });
            }
            &Op::LnClamped(x, floor) => {
                let xd = self.data(x);
                acc(x, &mut |d| {
                    for ((d, g), &xv) in d.iter_mut().zip(g).zip(xd) {
                        if xv > floor {
                            *d += g / xv;
                        }
                    }
                });
            }
            &Op::Recip(x) => {
                let xd = self.data(x);
                acc(x, &mut |d| {
                    for ((d, g), &xv) in d.iter_mut().zip(g).zip(xd) {
                        *d -= g / (xv * xv);
                    }
                });
            }
            &Op::Sum(x) => acc(x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            &Op::Mean(x) => {
                let scale = g[0] / self.value(x).numel() as f64;
                acc(x, &mut |d| d.iter_mut().for_each(|d| *d += scale));
            }
            &Op::SumRows(x) => {
                let n = self.dims(x).1;
                acc(x, &mut |d| d.chunks_mut(n).for_each(|row| add_into(row, g)));
            }
            &Op::MeanRows(x) => {
                let (m, n) = self.dims(x);
                acc(x, &mut |d| {
                    for row in d.chunks_mut(n) {
                        for (d, g) in row.iter_mut().zip(g) {
                            *d += g / m as f64;
                        }
                    }
                });
            }
            Op::Gather(table, ids) => {
                let n = self.dims(*table).1;
                acc(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * n..(id + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            &Op::Element(x, i, j) => {
                let n = self.dims(x).1;
                acc(x, &mut |d| d[i * n + j] += g[0]);
            }
            &Op::Rows(x, start) => {
                let n = self.dims(x).1;
                acc(x, &mut |d| add_into(&mut d[start * n..start * n + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    let slice = &g[offset..offset + len];
                    acc(p, &mut |d| add_into(d, slice));
                    offset += len;
                }
            }
            &Op::ShiftRows(x, shift) => {
                let (m, n) = self.dims(x);
                if shift < m {
                    acc(x, &mut |d| add_into(&mut d[..(m - shift) * n], &g[shift * n..]));
                }
            }
            Op::CrossEntropy(logits, labels, probs) => {
                let c = self.dims(*logits).1;
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |d| {
                    for (r, &label) in labels.iter().enumerate() {
                        for k in 0..c {
                            let target = if k == label { 1.0 } else { 0.0 };
                            d[r * c + k] += scale * (probs[r * c + k] - target);
                        }
                    }
                });
            }
            Op::Mse(pred, targets) => {
                let p = self.data(*pred);
                let scale = 2.0 * g[0] / targets.len() as f64;
                acc(*pred, &mut |d| {
                    for ((d, p), t) in d.iter_mut().zip(p).zip(targets) {
                        *d += scale * (p - t);
                    }
                });
            }
            &Op::StraightThrough(x) => acc(x, &mut |d| d[0] += g[0]),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable `softmax(row / tau)`.
pub fn softmax_row(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| ((v - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
