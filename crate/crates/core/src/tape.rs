//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Tape`] and returns a [`Var`]
//! handle. Nodes are stored in creation order, so the tape is always
//! topologically sorted and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use bplm::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
//! let y = tape.param(Tensor::vector(vec![3.0, 4.0]).unwrap());
//! let xy = tape.mul(x, y).unwrap();
//! let loss = tape.sum(xy);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
//! assert_eq!(tape.grad(y).unwrap(), &[1.0, 2.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, transpose_raw, Tensor};

/// Target value meaning "this position contributes nothing to the loss".
pub const IGNORE_INDEX: usize = usize::MAX;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    MaskedSoftmax(Var),
    RmsNorm { x: Var, weight: Var, inv_rms: Vec<f64> },
    Swiglu { gate: Var, up: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Rope { x: Var, cos: Vec<f64>, sin: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64>, kept: usize },
    MeanPool { x: Var, keep: Vec<bool>, kept: usize },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations so that gradients can be propagated backwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        check_finite(name, &data)?;
        Ok(self.push(Tensor::from_parts(shape, data), op, inputs))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Gradient of the last backward pass with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clears gradients so that [`Tape::backward`] may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.consumed = false;
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dimensions {m}x{k} · {k2}x{n}")));
        }
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push_checked("matmul", vec![m, n], data, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let data = transpose_raw(self.value(a).data(), r, c);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_checked(name, shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push_checked("scale", shape, data, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} on rank {}", shape.len())));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| src[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (src[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[idx(a)] /= total;
                }
            }
        }
        self.push_checked("softmax", shape, out, Op::Softmax { x, axis }, &[x])
    }

    /// Row-wise softmax of a matrix where entries with `keep == false` are
    /// treated as `-inf` logits: they receive probability exactly zero. A row
    /// with nothing kept yields all zeros.
    pub fn masked_softmax(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if keep.len() != rows * cols {
            return Err(Error::shape("masked_softmax mask size"));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let range = r * cols..(r + 1) * cols;
            let max = range
                .clone()
                .filter(|&i| keep[i])
                .map(|i| src[i])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for i in range.clone() {
                if keep[i] {
                    out[i] = (src[i] - max).exp();
                    total += out[i];
                }
            }
            for i in range {
                out[i] /= total;
            }
        }
        self.push_checked("masked_softmax", vec![rows, cols], out, Op::MaskedSoftmax(x), &[x])
    }

    /// `y = weight ⊙ x / sqrt(mean(x²) + eps)` over the last dimension.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(weight) != [d] {
            return Err(Error::shape(format!(
                "rms_norm weight {:?} vs last dim {d}",
                self.shape(weight)
            )));
        }
        if eps < 0.0 {
            return Err(Error::invalid("rms_norm eps must be non-negative"));
        }
        let src = self.value(x).data();
        let w = self.value(weight).data();
        let rows = src.len() / d;
        let mut out = vec![0.0; src.len()];
        let mut inv_rms = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let denom = (ms + eps).sqrt();
            // eps = 0 on an all-zero row: define the output as zero.
            let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            inv_rms[r] = inv;
            for j in 0..d {
                out[r * d + j] = w[j] * row[j] * inv;
            }
        }
        self.push_checked("rms_norm", shape, out, Op::RmsNorm { x, weight, inv_rms }, &[x, weight])
    }

    /// `silu(gate) ⊙ up`.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        self.zip_with(gate, up, "swiglu", Op::Swiglu { gate, up }, |g, u| g * sigmoid(g) * u)
    }

    /// Gathers rows of a `[V×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::shape("embedding of an empty sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {v}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ids = ids.to_vec();
        Ok(self.push(Tensor::from_parts(vec![ids.len(), d], out), Op::Embedding { table, ids }, &[table]))
    }

    /// Rotary position embedding on a `[T×heads×head_dim]` tensor: pair
    /// `(2i, 2i+1)` at position `p` is rotated by `p · theta^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], theta: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let &[t, h, hd] = shape.as_slice() else {
            return Err(Error::shape(format!("rope expects [T×heads×head_dim], got {shape:?}")));
        };
        if hd % 2 != 0 {
            return Err(Error::shape(format!("rope needs an even head_dim, got {hd}")));
        }
        if positions.len() != t {
            return Err(Error::shape("rope positions length"));
        }
        let half = hd / 2;
        let mut cos = vec![0.0; t * half];
        let mut sin = vec![0.0; t * half];
        for (ti, &p) in positions.iter().enumerate() {
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f64 / hd as f64);
                let angle = p as f64 * freq;
                cos[ti * half + i] = angle.cos();
                sin[ti * half + i] = angle.sin();
            }
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for ti in 0..t {
            for hi in 0..h {
                let base = (ti * h + hi) * hd;
                for i in 0..half {
                    let (c, s) = (cos[ti * half + i], sin[ti * half + i]);
                    let (x0, x1) = (src[base + 2 * i], src[base + 2 * i + 1]);
                    out[base + 2 * i] = x0 * c - x1 * s;
                    out[base + 2 * i + 1] = x0 * s + x1 * c;
                }
            }
        }
        self.push_checked("rope", shape, out, Op::Rope { x, cos, sin }, &[x])
    }

    /// Columns `start..start+width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if width == 0 || start + width > c {
            return Err(Error::shape(format!("slice_cols {start}+{width} of {c} columns")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + width]);
        }
        Ok(self.push(Tensor::from_parts(vec![r, width], out), Op::SliceCols { x, start }, &[x]))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        let (r, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p)?;
            if pr != r {
                return Err(Error::shape("concat_cols row mismatch"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, total], out), Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks equal-size tensors as the rows of a `[n×d]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or_else(|| Error::shape("stack_rows of nothing"))?;
        let d = self.value(first).numel();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if self.value(r).numel() != d {
                return Err(Error::shape("stack_rows size mismatch"));
            }
            out.extend_from_slice(self.value(r).data());
        }
        Ok(self.push(Tensor::from_parts(vec![rows.len(), d], out), Op::StackRows(rows.to_vec()), rows))
    }

    /// Mean over non-ignored rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let (n, v) = self.dims2(logits)?;
        if targets.len() != n {
            return Err(Error::shape(format!("{} targets for {n} logit rows", targets.len())));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        let mut kept = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                continue;
            }
            if t >= v {
                return Err(Error::invalid(format!("target {t} outside {v} classes")));
            }
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|z| (z - max).exp()).sum();
            let lse = max + sum_exp.ln();
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            total += lse - row[t];
            kept += 1;
        }
        if kept == 0 {
            return Err(Error::EmptyLoss);
        }
        let loss = total / kept as f64;
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs, kept };
        self.push_checked("cross_entropy", vec![1], vec![loss], op, &[logits])
    }

    /// Mean of the rows of `[T×d]` whose `keep` flag is set.
    pub fn mean_pool(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (t, d) = self.dims2(x)?;
        if keep.len() != t {
            return Err(Error::shape("mean_pool mask length"));
        }
        let kept = keep.iter().filter(|&&k| k).count();
        if kept == 0 {
            return Err(Error::invalid("mean_pool with no kept positions"));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; d];
        for (r, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            for j in 0..d {
                out[j] += src[r * d + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= kept as f64);
        let op = Op::MeanPool { x, keep: keep.to_vec(), kept };
        self.push_checked("mean_pool", vec![d], out, op, &[x])
    }

    /// Scales each row to unit L2 norm, `x / sqrt(|x|² + 1e-12)`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = (row.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
            norms[i] = n;
            for j in 0..c {
                out[i * c + j] = row[j] / n;
            }
        }
        self.push_checked("l2_normalize_rows", vec![r, c], out, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    ///
    /// A tape supports one backward pass; call [`Tape::reset`] before another.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Backward("tape already consumed; reset before a second backward"));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Backward("loss is not on this tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward("loss must be a scalar"));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Backward("loss does not depend on any parameter"));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                for (input, contrib) in self.input_grads(id, &g) {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    match &mut self.grads[input.0] {
                        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                        slot => *slot = Some(contrib),
                    }
                }
            }
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn input_grads(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().unwrap();
                let n = self.value(b).shape()[1];
                let mut out = Vec::with_capacity(2);
                if self.requires_grad(a) {
                    out.push((a, matmul_nt(g, val(b), m, n, k)));
                }
                if self.requires_grad(b) {
                    out.push((b, matmul_tn(val(a), g, m, k, n)));
                }
                out
            }
            &Op::Transpose(a) => {
                let (r, c) = self.value(a).dims2().unwrap();
                vec![(a, transpose_raw(g, c, r))]
            }
            &Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|x| -x).collect())],
            &Op::Mul(a, b) => {
                let ga = g.iter().zip(val(b)).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(val(a)).map(|(g, x)| g * x).collect();
                vec![(a, ga), (b, gb)]
            }
            &Op::Scale(a, c) => vec![(a, g.iter().map(|x| x * c).collect())],
            &Op::Sum(a) => vec![(a, vec![g[0]; self.value(a).numel()])],
            &Op::Reshape(a) => vec![(a, g.to_vec())],
            &Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_extents(node.value.shape(), axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                        for a in 0..len {
                            gx[idx(a)] = y[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
                vec![(x, gx)]
            }
            &Op::MaskedSoftmax(x) => {
                let y = node.value.data();
                let (rows, cols) = node.value.dims2().unwrap();
                let mut gx = vec![0.0; y.len()];
                for r in 0..rows {
                    let range = r * cols..(r + 1) * cols;
                    let dot: f64 = range.clone().map(|i| g[i] * y[i]).sum();
                    for i in range {
                        gx[i] = y[i] * (g[i] - dot);
                    }
                }
                vec![(x, gx)]
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let xs = val(*x);
                let w = val(*weight);
                let d = w.len();
                let mut gx = vec![0.0; xs.len()];
                let mut gw = vec![0.0; d];
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let row = &xs[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = (0..d).map(|j| gr[j] * w[j] * row[j]).sum();
                    let coef = inv * inv * inv * dot / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = inv * w[j] * gr[j] - coef * row[j];
                        gw[j] += gr[j] * row[j] * inv;
                    }
                }
                vec![(*x, gx), (*weight, gw)]
            }
            &Op::Swiglu { gate, up } => {
                let gs = val(gate);
                let us = val(up);
                let mut gg = Vec::with_capacity(gs.len());
                let mut gu = Vec::with_capacity(gs.len());
                for i in 0..gs.len() {
                    let s = sigmoid(gs[i]);
                    let silu = gs[i] * s;
                    let dsilu = s * (1.0 + gs[i] * (1.0 - s));
                    gg.push(g[i] * us[i] * dsilu);
                    gu.push(g[i] * silu);
                }
                vec![(gate, gg), (up, gu)]
            }
            Op::Embedding { table, ids } => {
                let (v, d) = self.value(*table).dims2().unwrap();
                let mut gt = vec![0.0; v * d];
                for (t, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[t * d + j];
                    }
                }
                vec![(*table, gt)]
            }
            Op::Rope { x, cos, sin } => {
                let shape = self.value(*x).shape();
                let (t, h, hd) = (shape[0], shape[1], shape[2]);
                let half = hd / 2;
                let mut gx = vec![0.0; g.len()];
                for ti in 0..t {
                    for hi in 0..h {
                        let base = (ti * h + hi) * hd;
                        for i in 0..half {
                            let (c, s) = (cos[ti * half + i], sin[ti * half + i]);
                            let (g0, g1) = (g[base + 2 * i], g[base + 2 * i + 1]);
                            gx[base + 2 * i] = g0 * c + g1 * s;
                            gx[base + 2 * i + 1] = -g0 * s + g1 * c;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = self.value(x).dims2().unwrap();
                let w = node.value.shape()[1];
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![(x, gx)]
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut gp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    out.push((p, gp));
                }
                out
            }
            Op::StackRows(rows) => {
                let d = node.value.shape()[1];
                rows.iter()
                    .enumerate()
                    .map(|(i, &r)| (r, g[i * d..(i + 1) * d].to_vec()))
                    .collect()
            }
            Op::CrossEntropy { logits, targets, probs, kept } => {
                let v = self.value(*logits).shape()[1];
                let scale = g[0] / *kept as f64;
                let mut gl = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == IGNORE_INDEX {
                        continue;
                    }
                    for j in 0..v {
                        gl[r * v + j] = probs[r * v + j] * scale;
                    }
                    gl[r * v + t] -= scale;
                }
                vec![(*logits, gl)]
            }
            Op::MeanPool { x, keep, kept } => {
                let d = g.len();
                let mut gx = vec![0.0; keep.len() * d];
                for (r, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
                    for j in 0..d {
                        gx[r * d + j] = g[j] / *kept as f64;
                    }
                }
                vec![(*x, gx)]
            }
            Op::L2NormalizeRows { x, norms } => {
                let xs = val(*x);
                let c = xs.len() / norms.len();
                let mut gx = vec![0.0; xs.len()];
                for (i, &n) in norms.iter().enumerate() {
                    let row = &xs[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = row.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let n3 = n * n * n;
                    for j in 0..c {
                        gx[i * c + j] = gr[j] / n - row[j] * dot / n3;
                    }
                }
                vec![(*x, gx)]
            }
        }
    }
}

/// Per-coordinate result of a central-difference check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Loss at the unperturbed inputs.
    pub loss: f64,
    /// Tape gradients, all inputs flattened in order.
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub fn max_rel_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    pub fn max_abs_error(&self) -> f64 {
        self.analytic.iter().zip(&self.numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max)
    }
}

/// Central-difference gradient check over several inputs at once, keeping
/// every coordinate.
///
/// `f` rebuilds the computation on a fresh tape from leaf handles for each
/// of `inputs`.
pub fn grad_check_detailed<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::invalid(format!("grad_check eps {eps} outside (0, 1e-3]")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = tape.value(out).item()?;
    tape.backward(out)?;
    let mut analytic = Vec::new();
    for (&v, t) in vars.iter().zip(inputs) {
        match tape.grad(v) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = inputs.to_vec();
    for ti in 0..probe.len() {
        for i in 0..probe[ti].numel() {
            let orig = probe[ti].data()[i];
            probe[ti].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * eps));
        }
    }
    Ok(GradCheck { loss, analytic, numeric })
}

/// Central-difference gradient check over several inputs at once.
///
/// Returns the largest per-coordinate relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(grad_check_detailed(f, inputs, eps)?.max_rel_error())
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}
