//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes its
//! result after its inputs, so the node list is already in topological
//! order and [`Graph::backward`] is a single reverse sweep. Values are plain
//! [`Tensor`]s; a [`Var`] is a handle into the graph that produced it.
//!
//! Parameters live outside the graph (in the model) and are copied in as
//! leaves each step, which keeps models `Clone + Send` and graphs disposable.

use crate::error::{Error, Result};
use crate::tensor::{self, for_each_lane, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Scale factor inside the sigmoid GELU approximation `x·σ(1.702x)`.
pub const GELU_SIGMOID_SCALE: f64 = 1.702;

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    AbsSum(Var, Option<Vec<bool>>),
    CausalMask(Var),
    Gather(Var, Vec<usize>),
    SliceBlock {
        x: Var,
        row: usize,
        col: usize,
    },
    Assemble(Vec<(Var, usize, usize)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of every operation evaluated since the graph was created.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Adds a leaf. Gradients are collected only for leaves with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient slot of a leaf, populated by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, parents: &[Var], op: Op) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        // Lineage is only kept when something upstream needs a gradient.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape_error(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(self.shape_error("matmul", a, b));
        }
        let data = tensor::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, &[a, b], Op::Matmul(a, b)))
    }

    /// `a[m×k] · b[n×k]ᵀ`, transposing on the fly.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul_nt")?;
        let (n, k2) = self.value(b).dims2("matmul_nt")?;
        if k != k2 {
            return Err(self.shape_error("matmul_nt", a, b));
        }
        let mut data = vec![0.0; m * n];
        tensor::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut data, m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, &[a, b], Op::MatmulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_error("add", a, b));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, &[a, b], Op::Add(a, b)))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(bias).shape() != [n] {
            return Err(self.shape_error("add_bias", x, bias));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(out, &[x, bias], Op::AddBias(x, bias)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_error("mul", a, b));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, &[x], Op::Scale(x, c))
    }

    /// `x·σ(1.702x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(GELU_SIGMOID_SCALE * v));
        self.push(out, &[x], Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        Ok(self.push(out, &[x], Op::Softmax(x, axis)))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(gain).shape() != [n] {
            return Err(self.shape_error("layer_norm", x, gain));
        }
        if self.value(bias).shape() != [n] {
            return Err(self.shape_error("layer_norm", x, bias));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xs.len() / n;
        let mut normalized = vec![0.0; xs.len()];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd.push(s);
            for j in 0..n {
                let h = (row[j] - mean) * s;
                normalized[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            },
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.value(logits).dims2("cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![rows, vocab],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index(format!(
                "target {t} outside vocabulary of size {vocab}"
            )));
        }
        let probs = self.value(logits).softmax(1)?.into_data();
        let xs = self.value(logits).data();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &xs[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let out = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            out,
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(out, &[x], Op::Sum(x))
    }

    /// `Σ|x|`, optionally restricted to positions where `keep` is true.
    /// The subgradient at zero is zero.
    pub fn abs_sum(&mut self, x: Var, keep: Option<Vec<bool>>) -> Result<Var> {
        let xs = self.value(x).data();
        let total = match &keep {
            Some(k) => {
                if k.len() != xs.len() {
                    return Err(Error::Shape {
                        op: "abs_sum",
                        lhs: self.value(x).shape().to_vec(),
                        rhs: vec![k.len()],
                    });
                }
                xs.iter().zip(k).filter(|(_, &k)| k).map(|(v, _)| v.abs()).sum()
            }
            None => xs.iter().map(|v| v.abs()).sum(),
        };
        Ok(self.push(Tensor::scalar(total), &[x], Op::AbsSum(x, keep)))
    }

    /// Sets entries above the diagonal of a square matrix to `-inf`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("causal_mask")?;
        if r != c {
            return Err(self.shape_error("causal_mask", x, x));
        }
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            for v in &mut data[i * c + i + 1..(i + 1) * c] {
                *v = f64::NEG_INFINITY;
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        Ok(self.push(out, &[x], Op::CausalMask(x)))
    }

    /// Selects rows of a `[n×d]` table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (n, d) = self.value(table).dims2("gather_rows")?;
        if let Some(&i) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("row {i} of a table with {n} rows")));
        }
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![indices.len(), d], data)?;
        Ok(self.push(out, &[table], Op::Gather(table, indices.to_vec())))
    }

    /// Copies the `rows×cols` block at `(row, col)` out of a matrix.
    pub fn slice_block(&mut self, x: Var, row: usize, col: usize, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice_block")?;
        if row + rows > r || col + cols > c {
            return Err(Error::Shape {
                op: "slice_block",
                lhs: vec![r, c],
                rhs: vec![row + rows, col + cols],
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * cols);
        for i in row..row + rows {
            data.extend_from_slice(&src[i * c + col..i * c + col + cols]);
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, &[x], Op::SliceBlock { x, row, col }))
    }

    /// Places matrix blocks into a fresh zero matrix of the given shape.
    /// Blocks must not overlap.
    pub fn assemble(&mut self, parts: &[(Var, usize, usize)], rows: usize, cols: usize) -> Result<Var> {
        let mut data = vec![0.0; rows * cols];
        for &(p, r0, c0) in parts {
            let (pr, pc) = self.value(p).dims2("assemble")?;
            if r0 + pr > rows || c0 + pc > cols {
                return Err(Error::Shape {
                    op: "assemble",
                    lhs: vec![rows, cols],
                    rhs: vec![r0 + pr, c0 + pc],
                });
            }
            let src = self.value(p).data();
            for i in 0..pr {
                data[(r0 + i) * cols + c0..(r0 + i) * cols + c0 + pc]
                    .copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let parents: Vec<Var> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out, &parents, Op::Assemble(parts.to_vec())))
    }

    /// Back-propagates from a scalar `loss`, adding `∂loss/∂leaf` into the
    /// gradient slot of every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut self.nodes[i].grad;
                match slot {
                    Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, d)| *e += d),
                    None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = dims(&self.nodes[a.0].value);
                let n = node.value.last_dim();
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                acc(*a, &mut |s| tensor::matmul_nt_acc(g, bv, s, m, n, k));
                acc(*b, &mut |s| tensor::matmul_tn_acc(av, g, s, m, k, n));
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = dims(&self.nodes[a.0].value);
                let n = node.value.last_dim();
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                acc(*a, &mut |s| tensor::matmul_acc(g, bv, s, m, n, k));
                acc(*b, &mut |s| tensor::matmul_tn_acc(g, av, s, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::AddBias(x, bias) => {
                let n = node.value.last_dim();
                acc(*x, &mut |s| add_into(s, g));
                acc(*bias, &mut |s| {
                    for row in g.chunks_exact(n) {
                        add_into(s, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                acc(*a, &mut |s| {
                    for ((s, d), y) in s.iter_mut().zip(g).zip(bv) {
                        *s += d * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, d), x) in s.iter_mut().zip(g).zip(av) {
                        *s += d * x;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |s| {
                for (s, d) in s.iter_mut().zip(g) {
                    *s += c * d;
                }
            }),
            Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.data();
                acc(*x, &mut |s| {
                    for ((s, d), &v) in s.iter_mut().zip(g).zip(xv) {
                        let sg = sigmoid(GELU_SIGMOID_SCALE * v);
                        *s += d * (sg + GELU_SIGMOID_SCALE * v * sg * (1.0 - sg));
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let shape = node.value.shape();
                acc(*x, &mut |s| {
                    for_each_lane(shape, *axis, |lane| {
                        let dot: f64 = lane.clone().map(|j| g[j] * y[j]).sum();
                        for j in lane {
                            s[j] += y[j] * (g[j] - dot);
                        }
                    });
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            } => {
                let n = node.value.last_dim();
                let gv = self.nodes[gain.0].value.data();
                acc(*gain, &mut |s| {
                    for (grow, hrow) in g.chunks_exact(n).zip(normalized.chunks_exact(n)) {
                        for j in 0..n {
                            s[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for row in g.chunks_exact(n) {
                        add_into(s, row);
                    }
                });
                acc(*x, &mut |s| {
                    for (r, (grow, hrow)) in g.chunks_exact(n).zip(normalized.chunks_exact(n)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let dh = grow[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        let srow = &mut s[r * n..(r + 1) * n];
                        for j in 0..n {
                            let dh = grow[j] * gv[j];
                            srow[j] += rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = self.nodes[logits.0].value.last_dim();
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut s[r * vocab..(r + 1) * vocab];
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            row[j] += scale * (p[j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::AbsSum(x, keep) => {
                let xv = self.nodes[x.0].value.data();
                acc(*x, &mut |s| {
                    for (j, (s, &v)) in s.iter_mut().zip(xv).enumerate() {
                        if keep.as_ref().is_none_or(|k| k[j]) {
                            *s += g[0] * sign(v);
                        }
                    }
                });
            }
            Op::CausalMask(x) => {
                let n = node.value.last_dim();
                acc(*x, &mut |s| {
                    for i in 0..n {
                        for j in 0..=i {
                            s[i * n + j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Gather(table, indices) => {
                let d = node.value.last_dim();
                acc(*table, &mut |s| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut s[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SliceBlock { x, row, col } => {
                let (rows, cols) = dims(&node.value);
                let c = self.nodes[x.0].value.last_dim();
                acc(*x, &mut |s| {
                    for i in 0..rows {
                        let dst = (row + i) * c + col;
                        add_into(&mut s[dst..dst + cols], &g[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::Assemble(parts) => {
                let cols = node.value.last_dim();
                for &(p, r0, c0) in parts {
                    let (pr, pc) = dims(&self.nodes[p.0].value);
                    acc(p, &mut |s| {
                        for i in 0..pr {
                            let src = (r0 + i) * cols + c0;
                            add_into(&mut s[i * pc..(i + 1) * pc], &g[src..src + pc]);
                        }
                    });
                }
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    (s[0], s[1])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
