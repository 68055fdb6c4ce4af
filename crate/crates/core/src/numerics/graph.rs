//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation of one forward pass as a node. Nodes
//! are appended in evaluation order, so a single reverse sweep over the node
//! list is a valid topological order for backpropagation. A graph belongs to
//! exactly one forward pass and is never shared between threads.

use std::borrow::Cow;

use super::kernels::{self, mm, mm_at, mm_bt};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
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
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulBt {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: f64,
    },
    Gelu {
        a: Var,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Softmax {
        a: Var,
    },
    ColSlice {
        a: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    RowSlice {
        a: Var,
        start: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    ScatterAddRows {
        base: Var,
        src: Var,
        positions: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum {
        a: Var,
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// require gradients or is not upstream of the root.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register an input. Only leaves created with `requires_grad` receive
    /// gradients; everything downstream of none of them is treated as constant.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that borrows its value, e.g. a model parameter.
    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
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

    /// `x · wᵀ + b` with `w` stored as `out × in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = as_matrix(self.value(x));
        let ws = self.value(w).shape();
        if ws.len() != 2 || ws[1] != din {
            return shape_err(format!("linear: input dim {din} vs weight {ws:?}"));
        }
        let dout = ws[0];
        let mut y = mm_bt(self.value(x).data(), self.value(w).data(), n, din, dout);
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != dout {
                return shape_err("linear: bias length");
            }
            for row in y.chunks_mut(dout) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let value = Tensor::matrix(n, dout, y)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a));
        let (k2, n) = as_matrix(self.value(b));
        if k != k2 {
            return shape_err(format!("matmul inner dims {k} vs {k2}"));
        }
        let y = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::matrix(m, n, y)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a));
        let (n, k2) = as_matrix(self.value(b));
        if k != k2 {
            return shape_err(format!("matmul_bt inner dims {k} vs {k2}"));
        }
        let y = mm_bt(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::matrix(m, n, y)?;
        Ok(self.push(value, Op::MatMulBt { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "add {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err("mul shape mismatch");
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * s).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { a, s }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| kernels::gelu(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu { a }, &[a])
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).numel() != d {
            return shape_err(format!(
                "rms_norm gain length {} vs last dim {d}",
                self.value(gain).numel()
            ));
        }
        let (y, inv_rms) =
            kernels::rms_norm_rows(self.value(x).data(), self.value(gain).data(), eps);
        let value = Tensor::new(self.value(x).shape().to_vec(), y)?;
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Row softmax. With `causal_offset = Some(o)`, row `i` only attends to
    /// columns `j ≤ i + o`; masked entries get probability exactly 0.
    pub fn softmax(&mut self, a: Var, causal_offset: Option<usize>) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = as_matrix(t);
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let valid = match causal_offset {
                Some(o) => (r + o + 1).min(cols),
                None => cols,
            };
            kernels::softmax_prefix(t.row(r), valid, &mut out[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { a }, &[a]))
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = as_matrix(self.value(a));
        if len == 0 || start + len > cols {
            return shape_err("column slice out of range");
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::matrix(rows, len, data)?;
        Ok(self.push(value, Op::ColSlice { a, start }, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols of nothing");
        };
        let rows = self.value(first).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return shape_err("concat_cols row mismatch");
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    pub fn row_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, len)?;
        Ok(self.push(value, Op::RowSlice { a, start }, &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Row lookup: `out[i] = table[ids[i]]`. Used for embeddings and for
    /// applying token permutations.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = as_matrix(t);
        if ids.is_empty() {
            return shape_err("gather of zero rows");
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return shape_err(format!("gather index {i} out of {rows} rows"));
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::matrix(ids.len(), cols, data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    /// `out = base; out[positions[k]] += src[k]`. Rows of `base` not named in
    /// `positions` are copied bit-for-bit.
    pub fn scatter_add_rows(&mut self, base: Var, src: Var, positions: &[usize]) -> Result<Var> {
        let (rows, cols) = as_matrix(self.value(base));
        let (srows, scols) = as_matrix(self.value(src));
        if scols != cols || srows != positions.len() {
            return shape_err(format!(
                "scatter: {srows}×{scols} source rows for {} positions of width {cols}",
                positions.len()
            ));
        }
        let mut out = self.value(base).clone();
        for (k, &p) in positions.iter().enumerate() {
            if p >= rows {
                return shape_err("scatter position out of range");
            }
            let s = self.value(src).row(k).to_vec();
            for (o, v) in out.row_mut(p).iter_mut().zip(s) {
                *o += v;
            }
        }
        Ok(self.push(
            out,
            Op::ScatterAddRows {
                base,
                src,
                positions: positions.to_vec(),
            },
            &[base, src],
        ))
    }

    /// Mean over `(row, target)` pairs of `−log softmax(logits[row])[target]`.
    pub fn cross_entropy(&mut self, logits: Var, rows: &[usize], targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, v) = as_matrix(t);
        if rows.len() != targets.len() || rows.is_empty() {
            return Err(Error::Loss(
                "cross entropy needs ≥ 1 matching row/target".into(),
            ));
        }
        let mut probs = vec![0.0; rows.len() * v];
        let mut loss = 0.0;
        for (k, (&r, &tgt)) in rows.iter().zip(targets).enumerate() {
            if r >= n || tgt >= v {
                return shape_err("cross entropy index out of range");
            }
            let p = &mut probs[k * v..(k + 1) * v];
            kernels::softmax_prefix(t.row(r), v, p);
            // log-sum-exp form keeps saturated logits exact
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[tgt];
        }
        let value = Tensor::scalar(loss / rows.len() as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum { a }, &[a])
    }

    /// Multi-head scaled dot-product attention over row-major `n × d` inputs.
    /// `causal_offset` as in [`Graph::softmax`]; `None` is bidirectional.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal_offset: Option<usize>,
    ) -> Result<Var> {
        let d = self.value(q).cols();
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("dim {d} not divisible by {heads} heads"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.col_slice(q, h * dh, dh)?,
                    self.col_slice(k, h * dh, dh)?,
                    self.col_slice(v, h * dh, dh)?,
                )
            };
            let scores = self.matmul_bt(qh, kh)?;
            let scores = self.scale(scores, scale);
            let probs = self.softmax(scores, causal_offset)?;
            outs.push(self.matmul(probs, vh)?);
        }
        if heads == 1 {
            Ok(outs[0])
        } else {
            self.concat_cols(&outs)
        }
    }

    /// Backpropagate from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return shape_err("backward root must be a scalar");
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let shapes = self
            .nodes
            .iter()
            .map(|nd| nd.value.shape().to_vec())
            .collect();
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        // only leaves and requires-grad nodes carry meaningful gradients
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<'a>, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, din) = as_matrix(xv);
                let dout = wv.shape()[0];
                if self.wants(*x) {
                    self.accumulate(grads, *x, mm(gy, wv.data(), n, dout, din));
                }
                if self.wants(*w) {
                    self.accumulate(grads, *w, mm_at(gy, xv.data(), n, dout, din));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; dout];
                        for row in gy.chunks(dout) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = as_matrix(self.value(*a));
                let n = self.value(*b).cols();
                if self.wants(*a) {
                    self.accumulate(grads, *a, mm_bt(gy, self.value(*b).data(), m, n, k));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, mm_at(self.value(*a).data(), gy, m, k, n));
                }
            }
            Op::MatMulBt { a, b } => {
                let (m, k) = as_matrix(self.value(*a));
                let n = self.value(*b).rows();
                if self.wants(*a) {
                    self.accumulate(grads, *a, mm(gy, self.value(*b).data(), m, n, k));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, mm_at(gy, self.value(*a).data(), m, n, k));
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gy.to_vec());
                self.accumulate(grads, *b, gy.to_vec());
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    self.accumulate(grads, *a, gy.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, gy.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale { a, s } => {
                self.accumulate(grads, *a, gy.iter().map(|g| g * s).collect());
            }
            Op::Gelu { a } => {
                let av = self.value(*a).data();
                let d = gy
                    .iter()
                    .zip(av)
                    .map(|(g, &x)| g * kernels::gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let d = gv.len();
                if self.wants(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &gy[r * d..(r + 1) * d];
                        let ux: f64 = (0..d).map(|c| gr[c] * gv[c] * xr[c]).sum();
                        let coef = ir * ir * ir * ux / d as f64;
                        for c in 0..d {
                            dx[r * d + c] = ir * gr[c] * gv[c] - coef * xr[c];
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*gain) {
                    let mut dg = vec![0.0; d];
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        for c in 0..d {
                            dg[c] += gy[r * d + c] * xv[r * d + c] * ir;
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / cols {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gy[r * cols..(r + 1) * cols];
                    let inner = kernels::dot(yr, gr);
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (gr[c] - inner);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::ColSlice { a, start } => {
                let (rows, cols) = as_matrix(self.value(*a));
                let len = node.value.cols();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&gy[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *a, dx);
            }
            Op::ConcatCols { parts } => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&gy[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, *p, dp);
                    }
                    offset += w;
                }
            }
            Op::RowSlice { a, start } => {
                let src = self.value(*a);
                let cols = src.cols();
                let mut dx = vec![0.0; src.numel()];
                dx[start * cols..start * cols + gy.len()].copy_from_slice(gy);
                self.accumulate(grads, *a, dx);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    self.accumulate(grads, *p, gy[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let cols = t.cols();
                let mut dt = vec![0.0; t.numel()];
                for (k, &i) in ids.iter().enumerate() {
                    for c in 0..cols {
                        dt[i * cols + c] += gy[k * cols + c];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Reshape { a } => {
                self.accumulate(grads, *a, gy.to_vec());
            }
            Op::ScatterAddRows {
                base,
                src,
                positions,
            } => {
                self.accumulate(grads, *base, gy.to_vec());
                if self.wants(*src) {
                    let cols = node.value.cols();
                    let mut ds = Vec::with_capacity(positions.len() * cols);
                    for &p in positions {
                        ds.extend_from_slice(&gy[p * cols..(p + 1) * cols]);
                    }
                    self.accumulate(grads, *src, ds);
                }
            }
            Op::CrossEntropy {
                logits,
                rows,
                targets,
                probs,
            } => {
                let t = self.value(*logits);
                let v = t.cols();
                let scale = gy[0] / rows.len() as f64;
                let mut dl = vec![0.0; t.numel()];
                for (k, (&r, &tgt)) in rows.iter().zip(targets).enumerate() {
                    for c in 0..v {
                        dl[r * v + c] += scale * probs[k * v + c];
                    }
                    dl[r * v + tgt] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gy[0]; n]);
            }
        }
    }
}
