//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Parameters enter through [`Graph::param`] tagged with a slot index; the
//! gradient of a slot is the sum over every leaf registered under it.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{GallatError, Result};
use crate::tensor::{gemm, Matrix, Trans};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation recorded for a node.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceRows { src: Var, start: usize },
    GatherRows { table: Var, indices: Vec<usize> },
    Add(Var, Var),
    Hadamard(Var, Var),
    ScalarMul(Var, f64),
    /// `out[i][j] = x[i][j] · s[i]`
    ScaleRows { x: Var, scale: Var },
    /// `out[i][j] = left[i] + w[i][j] · right[j]`, `w ≡ 1` when absent.
    PairScores { left: Var, right: Var, weights: Option<Arc<Matrix>> },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid(Var),
    RowSoftmax(Var),
    /// Softmax restricted to `mask` per row; rows with an empty mask are all zero.
    MaskedRowSoftmax { x: Var, mask: Arc<Vec<bool>> },
    SmoothL1 { pred: Var, target: Var },
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// A computation graph confined to one thread of execution.
#[derive(Clone, Debug, Default)]
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Learnable input; its gradient is reported under `slot`.
    pub fn param(&mut self, slot: usize, value: Matrix) -> Var {
        self.push(Op::Param(slot), value, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMulNT(a, b), value, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.needs(a);
        self.push(Op::Transpose(a), value, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(GallatError::contract("concat_cols of nothing"));
        };
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(GallatError::dimension("concat_cols", self.shape(first), self.shape(p)));
            }
            cols += self.shape(p).1;
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, rg))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(src);
        if start + len > rows {
            return Err(GallatError::dimension("slice_rows", (rows, cols), (start + len, cols)));
        }
        let data = self.value(src).data()[start * cols..(start + len) * cols].to_vec();
        let value = Matrix::new(len, cols, data)?;
        let rg = self.needs(src);
        Ok(self.push(Op::SliceRows { src, start }, value, rg))
    }

    /// Row lookup (embedding table access).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(table);
        let mut out = Matrix::zeros(indices.len(), cols);
        for (r, &i) in indices.iter().enumerate() {
            if i >= rows {
                return Err(GallatError::contract(alloc::format!(
                    "gather index {i} out of range for table with {rows} rows"
                )));
            }
            out.row_mut(r).copy_from_slice(self.value(table).row(i));
        }
        let rg = self.needs(table);
        Ok(self.push(Op::GatherRows { table, indices: indices.to_vec() }, out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).check_same(self.value(b), "hadamard")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let (r, c) = self.shape(a);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Hadamard(a, b), Matrix::new(r, c, data)?, rg))
    }

    pub fn scalar_mul(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let rg = self.needs(a);
        self.push(Op::ScalarMul(a, k), value, rg)
    }

    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(scale) != (r, 1) {
            return Err(GallatError::dimension("scale_rows", (r, c), self.shape(scale)));
        }
        let mut out = self.value(x).clone();
        for i in 0..r {
            let s = self.value(scale).get(i, 0);
            for v in out.row_mut(i) {
                *v *= s;
            }
        }
        let rg = self.needs(x) || self.needs(scale);
        Ok(self.push(Op::ScaleRows { x, scale }, out, rg))
    }

    pub fn pair_scores(&mut self, left: Var, right: Var, weights: Option<Arc<Matrix>>) -> Result<Var> {
        let (n, lc) = self.shape(left);
        let (m, rc) = self.shape(right);
        if lc != 1 || rc != 1 {
            return Err(GallatError::dimension("pair_scores", (n, lc), (m, rc)));
        }
        if let Some(w) = &weights {
            if w.shape() != (n, m) {
                return Err(GallatError::dimension("pair_scores weights", w.shape(), (n, m)));
            }
        }
        let l = self.value(left).data();
        let rv = self.value(right).data();
        let out = Matrix::from_fn(n, m, |i, j| match &weights {
            Some(w) => l[i] + w.get(i, j) * rv[j],
            None => l[i] + rv[j],
        });
        let rg = self.needs(left) || self.needs(right);
        Ok(self.push(Op::PairScores { left, right, weights }, out, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.needs(x);
        self.push(Op::LeakyRelu { x, slope }, value, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.needs(x);
        self.push(Op::Sigmoid(x), value, rg)
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let value = row_softmax(self.value(x));
        let rg = self.needs(x);
        self.push(Op::RowSoftmax(x), value, rg)
    }

    pub fn masked_row_softmax(&mut self, x: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if mask.len() != r * c {
            return Err(GallatError::dimension("masked_row_softmax", (r, c), (mask.len(), 1)));
        }
        let value = masked_row_softmax(self.value(x), &mask);
        let rg = self.needs(x);
        Ok(self.push(Op::MaskedRowSoftmax { x, mask }, value, rg))
    }

    /// Mean smooth-L1 (Huber with unit threshold) as a `1×1` node.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        let loss = smooth_l1(self.value(pred), self.value(target))?;
        let rg = self.needs(pred) || self.needs(target);
        Ok(self.push(Op::SmoothL1 { pred, target }, Matrix::filled(1, 1, loss), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.needs(x);
        self.push(Op::Sum(x), Matrix::filled(1, 1, s), rg)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(GallatError::contract(alloc::format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(slot) => Some((slot, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    gemm(Trans::No, g, Trans::Yes, vb, 1.0, 1.0, slot(grads, *a, va.shape()));
                }
                if self.needs(*b) {
                    gemm(Trans::Yes, va, Trans::No, g, 1.0, 1.0, slot(grads, *b, vb.shape()));
                }
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    gemm(Trans::No, g, Trans::No, vb, 1.0, 1.0, slot(grads, *a, va.shape()));
                }
                if self.needs(*b) {
                    gemm(Trans::Yes, g, Trans::No, va, 1.0, 1.0, slot(grads, *b, vb.shape()));
                }
            }
            Op::Transpose(a) => {
                let acc = slot(grads, *a, self.shape(*a));
                let (r, c) = g.shape();
                for i in 0..r {
                    for j in 0..c {
                        let v = acc.get(j, i) + g.get(i, j);
                        acc.set(j, i, v);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.needs(p) {
                        let acc = slot(grads, p, (rows, cols));
                        for r in 0..rows {
                            let src = &g.row(r)[off..off + cols];
                            for (a, b) in acc.row_mut(r).iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                    off += cols;
                }
            }
            Op::SliceRows { src, start } => {
                let cols = g.cols();
                let acc = slot(grads, *src, self.shape(*src));
                let dst = &mut acc.data_mut()[start * cols..(start + g.rows()) * cols];
                for (a, b) in dst.iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            Op::GatherRows { table, indices } => {
                let acc = slot(grads, *table, self.shape(*table));
                for (r, &i) in indices.iter().enumerate() {
                    for (a, b) in acc.row_mut(i).iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(slot(grads, v, g.shape()), g);
                    }
                }
            }
            Op::Hadamard(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.needs(v) {
                        let o = self.value(other).data();
                        let acc = slot(grads, v, g.shape());
                        for ((x, gv), ov) in acc.data_mut().iter_mut().zip(g.data()).zip(o) {
                            *x += gv * ov;
                        }
                    }
                }
            }
            Op::ScalarMul(a, k) => {
                let acc = slot(grads, *a, g.shape());
                for (x, gv) in acc.data_mut().iter_mut().zip(g.data()) {
                    *x += k * gv;
                }
            }
            Op::ScaleRows { x, scale } => {
                let (r, _) = g.shape();
                if self.needs(*x) {
                    let s = self.value(*scale).data().to_vec();
                    let acc = slot(grads, *x, g.shape());
                    for i in 0..r {
                        for (a, gv) in acc.row_mut(i).iter_mut().zip(g.row(i)) {
                            *a += gv * s[i];
                        }
                    }
                }
                if self.needs(*scale) {
                    let xv = self.value(*x);
                    let ds: Vec<f64> =
                        (0..r).map(|i| g.row(i).iter().zip(xv.row(i)).map(|(a, b)| a * b).sum()).collect();
                    let acc = slot(grads, *scale, (r, 1));
                    for (a, d) in acc.data_mut().iter_mut().zip(ds) {
                        *a += d;
                    }
                }
            }
            Op::PairScores { left, right, weights } => {
                let (n, m) = g.shape();
                if self.needs(*left) {
                    let acc = slot(grads, *left, (n, 1));
                    for i in 0..n {
                        acc.data_mut()[i] += g.row(i).iter().sum::<f64>();
                    }
                }
                if self.needs(*right) {
                    let acc = slot(grads, *right, (m, 1));
                    let d = acc.data_mut();
                    for i in 0..n {
                        let row = g.row(i);
                        match weights {
                            Some(w) => {
                                for (j, gv) in row.iter().enumerate() {
                                    d[j] += gv * w.get(i, j);
                                }
                            }
                            None => {
                                for (j, gv) in row.iter().enumerate() {
                                    d[j] += gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let acc = slot(grads, *x, g.shape());
                for ((a, gv), v) in acc.data_mut().iter_mut().zip(g.data()).zip(xv) {
                    *a += if *v > 0.0 { *gv } else { slope * gv };
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let acc = slot(grads, *x, g.shape());
                for ((a, gv), yv) in acc.data_mut().iter_mut().zip(g.data()).zip(y) {
                    *a += gv * yv * (1.0 - yv);
                }
            }
            Op::RowSoftmax(x) | Op::MaskedRowSoftmax { x, .. } => {
                // Masked-out entries have y = 0, so the same formula zeroes them.
                let y = &node.value;
                let acc = slot(grads, *x, g.shape());
                for r in 0..g.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((a, yv), gv) in acc.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *a += yv * (gv - dot);
                    }
                }
            }
            Op::SmoothL1 { pred, target } => {
                let scale = g.get(0, 0) / self.value(*pred).len().max(1) as f64;
                let p = self.value(*pred).data();
                let t = self.value(*target).data();
                let d: Vec<f64> = p
                    .iter()
                    .zip(t)
                    .map(|(a, b)| {
                        let e = a - b;
                        scale * if e.abs() < 1.0 { e } else { e.signum() }
                    })
                    .collect();
                let shape = self.shape(*pred);
                if self.needs(*pred) {
                    let acc = slot(grads, *pred, shape);
                    for (a, dv) in acc.data_mut().iter_mut().zip(&d) {
                        *a += dv;
                    }
                }
                if self.needs(*target) {
                    let acc = slot(grads, *target, shape);
                    for (a, dv) in acc.data_mut().iter_mut().zip(&d) {
                        *a -= dv;
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g.get(0, 0);
                let acc = slot(grads, *x, self.shape(*x));
                for a in acc.data_mut() {
                    *a += gv;
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn add_into(acc: &mut Matrix, g: &Matrix) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

/// Result of [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`; `None` when `v` is not on any path.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Summed gradient of every leaf registered under `slot`, zero-filled to
    /// `shape` when the slot is unreachable from the root.
    pub fn param(&self, slot: usize, shape: (usize, usize)) -> Matrix {
        let mut out = Matrix::zeros(shape.0, shape.1);
        for &(s, v) in &self.params {
            if s == slot {
                if let Some(g) = self.get(v) {
                    add_into(&mut out, g);
                }
            }
        }
        out
    }

    /// Adds each slot's gradient into `acc[slot]`, scaled by `k`.
    pub fn accumulate_into(&self, acc: &mut [Matrix], k: f64) {
        for &(s, v) in &self.params {
            if let Some(g) = self.get(v) {
                for (a, b) in acc[s].data_mut().iter_mut().zip(g.data()) {
                    *a += k * b;
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn row_softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn masked_row_softmax(x: &Matrix, mask: &[bool]) -> Matrix {
    let (rows, cols) = x.shape();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let m = &mask[r * cols..(r + 1) * cols];
        let xr = x.row(r);
        let max = xr.iter().zip(m).filter(|(_, &k)| k).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let o = out.row_mut(r);
        let mut total = 0.0;
        for c in 0..cols {
            if m[c] {
                o[c] = libm::exp(xr[c] - max);
                total += o[c];
            }
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Mean over elements of `0.5e²` for `|e| < 1`, else `|e| − 0.5`.
pub fn smooth_l1(pred: &Matrix, target: &Matrix) -> Result<f64> {
    pred.check_same(target, "smooth_l1")?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let e = (p - t).abs();
            if e < 1.0 {
                0.5 * e * e
            } else {
                e - 0.5
            }
        })
        .sum();
    Ok(total / pred.len() as f64)
}
