//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Values are recorded eagerly as operations are applied. A node keeps its
//! vector-Jacobian rule only when at least one input depends on a trainable
//! parameter; everything else is stored as a constant, so frozen weights
//! never accumulate gradient no matter how the graph is wired.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::ops::{gelu_grad_scalar, gelu_scalar};
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Identifier of a trainable parameter, chosen by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub u32);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub type Gradients = BTreeMap<ParamId, Tensor>;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, rstd: Vec<f64> },
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRow(Var, usize),
    Gather(Var, Vec<usize>),
    L2NormalizeRows(Var, Vec<f64>),
    CrossEntropyRows(Var, Vec<usize>),
    Sum(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    tracked: bool,
}

/// Ordered trace of primitive applications.
///
/// Constants may be borrowed for the lifetime `'a`, so frozen backbone
/// weights are never copied onto the tape.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).values()[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite output from {:?}", op_name(&op))));
        }
        let op = if tracked { op } else { Op::Const };
        self.nodes.push(Node { value: Cow::Owned(value), op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Frozen input; never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op: Op::Const, tracked: false });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Const, tracked: false });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op: Op::Param(id), tracked: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param_ref(&mut self, id: ParamId, value: &'a Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Param(id), tracked: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that is trainable or frozen depending on `trainable`.
    pub fn leaf_ref(&mut self, id: ParamId, value: &'a Tensor, trainable: bool) -> Var {
        if trainable {
            self.param_ref(id, value)
        } else {
            self.constant_ref(value)
        }
    }

    fn any_tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let t = self.any_tracked(&[a, b]);
        self.push(out, Op::MatMul(a, b), t)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_nt(self.value(a), self.value(b))?;
        let t = self.any_tracked(&[a, b]);
        self.push(out, Op::MatMulNT(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let t = self.any_tracked(&[a, b]);
        self.push(out, Op::Add(a, b), t)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_shape(y) {
            return Err(Error::shape("mul", x.shape(), y.shape()));
        }
        let vals = x.values().iter().zip(y.values()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), vals)?;
        let t = self.any_tracked(&[a, b]);
        self.push(out, Op::Mul(a, b), t)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return Err(Error::shape("add_row", self.value(a).shape(), self.value(row).shape()));
        }
        let r = self.value(row).values();
        let mut vals = self.value(a).values().to_vec();
        for i in 0..m {
            for (v, b) in vals[i * n..(i + 1) * n].iter_mut().zip(r) {
                *v += b;
            }
        }
        let t = self.any_tracked(&[a, row]);
        self.push(Tensor::matrix(m, n, vals)?, Op::AddRow(a, row), t)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        let t = self.any_tracked(&[a]);
        self.push(out, Op::Scale(a, s), t)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu_scalar);
        let t = self.any_tracked(&[a]);
        self.push(out, Op::Gelu(a), t)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(gamma) != (1, n) || self.dims(beta) != (1, n) {
            return Err(Error::shape("layer_norm", self.value(x).shape(), self.value(gamma).shape()));
        }
        let xv = self.value(x).values();
        let g = self.value(gamma).values();
        let b = self.value(beta).values();
        let mut xhat = vec![0.0; m * n];
        let mut out = vec![0.0; m * n];
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let t = self.any_tracked(&[x, gamma, beta]);
        let xhat = Tensor::matrix(m, n, xhat)?;
        self.push(Tensor::matrix(m, n, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, t)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let mut vals = self.value(a).values().to_vec();
        for i in 0..m {
            softmax_in_place(&mut vals[i * n..(i + 1) * n]);
        }
        let t = self.any_tracked(&[a]);
        self.push(Tensor::matrix(m, n, vals)?, Op::SoftmaxRows(a), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if len == 0 || start + len > n {
            return Err(Error::Index { what: "column slice end", index: start + len, len: n + 1 });
        }
        let src = self.value(a).values();
        let mut vals = Vec::with_capacity(m * len);
        for i in 0..m {
            vals.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let t = self.any_tracked(&[a]);
        self.push(Tensor::matrix(m, len, vals)?, Op::SliceCols(a, start), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(Error::shape("concat_cols", self.value(parts[0]).shape(), self.value(p).shape()));
            }
            total += pn;
        }
        let mut vals = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let (_, pn) = self.dims(p);
            let src = self.value(p).values();
            for i in 0..m {
                vals[i * total + off..i * total + off + pn].copy_from_slice(&src[i * pn..(i + 1) * pn]);
            }
            off += pn;
        }
        let t = self.any_tracked(parts);
        self.push(Tensor::matrix(m, total, vals)?, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims(parts[0]).1;
        let mut vals = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(Error::shape("concat_rows", self.value(parts[0]).shape(), self.value(p).shape()));
            }
            vals.extend_from_slice(self.value(p).values());
            rows += pm;
        }
        let t = self.any_tracked(parts);
        self.push(Tensor::matrix(rows, n, vals)?, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let (m, _) = self.dims(a);
        if row >= m {
            return Err(Error::Index { what: "row", index: row, len: m });
        }
        let out = Tensor::row_vector(self.value(a).row(row).to_vec());
        let t = self.any_tracked(&[a]);
        self.push(out, Op::SelectRow(a, row), t)
    }

    /// Rows of `table` at `indices` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(table);
        let src = self.value(table);
        let mut vals = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::Index { what: "gather row", index: i, len: m });
            }
            vals.extend_from_slice(src.row(i));
        }
        let out = Tensor::matrix(indices.len(), n, vals)?;
        let t = self.any_tracked(&[table]);
        self.push(out, Op::Gather(table, indices.to_vec()), t)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let mut vals = self.value(a).values().to_vec();
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &mut vals[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateVector("l2_normalize_rows input row"));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let t = self.any_tracked(&[a]);
        self.push(Tensor::matrix(m, n, vals)?, Op::L2NormalizeRows(a, norms), t)
    }

    /// Mean softmax cross-entropy over rows of `logits` against `targets`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, k) = self.dims(logits);
        if targets.len() != m {
            return Err(Error::shape("cross_entropy_rows", &[m, k], &[targets.len()]));
        }
        let lv = self.value(logits).values();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            total += super::ops::softmax_xent(&lv[i * k..(i + 1) * k], t)?;
        }
        let t = self.any_tracked(&[logits]);
        self.push(Tensor::scalar(total / m as f64), Op::CrossEntropyRows(logits, targets.to_vec()), t)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).values().iter().sum();
        let t = self.any_tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), t)
    }

    /// Reverse pass from a scalar node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.dims(loss) != (1, 1) {
            return Err(Error::Contract(format!("gradient root must be scalar, got shape {:?}", self.value(loss).shape())));
        }
        let mut out = Gradients::new();
        if !self.nodes[loss.0].tracked {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Const => {}
                Op::Param(id) => match out.get_mut(id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(*id, g);
                    }
                },
                op => self.backprop(op, &node.value, &g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Const | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, matmul_nt(g, self.value(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, matmul_tn(self.value(*a), g)?);
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a b^T: da = g b, db = g^T a
                if self.wants(*a) {
                    self.accumulate(grads, *a, matmul(g, self.value(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, matmul_tn(g, self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let v = g.values().iter().zip(y.values()).map(|(p, q)| p * q).collect();
                    self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), v)?);
                }
                if self.wants(*b) {
                    let v = g.values().iter().zip(x.values()).map(|(p, q)| p * q).collect();
                    self.accumulate(grads, *b, Tensor::new(y.shape().to_vec(), v)?);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    let (m, n) = g.dims();
                    let mut r = vec![0.0; n];
                    for i in 0..m {
                        for (acc, v) in r.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::row_vector(r));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let v = g.values().iter().zip(x.values()).map(|(gv, xv)| gv * gelu_grad_scalar(*xv)).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), v)?);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (m, n) = g.dims();
                let gam = self.value(*gamma).values();
                let gv = g.values();
                let hv = xhat.values();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += gv[i * n + j] * hv[i * n + j];
                            db[j] += gv[i * n + j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::row_vector(dg));
                    self.accumulate(grads, *beta, Tensor::row_vector(db));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            let d = gv[i * n + j] * gam[j];
                            mean_d += d;
                            mean_dh += d * hv[i * n + j];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        for j in 0..n {
                            let d = gv[i * n + j] * gam[j];
                            dx[i * n + j] = rstd[i] * (d - mean_d - hv[i * n + j] * mean_dh);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::matrix(m, n, dx)?);
                }
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = out.dims();
                let y = out.values();
                let gv = g.values();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let dot: f64 = (0..n).map(|j| gv[i * n + j] * y[i * n + j]).sum();
                    for j in 0..n {
                        dx[i * n + j] = y[i * n + j] * (gv[i * n + j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(m, n, dx)?);
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.dims(*a);
                let len = g.cols();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, Tensor::matrix(m, n, dx)?);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = g.dims();
                let mut off = 0;
                for &p in parts {
                    let pn = self.dims(p).1;
                    if self.wants(p) {
                        let mut v = Vec::with_capacity(m * pn);
                        for i in 0..m {
                            v.extend_from_slice(&g.values()[i * total + off..i * total + off + pn]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(m, pn, v)?);
                    }
                    off += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut row = 0;
                for &p in parts {
                    let pm = self.dims(p).0;
                    if self.wants(p) {
                        let v = g.values()[row * n..(row + pm) * n].to_vec();
                        self.accumulate(grads, p, Tensor::matrix(pm, n, v)?);
                    }
                    row += pm;
                }
            }
            Op::SelectRow(a, r) => {
                let (m, n) = self.dims(*a);
                let mut dx = vec![0.0; m * n];
                dx[r * n..(r + 1) * n].copy_from_slice(g.values());
                self.accumulate(grads, *a, Tensor::matrix(m, n, dx)?);
            }
            Op::Gather(table, indices) => {
                let (m, n) = self.dims(*table);
                let mut dx = vec![0.0; m * n];
                for (k, &i) in indices.iter().enumerate() {
                    for (d, v) in dx[i * n..(i + 1) * n].iter_mut().zip(g.row(k)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *table, Tensor::matrix(m, n, dx)?);
            }
            Op::L2NormalizeRows(a, norms) => {
                let (m, n) = out.dims();
                let y = out.values();
                let gv = g.values();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let dot: f64 = (0..n).map(|j| gv[i * n + j] * y[i * n + j]).sum();
                    for j in 0..n {
                        dx[i * n + j] = (gv[i * n + j] - y[i * n + j] * dot) / norms[i];
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(m, n, dx)?);
            }
            Op::CrossEntropyRows(logits, targets) => {
                let (m, k) = self.dims(*logits);
                let lv = self.value(*logits).values();
                let scale = g.values()[0] / m as f64;
                let mut dx = lv.to_vec();
                for (i, &t) in targets.iter().enumerate() {
                    let row = &mut dx[i * k..(i + 1) * k];
                    softmax_in_place(row);
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, Tensor::matrix(m, k, dx)?);
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), vec![g.values()[0]; x.len()])?);
            }
        }
        Ok(())
    }
}

/// Reverse-mode gradients of the scalar `loss` for every reachable trainable parameter.
pub fn grad(tape: &Tape<'_>, loss: Var) -> Result<Gradients> {
    tape.gradients(loss)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Const => "const",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::MatMulNT(..) => "matmul_nt",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::Gelu(_) => "gelu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::ConcatCols(_) => "concat_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::SelectRow(..) => "select_row",
        Op::Gather(..) => "gather_rows",
        Op::L2NormalizeRows(..) => "l2_normalize_rows",
        Op::CrossEntropyRows(..) => "cross_entropy_rows",
        Op::Sum(_) => "sum",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_gradient_is_broadcast_input() {
        let w = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let x = Tensor::from_rows(&[&[0.5], &[-1.0], &[2.0]]).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(ParamId(0), w);
        let xv = tape.constant(x);
        let y = tape.matmul(wv, xv).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = grad(&tape, loss).unwrap();
        assert_eq!(g[&ParamId(0)].values(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn disconnected_and_frozen_params_absent() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(1), Tensor::scalar(2.0));
        let frozen = tape.constant(Tensor::scalar(3.0));
        let _unused = tape.param(ParamId(2), Tensor::scalar(5.0));
        let y = tape.mul(w, frozen).unwrap();
        let g = grad(&tape, y).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[&ParamId(1)].values(), &[3.0]);
        assert!(!g.contains_key(&ParamId(2)));
    }

    #[test]
    fn untracked_ops_are_recorded_as_constants() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.scale(a, 3.0).unwrap();
        assert!(!tape.is_tracked(b));
        let g = grad(&tape, b).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(ParamId(0), Tensor::zeros(2, 2));
        assert!(matches!(grad(&tape, a), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_param_gradients_sum() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), Tensor::scalar(3.0));
        let a = tape.scale(w, 2.0).unwrap();
        let b = tape.scale(w, 5.0).unwrap();
        let s = tape.add(a, b).unwrap();
        let g = grad(&tape, s).unwrap();
        assert_eq!(g[&ParamId(0)].values(), &[7.0]);
    }
}
