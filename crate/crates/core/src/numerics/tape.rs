//! Wengert-list reverse-mode differentiation over [`Matrix`] values.
//!
//! Each operation appends a node holding its forward value and the indices of
//! its inputs. [`Tape::backward`] walks the list in reverse, so inputs always
//! precede outputs and no topological sort is needed.

use super::matrix::{matmul_raw, Matrix};
use super::{softmax_in_place, CROSS_ENTROPY_EPSILON};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    AddRowBias(Var, Var),
    Add(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    MulMask(Var, Matrix),
    Reshape(Var),
    SoftmaxRows(Var),
    GroupScores { q: Var, k: Var, group: usize },
    GroupMix { a: Var, v: Var, group: usize },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Single-owner record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Output of [`Tape::backward`]: one optional gradient per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// feed the loss.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn checked(rows: usize, cols: usize, data: Vec<f64>, what: &str) -> Result<Matrix> {
    let m = Matrix::from_raw(rows, cols, data);
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::numeric(format!("{what} produced a non-finite value")))
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Register an input or trainable parameter.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `x + 1·bias`, where `bias` is a single row broadcast over every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xm, bm) = (self.value(x), self.value(bias));
        if bm.rows() != 1 || bm.cols() != xm.cols() {
            return Err(Error::input(format!(
                "bias shape {:?} does not broadcast over {:?}",
                bm.shape(),
                xm.shape()
            )));
        }
        let mut data = xm.data().to_vec();
        for row in data.chunks_mut(xm.cols()) {
            for (o, b) in row.iter_mut().zip(bm.data()) {
                *o += b;
            }
        }
        let value = checked(xm.rows(), xm.cols(), data, "add_row_bias")?;
        Ok(self.push(value, Op::AddRowBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.shape() != bm.shape() {
            return Err(Error::input(format!(
                "add shape mismatch {:?} vs {:?}",
                am.shape(),
                bm.shape()
            )));
        }
        let data = am.data().iter().zip(bm.data()).map(|(x, y)| x + y).collect();
        let value = checked(am.rows(), am.cols(), data, "add")?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let data = xm.data().iter().map(|v| v.max(0.0)).collect();
        let value = Matrix::from_raw(xm.rows(), xm.cols(), data);
        self.push(value, Op::Relu(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xm = self.value(x);
        let data = xm.data().iter().map(|v| v * factor).collect();
        let value = checked(xm.rows(), xm.cols(), data, "scale")?;
        Ok(self.push(value, Op::Scale(x, factor)))
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mul_mask(&mut self, x: Var, mask: Matrix) -> Result<Var> {
        let xm = self.value(x);
        if xm.shape() != mask.shape() {
            return Err(Error::input("mask shape mismatch"));
        }
        let data = xm.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
        let value = checked(xm.rows(), xm.cols(), data, "mul_mask")?;
        Ok(self.push(value, Op::MulMask(x, mask)))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(x).reshape(rows, cols)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Softmax applied independently to every row.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let mut data = xm.data().to_vec();
        for row in data.chunks_mut(xm.cols().max(1)) {
            softmax_in_place(row);
        }
        let value = Matrix::from_raw(xm.rows(), xm.cols(), data);
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Block-diagonal `Q·Kᵀ`.
    ///
    /// `q` and `k` are `(n·group) x t`, i.e. `n` sequences of `group` tokens
    /// stacked row-wise. The result is `(n·group) x group`; row `s·group + i`
    /// holds the scores of token `i` of sequence `s` against every token of
    /// the same sequence.
    pub fn group_scores(&mut self, q: Var, k: Var, group: usize) -> Result<Var> {
        let (qm, km) = (self.value(q), self.value(k));
        if qm.shape() != km.shape() || group == 0 || qm.rows() % group != 0 {
            return Err(Error::input(format!(
                "group_scores: q {:?}, k {:?}, group {group}",
                qm.shape(),
                km.shape()
            )));
        }
        let t = qm.cols();
        let mut data = vec![0.0; qm.rows() * group];
        for s in 0..qm.rows() / group {
            for i in 0..group {
                let qi = qm.row(s * group + i);
                for j in 0..group {
                    let kj = km.row(s * group + j);
                    data[(s * group + i) * group + j] =
                        qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                }
            }
        }
        debug_assert_eq!(t, km.cols());
        let value = checked(qm.rows(), group, data, "group_scores")?;
        Ok(self.push(value, Op::GroupScores { q, k, group }))
    }

    /// Block-diagonal `A·V`: token `i` of sequence `s` becomes
    /// `Σ_j a[s·group+i, j] · v[s·group+j]`.
    pub fn group_mix(&mut self, a: Var, v: Var, group: usize) -> Result<Var> {
        let (am, vm) = (self.value(a), self.value(v));
        if am.cols() != group || am.rows() != vm.rows() || group == 0 || am.rows() % group != 0 {
            return Err(Error::input(format!(
                "group_mix: a {:?}, v {:?}, group {group}",
                am.shape(),
                vm.shape()
            )));
        }
        let t = vm.cols();
        let mut data = vec![0.0; vm.rows() * t];
        for s in 0..am.rows() / group {
            for i in 0..group {
                let row = s * group + i;
                let out = &mut data[row * t..(row + 1) * t];
                for j in 0..group {
                    let w = am.get(row, j);
                    for (o, x) in out.iter_mut().zip(vm.row(s * group + j)) {
                        *o += w * x;
                    }
                }
            }
        }
        let value = checked(vm.rows(), t, data, "group_mix")?;
        Ok(self.push(value, Op::GroupMix { a, v, group }))
    }

    /// Mean over rows of `-ln(max(softmax(row)[label], ε))`. Produces a 1x1 node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lm = self.value(logits);
        if lm.rows() != labels.len() || lm.rows() == 0 {
            return Err(Error::input(format!(
                "{} label(s) for {} logit row(s)",
                labels.len(),
                lm.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lm.cols()) {
            return Err(Error::input(format!(
                "label {bad} out of range for {} classes",
                lm.cols()
            )));
        }
        let mut total = 0.0;
        let mut row_buf = vec![0.0; lm.cols()];
        for (r, &label) in labels.iter().enumerate() {
            row_buf.copy_from_slice(lm.row(r));
            softmax_in_place(&mut row_buf);
            total -= row_buf[label].max(CROSS_ENTROPY_EPSILON).ln();
        }
        let loss = total / labels.len() as f64;
        let value = checked(1, 1, vec![loss], "softmax_cross_entropy")?;
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse accumulation from a scalar (1x1) node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::input("backward needs a 1x1 loss node"));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_raw(1, 1, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let am = self.value(*a);
                    let bm = self.value(*b);
                    let (m, k, n) = (am.rows(), am.cols(), bm.cols());
                    let bt = bm.transpose();
                    let da = matmul_raw(upstream.data(), bt.data(), m, n, k);
                    accumulate(&mut grads, *a, m, k, &da);
                    let at = am.transpose();
                    let db = matmul_raw(at.data(), upstream.data(), k, m, n);
                    accumulate(&mut grads, *b, k, n, &db);
                }
                Op::AddRowBias(x, bias) => {
                    let cols = upstream.cols();
                    let mut db = vec![0.0; cols];
                    for row in upstream.data().chunks(cols.max(1)) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads, *x, upstream.rows(), cols, upstream.data());
                    accumulate(&mut grads, *bias, 1, cols, &db);
                }
                Op::Add(a, b) => {
                    let (r, c) = upstream.shape();
                    accumulate(&mut grads, *a, r, c, upstream.data());
                    accumulate(&mut grads, *b, r, c, upstream.data());
                }
                Op::Relu(x) => {
                    let xm = self.value(*x);
                    let dx: Vec<f64> = upstream
                        .data()
                        .iter()
                        .zip(xm.data())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, xm.rows(), xm.cols(), &dx);
                }
                Op::Scale(x, factor) => {
                    let dx: Vec<f64> = upstream.data().iter().map(|g| g * factor).collect();
                    let (r, c) = upstream.shape();
                    accumulate(&mut grads, *x, r, c, &dx);
                }
                Op::MulMask(x, mask) => {
                    let dx: Vec<f64> = upstream
                        .data()
                        .iter()
                        .zip(mask.data())
                        .map(|(g, m)| g * m)
                        .collect();
                    let (r, c) = upstream.shape();
                    accumulate(&mut grads, *x, r, c, &dx);
                }
                Op::Reshape(x) => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut grads, *x, r, c, upstream.data());
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let cols = y.cols().max(1);
                    let mut dx = vec![0.0; y.data().len()];
                    for ((dxr, yr), gr) in dx
                        .chunks_mut(cols)
                        .zip(y.data().chunks(cols))
                        .zip(upstream.data().chunks(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in dxr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *x, y.rows(), y.cols(), &dx);
                }
                Op::GroupScores { q, k, group } => {
                    let (qm, km) = (self.value(*q), self.value(*k));
                    let (rows, t, g) = (qm.rows(), qm.cols(), *group);
                    let mut dq = vec![0.0; rows * t];
                    let mut dk = vec![0.0; rows * t];
                    for s in 0..rows / g {
                        for i in 0..g {
                            let ri = s * g + i;
                            for j in 0..g {
                                let rj = s * g + j;
                                let w = upstream.get(ri, j);
                                if w == 0.0 {
                                    continue;
                                }
                                for c in 0..t {
                                    dq[ri * t + c] += w * km.get(rj, c);
                                    dk[rj * t + c] += w * qm.get(ri, c);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *q, rows, t, &dq);
                    accumulate(&mut grads, *k, rows, t, &dk);
                }
                Op::GroupMix { a, v, group } => {
                    let (am, vm) = (self.value(*a), self.value(*v));
                    let (rows, t, g) = (vm.rows(), vm.cols(), *group);
                    let mut da = vec![0.0; rows * g];
                    let mut dv = vec![0.0; rows * t];
                    for s in 0..rows / g {
                        for i in 0..g {
                            let ri = s * g + i;
                            let gi = upstream.row(ri);
                            for j in 0..g {
                                let rj = s * g + j;
                                let vj = vm.row(rj);
                                da[ri * g + j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                                let w = am.get(ri, j);
                                for c in 0..t {
                                    dv[rj * t + c] += w * gi[c];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, rows, g, &da);
                    accumulate(&mut grads, *v, rows, t, &dv);
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let lm = self.value(*logits);
                    let (rows, cols) = lm.shape();
                    let scale = upstream.get(0, 0) / rows as f64;
                    let mut dl = vec![0.0; rows * cols];
                    for (r, &label) in labels.iter().enumerate() {
                        let out = &mut dl[r * cols..(r + 1) * cols];
                        out.copy_from_slice(lm.row(r));
                        softmax_in_place(out);
                        if out[label] < CROSS_ENTROPY_EPSILON {
                            // Clamped branch is constant in the logits.
                            out.iter_mut().for_each(|x| *x = 0.0);
                            continue;
                        }
                        out[label] -= 1.0;
                        out.iter_mut().for_each(|x| *x *= scale);
                    }
                    accumulate(&mut grads, *logits, rows, cols, &dl);
                }
            }
            // Keep gradients of leaves; intermediates are no longer needed.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(upstream);
            }
        }

        if let Some(bad) = grads.iter().flatten().find(|g| !g.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite gradient of shape {:?}",
                bad.shape()
            )));
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], target: Var, rows: usize, cols: usize, delta: &[f64]) {
    match &mut grads[target.0] {
        Some(g) => {
            for (x, d) in g.data_mut().iter_mut().zip(delta) {
                *x += d;
            }
        }
        slot @ None => *slot = Some(Matrix::from_raw(rows, cols, delta.to_vec())),
    }
}
