//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! append nodes in execution order, so the node list is already a
//! topological order; [`Tape::backward`] walks it in reverse and applies
//! each node's vector-Jacobian product.
//!
//! Leaves are either trainable (`Tape::param`) or constant
//! (`Tape::constant`). Gradients are only propagated through nodes that
//! depend on at least one trainable leaf.
//!
//! ```
//! use dca_core::autodiff::Tape;
//! use dca_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod adam;

pub use adam::{AdamConfig, AdamState};

use crate::error::{DcaError, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm statistics observed in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// How batch normalization obtains its statistics.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a> {
    /// Normalize with the current batch (biased variance).
    Batch,
    /// Normalize with fixed running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    GatherRows { x: Var, rows: Vec<usize> },
    RowDistance { a: Var, b: Var },
    GroupMeans { x: Var, groups: Vec<Vec<usize>> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward root with respect to `v`.
    ///
    /// `None` for nodes that do not require a gradient or before
    /// [`Tape::backward`] has run.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    /// Adds the vector `bias` to every row of the matrix `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.shape().len() != 2 || bv.len() != xv.cols() {
            return Err(DcaError::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        let b = bv.data().to_vec();
        for r in 0..out.rows() {
            for (o, bj) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bj;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, rg, Op::AddRow(x, bias)))
    }

    fn zip_same(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(DcaError::shape(op_name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, rg, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(value, rg, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v < 0.0 { 0.0 } else { v });
        let rg = self.rg(x);
        self.push(value, rg, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(value, rg, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, rg, Op::Sigmoid(x))
    }

    /// Natural logarithm; inputs are expected to be positive.
    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        let rg = self.rg(x);
        self.push(value, rg, Op::Log(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(value, rg, Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(x);
        self.push(value, rg, Op::Mean(x))
    }

    /// Per-column batch normalization of an `n×d` matrix followed by the
    /// affine map `γ·x̂ + β`.
    ///
    /// In [`NormStats::Batch`] mode the returned statistics are the batch
    /// mean and biased variance, for the caller's running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let (n, d) = match xv.shape() {
            [n, d] => (*n, *d),
            other => return Err(DcaError::shape("batch_norm", other, &[0, 0])),
        };
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != d || bv.len() != d {
            return Err(DcaError::shape("batch_norm", xv.shape(), gv.shape()));
        }
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                if n < 2 {
                    return Err(DcaError::DegenerateBatch(n));
                }
                let mut mean = vec![0.0; d];
                for r in 0..n {
                    for (m, x) in mean.iter_mut().zip(xv.row(r)) {
                        *m += x;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for r in 0..n {
                    for ((v, x), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                        *v += (x - m) * (x - m);
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != d || var.len() != d {
                    return Err(DcaError::shape("batch_norm", &[d], &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        let (g, b) = (gv.data(), bv.data());
        for r in 0..n {
            let row = xv.row(r);
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            value,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            },
        );
        Ok((v, batch.then_some(BatchStats { mean, var })))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(DcaError::shape("gather_rows", xv.shape(), &[0, 0]));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(DcaError::Contract(format!(
                "gather_rows: row {bad} out of range for {} rows",
                xv.rows()
            )));
        }
        let value = xv.select_rows(rows);
        let rg = self.rg(x);
        Ok(self.push(
            value,
            rg,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Euclidean distance between corresponding rows of `a` and `b`.
    ///
    /// Matrices `n×d` give a length-`n` vector; vectors give a scalar. The
    /// gradient at coincident rows is zero.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.shape().len() > 2 {
            return Err(DcaError::shape("euclidean_distance", av.shape(), bv.shape()));
        }
        let n = if av.shape().len() == 2 { av.rows() } else { 1 };
        let dists: Vec<f64> = (0..n).map(|r| tensor::l2_distance(av.row(r), bv.row(r))).collect();
        let value = if av.shape().len() == 2 {
            Tensor::vector(dists)
        } else {
            Tensor::scalar(dists[0])
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::RowDistance { a, b }))
    }

    /// Euclidean distance between two vectors, as a scalar.
    pub fn euclidean_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 1 || av.shape() != bv.shape() {
            return Err(DcaError::shape("euclidean_distance", av.shape(), bv.shape()));
        }
        self.row_distance(a, b)
    }

    /// Mean of each row group; output row `g` is the mean of `groups[g]`.
    pub fn group_means(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(DcaError::shape("group_means", xv.shape(), &[0, 0]));
        }
        let d = xv.cols();
        let mut out = vec![0.0; groups.len() * d];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(DcaError::Contract(format!("group_means: group {g} is empty")));
            }
            let dst = &mut out[g * d..(g + 1) * d];
            for &r in members {
                if r >= xv.rows() {
                    return Err(DcaError::Contract(format!("group_means: row {r} out of range")));
                }
                for (o, v) in dst.iter_mut().zip(xv.row(r)) {
                    *o += v;
                }
            }
            let k = members.len() as f64;
            dst.iter_mut().for_each(|o| *o /= k);
        }
        let value = Tensor::new(vec![groups.len(), d], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            rg,
            Op::GroupMeans {
                x,
                groups: groups.to_vec(),
            },
        ))
    }

    /// Smallest distance from any relu or clamp input to its kink.
    ///
    /// Finite-difference checks use this to reject configurations that sit
    /// on a nondifferentiable point.
    pub fn kink_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        best = best.min(v.abs());
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for &v in self.nodes[x.0].value.data() {
                        best = best.min((v - lo).abs()).min((v - hi).abs());
                    }
                }
                _ => {}
            }
        }
        best
    }

    /// Populates gradients of the scalar `root` with respect to every node
    /// that requires one. Nodes the root does not depend on get zeros.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(DcaError::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(root) {
            grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        }
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, up: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, tensor::matmul_nt(up, val(b))?);
                }
                if self.rg(b) {
                    accumulate(grads, b, tensor::matmul_tn(val(a), up)?);
                }
            }
            &Op::AddRow(x, bias) => {
                if self.rg(x) {
                    accumulate(grads, x, up.clone());
                }
                if self.rg(bias) {
                    let d = up.cols();
                    let mut gb = vec![0.0; d];
                    for r in 0..up.rows() {
                        for (g, u) in gb.iter_mut().zip(up.row(r)) {
                            *g += u;
                        }
                    }
                    accumulate(grads, bias, Tensor::new(val(bias).shape().to_vec(), gb)?);
                }
            }
            &Op::Add(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, up.clone());
                }
                if self.rg(b) {
                    accumulate(grads, b, up.clone());
                }
            }
            &Op::Sub(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, up.clone());
                }
                if self.rg(b) {
                    accumulate(grads, b, up.map(|u| -u));
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, zip(up, val(b), |u, y| u * y));
                }
                if self.rg(b) {
                    accumulate(grads, b, zip(up, val(a), |u, x| u * x));
                }
            }
            &Op::Scale(x, c) => accumulate(grads, x, up.map(|u| u * c)),
            &Op::AddScalar(x) => accumulate(grads, x, up.clone()),
            &Op::Relu(x) => {
                accumulate(grads, x, zip(up, val(x), |u, x| if x > 0.0 { u } else { 0.0 }));
            }
            &Op::Tanh(x) => {
                accumulate(grads, x, zip(up, &node.value, |u, t| u * (1.0 - t * t)));
            }
            &Op::Sigmoid(x) => {
                accumulate(grads, x, zip(up, &node.value, |u, s| u * s * (1.0 - s)));
            }
            &Op::Log(x) => accumulate(grads, x, zip(up, val(x), |u, x| u / x)),
            &Op::Clamp { x, lo, hi } => {
                accumulate(
                    grads,
                    x,
                    zip(up, val(x), |u, x| if x >= lo && x <= hi { u } else { 0.0 }),
                );
            }
            &Op::Sum(x) => accumulate(grads, x, Tensor::full(val(x).shape(), up.item())),
            &Op::Mean(x) => {
                let n = val(x).len() as f64;
                accumulate(grads, x, Tensor::full(val(x).shape(), up.item() / n));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let (n, d) = (up.rows(), up.cols());
                let g = val(*gamma).data();
                let u = up.data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..n {
                    for j in 0..d {
                        dgamma[j] += u[r * d + j] * xhat[r * d + j];
                        dbeta[j] += u[r * d + j];
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * d];
                    if *batch {
                        // dx = inv_std/n · (n·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)), with dx̂ = up·γ
                        let nf = n as f64;
                        for j in 0..d {
                            let sum_dxhat = dbeta[j] * g[j];
                            let sum_dxhat_xhat = dgamma[j] * g[j];
                            for r in 0..n {
                                let dxhat = u[r * d + j] * g[j];
                                dx[r * d + j] = inv_std[j] / nf
                                    * (nf * dxhat - sum_dxhat - xhat[r * d + j] * sum_dxhat_xhat);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for j in 0..d {
                                dx[r * d + j] = u[r * d + j] * g[j] * inv_std[j];
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(vec![n, d], dx)?);
                }
                if self.rg(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(val(*gamma).shape().to_vec(), dgamma)?);
                }
                if self.rg(*beta) {
                    accumulate(grads, *beta, Tensor::new(val(*beta).shape().to_vec(), dbeta)?);
                }
            }
            Op::GatherRows { x, rows } => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.shape());
                for (i, &r) in rows.iter().enumerate() {
                    for (g, u) in gx.row_mut(r).iter_mut().zip(up.row(i)) {
                        *g += u;
                    }
                }
                accumulate(grads, *x, gx);
            }
            &Op::RowDistance { a, b } => {
                let (av, bv) = (val(a), val(b));
                let n = node.value.len();
                let mut ga = Tensor::zeros(av.shape());
                for r in 0..n {
                    let dist = node.value.data()[r];
                    if dist == 0.0 {
                        continue;
                    }
                    let coef = up.data()[r] / dist;
                    let (ar, br) = (av.row(r), bv.row(r));
                    for ((g, x), y) in ga.row_mut(r).iter_mut().zip(ar).zip(br) {
                        *g = coef * (x - y);
                    }
                }
                if self.rg(b) {
                    accumulate(grads, b, ga.map(|g| -g));
                }
                if self.rg(a) {
                    accumulate(grads, a, ga);
                }
            }
            Op::GroupMeans { x, groups } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (g, members) in groups.iter().enumerate() {
                    let k = members.len() as f64;
                    for &r in members {
                        for (dst, u) in gx.row_mut(r).iter_mut().zip(up.row(g)) {
                            *dst += u / k;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip of equal shapes")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests;
