//! Dense row-major `f64` arrays and the matrix kernels built on them.

use crate::error::{DcaError, Result};
use crate::par::{self, Execution};

/// A dense n-dimensional array of doubles in row-major order.
///
/// A scalar has an empty shape and one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DcaError::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            data: vec![value; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(DcaError::shape("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(DcaError::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![indices.len(), c],
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(DcaError::shape(op, other, &[0, 0])),
    }
}

/// `a · b` for `a: n×k`, `b: k×m`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = require_matrix("matmul", a)?;
    let (k2, m) = require_matrix("matmul", b)?;
    let exec = Execution::for_work(n * k * m);
    matmul_with(exec, a, b).map_err(|_| DcaError::shape("matmul", &[n, k], &[k2, m]))
}

pub fn matmul_with(exec: Execution, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = require_matrix("matmul", a)?;
    let (k2, m) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(DcaError::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.data(), b.data());
    par::for_each_row(exec, &mut out, m, |i, row| {
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    });
    Tensor::new(vec![n, m], out)
}

/// `a · bᵀ` for `a: n×m`, `b: k×m`, giving `n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, m) = require_matrix("matmul_nt", a)?;
    let (k, m2) = require_matrix("matmul_nt", b)?;
    if m != m2 {
        return Err(DcaError::shape("matmul_nt", a.shape(), b.shape()));
    }
    let exec = Execution::for_work(n * k * m);
    let mut out = vec![0.0; n * k];
    let (ad, bd) = (a.data(), b.data());
    par::for_each_row(exec, &mut out, k, |i, row| {
        let arow = &ad[i * m..(i + 1) * m];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &bd[j * m..(j + 1) * m];
            *o = dot(arow, brow);
        }
    });
    Tensor::new(vec![n, k], out)
}

/// `aᵀ · b` for `a: n×k`, `b: n×m`, giving `k×m`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = require_matrix("matmul_tn", a)?;
    let (n2, m) = require_matrix("matmul_tn", b)?;
    if n != n2 {
        return Err(DcaError::shape("matmul_tn", a.shape(), b.shape()));
    }
    let exec = Execution::for_work(n * k * m);
    let mut out = vec![0.0; k * m];
    let (ad, bd) = (a.data(), b.data());
    par::for_each_row(exec, &mut out, m, |p, row| {
        for i in 0..n {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[i * m..(i + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    });
    Tensor::new(vec![k, m], out)
}

/// Dot product with four interleaved accumulators so the reduction
/// vectorizes. The summation order is fixed, so results are reproducible.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Euclidean distance between two equally long slices.
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn shape_product_is_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::scalar(3.0).len(), 1);
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let eye = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let x = m(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(matmul(&eye, &x).unwrap(), x);
        let row = m(&[&[1.0, 2.0]]);
        let col = m(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
        let z = Tensor::zeros(&[2, 3]);
        let any = m(&[&[1.0, -2.0], &[3.5, 4.0], &[0.25, 9.0]]);
        assert_eq!(matmul(&z, &any).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_variants_match_explicit_transpose() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = m(&[&[0.5, -1.0, 2.0], &[1.0, 0.0, -3.0]]);
        let bt = m(&[&[0.5, 1.0], &[-1.0, 0.0], &[2.0, -3.0]]);
        assert_eq!(matmul_nt(&a, &b).unwrap(), matmul(&a, &bt).unwrap());
        let at = m(&[&[1.0, 4.0], &[2.0, 5.0], &[3.0, 6.0]]);
        assert_eq!(matmul_tn(&a, &b).unwrap(), matmul(&at, &b).unwrap());
    }

    #[test]
    fn sequential_and_parallel_are_bit_identical() {
        let a = Tensor::new(vec![64, 96], (0..64 * 96).map(|i| (i as f64).sin()).collect()).unwrap();
        let b = Tensor::new(vec![96, 80], (0..96 * 80).map(|i| (i as f64).cos()).collect()).unwrap();
        let s = matmul_with(Execution::Sequential, &a, &b).unwrap();
        let p = matmul_with(Execution::Parallel, &a, &b).unwrap();
        assert_eq!(s, p);
    }
}
