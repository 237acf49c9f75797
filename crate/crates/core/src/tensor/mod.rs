//! Dense f64 tensors, reverse-mode autodiff and the AdamW optimizer.
//!
//! A [`Tensor`] is an immutable value: every kernel returns a fresh tensor and
//! the backing buffer is reference counted, so clones are cheap and tensors can
//! be shared across threads. Kernels refuse to produce NaN or infinity.

pub mod layout;
mod optim;
mod tape;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use optim::AdamW;
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{len} elements cannot fill shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("axis {axis} out of range for rank {rank}")]
    BadAxis { axis: usize, rank: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{0} needs at least one input")]
    Empty(&'static str),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("data", &self.data).finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if layout::numel(&shape) != data.len() {
            return Err(TensorError::BadLength { shape, len: data.len() });
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(layout::numel(&shape), data.len());
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; layout::numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Copy-on-write access to the elements.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if layout::numel(shape) != self.len() {
            return Err(TensorError::BadLength { shape: shape.to_vec(), len: self.len() });
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    fn checked(self, op: &'static str) -> Result<Tensor> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect()).checked(op)
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl FnMut(f64, f64) -> f64) -> Result<Tensor> {
        let (shape, data) = layout::broadcast_zip(op, &self.data, &self.shape, &other.data, &other.shape, f)?;
        Tensor::from_parts(shape, data).checked(op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.map("scale", |v| v * c)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.map("relu", |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.map("exp", f64::exp)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.map("tanh", f64::tanh)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.map("sqrt", f64::sqrt)
    }

    /// Tanh-form GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Result<Tensor> {
        self.map("gelu", gelu_scalar)
    }

    /// Standard matrix product. Each output element accumulates its products
    /// in ascending inner index, starting from the first product; the
    /// element-wise ciphertext lowering reproduces this order exactly.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = layout::expect_matrix("matmul", &self.shape)?;
        let (k2, n) = layout::expect_matrix("matmul", &other.shape)?;
        if k != k2 || k == 0 {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0.0; m * n];
        // Four output rows share each pass over a row of `b`. Every output
        // element still accumulates over `j` in ascending order.
        let mut blocks = out.chunks_exact_mut(4 * n);
        let mut i = 0;
        for block in &mut blocks {
            let (r0, rest) = block.split_at_mut(n);
            let (r1, rest) = rest.split_at_mut(n);
            let (r2, r3) = rest.split_at_mut(n);
            let ar = |r: usize, j: usize| a[(i + r) * k + j];
            let (a0, a1, a2, a3) = (ar(0, 0), ar(1, 0), ar(2, 0), ar(3, 0));
            let b0 = &b[..n];
            for ((((o0, o1), o2), o3), &bv) in r0.iter_mut().zip(r1.iter_mut()).zip(r2.iter_mut()).zip(r3.iter_mut()).zip(b0) {
                *o0 = a0 * bv;
                *o1 = a1 * bv;
                *o2 = a2 * bv;
                *o3 = a3 * bv;
            }
            for j in 1..k {
                let (a0, a1, a2, a3) = (ar(0, j), ar(1, j), ar(2, j), ar(3, j));
                let brow = &b[j * n..(j + 1) * n];
                for ((((o0, o1), o2), o3), &bv) in r0.iter_mut().zip(r1.iter_mut()).zip(r2.iter_mut()).zip(r3.iter_mut()).zip(brow) {
                    *o0 += a0 * bv;
                    *o1 += a1 * bv;
                    *o2 += a2 * bv;
                    *o3 += a3 * bv;
                }
            }
            i += 4;
        }
        for (r, row) in blocks.into_remainder().chunks_exact_mut(n).enumerate() {
            let i = i + r;
            let a0 = a[i * k];
            for (o, &bv) in row.iter_mut().zip(&b[0..n]) {
                *o = a0 * bv;
            }
            for j in 1..k {
                let aij = a[i * k + j];
                let brow = &b[j * n..(j + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aij * bv;
                }
            }
        }
        Tensor::from_parts(vec![m, n], out).checked("matmul")
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (shape, data) = layout::transpose2(&self.data, &self.shape)?;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let (shape, data) = layout::reduce_axis(&self.data, &self.shape, axis, keepdim, |a, b| a + b)?;
        Tensor::from_parts(shape, data).checked("sum")
    }

    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let (shape, data) = layout::reduce_axis(&self.data, &self.shape, axis, keepdim, f64::max)?;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let max = self.max_axis(axis, true)?;
        let e = self.sub(&max)?.exp()?;
        let s = e.sum_axis(axis, true)?;
        e.div(&s)
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (shape, data) = layout::slice_rows(&self.data, &self.shape, start, end)?;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (shape, data) = layout::slice_cols(&self.data, &self.shape, start, end)?;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let views: Vec<(&[usize], &[f64])> = parts.iter().map(|t| (t.shape(), t.data())).collect();
        let (shape, data) = layout::concat_rows(&views)?;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let views: Vec<(&[usize], &[f64])> = parts.iter().map(|t| (t.shape(), t.data())).collect();
        let (shape, data) = layout::concat_cols(&views)?;
        Ok(Tensor::from_parts(shape, data))
    }

    /// Row lookup into a `[rows x cols]` table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (r, c) = layout::expect_matrix("gather_rows", &self.shape)?;
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(TensorError::IndexOutOfRange { index: id, len: r });
            }
            out.extend_from_slice(&self.data[id * c..(id + 1) * c]);
        }
        Ok(Tensor::from_parts(vec![ids.len(), c], out))
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch { op: "max_abs_diff", lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        Ok(self.data.iter().zip(other.data.iter()).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn mse(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch { op: "mse", lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        let n = self.len().max(1) as f64;
        Ok(self.data.iter().zip(other.data.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
    }
}

pub(crate) const GELU_COEFF: f64 = 0.044715;
pub(crate) const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * (x * x * x))).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn add_and_mul_examples() {
        assert_eq!(v(&[1.0, 2.0]).add(&v(&[3.0, 4.0])).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(v(&[1.0, 2.0]).mul(&v(&[3.0, 4.0])).unwrap().data(), &[3.0, 8.0]);
        let a = v(&[0.3, -1.7, 2.5]);
        assert_eq!(a.add(&Tensor::zeros(&[3])).unwrap(), a);
        assert_eq!(a.mul(&Tensor::ones(&[3])).unwrap(), a);
    }

    #[test]
    fn broadcast_mismatch_is_an_error() {
        let a = Tensor::zeros(&[3, 2]);
        let b = Tensor::zeros(&[3]);
        assert!(matches!(a.add(&b), Err(TensorError::ShapeMismatch { .. })));
        assert!(matches!(a.mul(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_examples() {
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&m).unwrap(), m);
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn relu_examples() {
        let r = v(&[-1.0, 0.0, 2.0]).relu().unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(r.relu().unwrap(), r);
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(v(&[0.0]).gelu().unwrap().item(), 0.0);
        assert!((v(&[10.0]).gelu().unwrap().item() - 10.0).abs() < 1e-4);
        // dense sweep on [-6, 6]
        let xs: Vec<f64> = (0..=12_000).map(|i| -6.0 + i as f64 * 1e-3).collect();
        let t = Tensor::vector(xs);
        let gap = t.gelu().unwrap().max_abs_diff(&t.relu().unwrap()).unwrap();
        assert!(gap < 0.5, "gap {gap}");
    }

    #[test]
    fn softmax_examples() {
        let s = v(&[0.0, 0.0, 0.0]).softmax(0).unwrap();
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        // direct evaluation of exp(x_i) / sum_j exp(x_j)
        let x = [1.0f64, 2.0, 3.0];
        let denom: f64 = x.iter().map(|v| v.exp()).sum();
        let s = v(&x).softmax(0).unwrap();
        for (p, xi) in s.data().iter().zip(x) {
            assert!((p - xi.exp() / denom).abs() < 1e-15);
        }
        assert!((s.data()[0] - 0.0900).abs() < 1e-4);
        assert!((s.data()[1] - 0.2447).abs() < 1e-4);
        assert!((s.data()[2] - 0.6652).abs() < 1e-4);
        let shifted = v(&[1.0 + 7.5, 2.0 + 7.5, 3.0 + 7.5]).softmax(0).unwrap();
        assert!(shifted.max_abs_diff(&s).unwrap() < 1e-15);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let big = v(&[1e300]);
        assert!(matches!(big.mul(&big), Err(TensorError::NonFinite { op: "mul" })));
        assert!(matches!(v(&[1.0]).div(&v(&[0.0])), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn gather_and_slices() {
        let t = Tensor::matrix(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(t.gather_rows(&[2, 0]).unwrap().data(), &[4.0, 5.0, 0.0, 1.0]);
        assert!(t.gather_rows(&[3]).is_err());
        assert_eq!(t.slice_rows(1, 2).unwrap().data(), &[2.0, 3.0]);
        assert_eq!(t.transpose().unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn bad_length_rejected() {
        assert!(matches!(Tensor::new(vec![2, 2], vec![1.0; 3]), Err(TensorError::BadLength { .. })));
    }
}
