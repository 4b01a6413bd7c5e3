use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    /// Builds a matrix, rejecting zero extents, length mismatches and non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::ZeroExtent(vec![rows, cols]));
        }
        if rows * cols != data.len() {
            return Err(TensorError::ShapeMismatch {
                shape: vec![rows, cols],
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(pos));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix extents must be positive");
        Self::from_raw(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(rows > 0 && cols > 0, "matrix extents must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::DimensionMismatch(
                "ragged rows in matrix literal".into(),
            ));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn diag(values: &[T]) -> Self {
        let n = values.len();
        Self::from_fn(n, n, |i, j| if i == j { values[i] } else { T::zero() })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Matrix product with `f64` accumulation.
    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Self, TensorError> {
        if self.cols != rhs.rows {
            return Err(TensorError::DimensionMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = vec![T::zero(); self.rows * rhs.cols];
        let mut acc = vec![0.0f64; rhs.cols];
        for i in 0..self.rows {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (k, &a) in self.row(i).iter().enumerate() {
                let a = a.as_f64();
                for (dst, &b) in acc.iter_mut().zip(rhs.row(k)) {
                    *dst += a * b.as_f64();
                }
            }
            for (dst, &a) in out[i * rhs.cols..(i + 1) * rhs.cols].iter_mut().zip(&acc) {
                *dst = T::from_f64_lossy(a);
            }
        }
        Ok(Self::from_raw(self.rows, rhs.cols, out))
    }

    /// `self · x` in `f64`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(x)
                    .map(|(&a, &b)| a.as_f64() * b)
                    .sum()
            })
            .collect()
    }

    /// `selfᵀ · x` in `f64`.
    pub fn matvec_transposed(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "matvec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a.as_f64() * xi;
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
        )
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    /// `‖self − other‖_F`.
    pub fn distance(&self, other: &Matrix<T>) -> f64 {
        assert_eq!(self.shape(), other.shape(), "distance shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// `‖self − other‖_F / ‖other‖_F` (absolute distance when `other` is zero).
    pub fn relative_error(&self, reference: &Matrix<T>) -> f64 {
        let d = self.distance(reference);
        let n = reference.frobenius_norm();
        if n > 0.0 {
            d / n
        } else {
            d
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Rows gathered by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::from_raw(indices.len(), self.cols, data)
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Tensor::from_raw(vec![self.rows, self.cols], self.data)
    }

    pub fn from_tensor(t: Tensor<T>) -> Result<Self, TensorError> {
        if t.rank() != 2 {
            return Err(TensorError::DimensionMismatch(format!(
                "expected a rank-2 tensor, got shape {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        Ok(Self::from_raw(r, c, t.into_data()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
