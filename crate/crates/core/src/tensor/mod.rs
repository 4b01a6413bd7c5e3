//! Dense row-major tensors, mode-n unfolding and mode-n products.
//!
//! Unfolding follows the Kolda–Bader convention: the mode-`n` unfolding has
//! `I_n` rows, and element `(i₁, …, i_d)` lands in column
//! `Σ_{k≠n} i_k · Π_{m<k, m≠n} I_m`, i.e. the lowest remaining mode varies
//! fastest along the columns.

mod matrix;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use matrix::Matrix;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {expected} elements, got {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("every extent must be positive, got shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("mode {mode} out of range for a rank-{rank} tensor")]
    ModeOutOfRange { mode: usize, rank: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("rank {rank} outside 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
}

/// Dense tensor; the last index varies fastest in `data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(pos));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "tensor extents must be positive"
        );
        Self::from_raw(shape.to_vec(), vec![T::zero(); shape.iter().product()])
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for v in t.data.iter_mut() {
            *v = f(&idx);
            increment(&mut idx, shape);
        }
        t
    }

    /// Stacks equally shaped matrices along a trailing third mode: `Z[:, :, s] = slices[s]`.
    pub fn stack_slices(slices: &[Matrix<T>]) -> Result<Self, TensorError> {
        let first = slices
            .first()
            .ok_or_else(|| TensorError::DimensionMismatch("no slices to stack".into()))?;
        let (r, c) = first.shape();
        if slices.iter().any(|m| m.shape() != (r, c)) {
            return Err(TensorError::DimensionMismatch(
                "stacked slices differ in shape".into(),
            ));
        }
        let n = slices.len();
        Ok(Self::from_fn(&[r, c, n], |idx| slices[idx[2]].get(idx[0], idx[1])))
    }

    /// Frontal slice `Z[:, :, k]` of a rank-3 tensor.
    pub fn frontal_slice(&self, k: usize) -> Matrix<T> {
        assert_eq!(self.rank(), 3, "frontal_slice needs a rank-3 tensor");
        let (r, c, n) = (self.shape[0], self.shape[1], self.shape[2]);
        assert!(k < n, "slice index out of range");
        Matrix::from_fn(r, c, |i, j| self.data[(i * c + j) * n + k])
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.rank(), "index rank mismatch");
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                assert!(i < n, "index out of bounds");
                acc * n + i
            })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_raw(
            self.shape.clone(),
            self.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
        )
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "distance shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// `‖self − reference‖_F / ‖reference‖_F`, or the absolute distance for a zero reference.
    pub fn relative_error(&self, reference: &Tensor<T>) -> f64 {
        let d = self.distance(reference);
        let n = reference.frobenius_norm();
        if n > 0.0 {
            d / n
        } else {
            d
        }
    }
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return;
        }
        idx[k] = 0;
    }
}

/// Column strides of the mode-`mode` unfolding.
fn unfold_strides(shape: &[usize], mode: usize) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (k, &n) in shape.iter().enumerate() {
        if k != mode {
            strides[k] = acc;
            acc *= n;
        }
    }
    strides
}

/// Mode-`mode` unfolding (Kolda–Bader column order).
pub fn unfold<T: Scalar>(t: &Tensor<T>, mode: usize) -> Result<Matrix<T>, TensorError> {
    let rank = t.rank();
    if mode >= rank {
        return Err(TensorError::ModeOutOfRange { mode, rank });
    }
    let shape = t.shape();
    let rows = shape[mode];
    let cols = t.len() / rows;
    let strides = unfold_strides(shape, mode);
    let mut out = vec![T::zero(); t.len()];
    let mut idx = vec![0usize; rank];
    for &v in t.data() {
        let col: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out[idx[mode] * cols + col] = v;
        increment(&mut idx, shape);
    }
    Ok(Matrix::from_raw(rows, cols, out))
}

/// Inverse of [`unfold`].
pub fn fold<T: Scalar>(m: &Matrix<T>, mode: usize, shape: &[usize]) -> Result<Tensor<T>, TensorError> {
    let rank = shape.len();
    if mode >= rank {
        return Err(TensorError::ModeOutOfRange { mode, rank });
    }
    if shape.contains(&0) {
        return Err(TensorError::ZeroExtent(shape.to_vec()));
    }
    let total: usize = shape.iter().product();
    if m.rows() != shape[mode] || m.rows() * m.cols() != total {
        return Err(TensorError::DimensionMismatch(format!(
            "cannot fold a {}x{} matrix into shape {:?} along mode {}",
            m.rows(),
            m.cols(),
            shape,
            mode
        )));
    }
    let strides = unfold_strides(shape, mode);
    let cols = m.cols();
    let mut data = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let col: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        data.push(m.data()[idx[mode] * cols + col]);
        increment(&mut idx, shape);
    }
    Ok(Tensor::from_raw(shape.to_vec(), data))
}

/// Mode-`mode` product `t ×_mode m` where `m` is `J × I_mode`; accumulates in `f64`.
pub fn mode_product<T: Scalar>(
    t: &Tensor<T>,
    m: &Matrix<T>,
    mode: usize,
) -> Result<Tensor<T>, TensorError> {
    let rank = t.rank();
    if mode >= rank {
        return Err(TensorError::ModeOutOfRange { mode, rank });
    }
    let shape = t.shape();
    if m.cols() != shape[mode] {
        return Err(TensorError::DimensionMismatch(format!(
            "mode-{} product needs {} columns, matrix has {}",
            mode,
            shape[mode],
            m.cols()
        )));
    }
    let outer: usize = shape[..mode].iter().product();
    let inner: usize = shape[mode + 1..].iter().product();
    let (j_ext, i_ext) = (m.rows(), m.cols());
    let mut out = vec![T::zero(); outer * j_ext * inner];
    let mut acc = vec![0.0f64; inner];
    let src = t.data();
    for a in 0..outer {
        for j in 0..j_ext {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (i, &w) in m.row(j).iter().enumerate() {
                let w = w.as_f64();
                let base = (a * i_ext + i) * inner;
                for (dst, &x) in acc.iter_mut().zip(&src[base..base + inner]) {
                    *dst += w * x.as_f64();
                }
            }
            let base = (a * j_ext + j) * inner;
            for (dst, &v) in out[base..base + inner].iter_mut().zip(&acc) {
                *dst = T::from_f64_lossy(v);
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[mode] = j_ext;
    Ok(Tensor::from_raw(new_shape, out))
}
