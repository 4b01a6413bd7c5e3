//! Deterministic dense truncated SVD (one-sided Jacobi, `f64` internally).
//!
//! Sign convention: in every column of `u` the entry of largest magnitude is
//! non-negative (ties go to the lowest row index); the matching column of `v`
//! is flipped with it so `u·diag(s)·vᵀ` is unchanged. Singular values come
//! out in descending order, equal values keeping their sweep order.

use crate::scalar::Scalar;
use crate::tensor::{Matrix, TensorError};

const MAX_SWEEPS: usize = 80;
/// Pairs whose normalized inner product is below this are treated as orthogonal.
const ORTHO_TOL: f64 = 1e-15;
/// Singular values below `ZERO_TOL · σ_max` are numerically zero.
const ZERO_TOL: f64 = 1e-13;

/// Rank-`r` singular triplets: `m ≈ u·diag(s)·vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult<T> {
    /// `rows × r`, orthonormal columns.
    pub u: Matrix<T>,
    /// Non-negative, descending.
    pub s: Vec<T>,
    /// `cols × r`, orthonormal columns.
    pub v: Matrix<T>,
    pub rank: usize,
}

impl<T: Scalar> SvdResult<T> {
    /// `u·diag(s)·vᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let (m, n) = (self.u.rows(), self.v.rows());
        Matrix::from_fn(m, n, |i, j| {
            let acc: f64 = (0..self.rank)
                .map(|k| self.u.get(i, k).as_f64() * self.s[k].as_f64() * self.v.get(j, k).as_f64())
                .sum();
            T::from_f64_lossy(acc)
        })
    }
}

/// Column-major `f64` working copy of a matrix.
struct Columns {
    len: usize,
    cols: Vec<Vec<f64>>,
}

impl Columns {
    fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Self {
        let cols = (0..cols)
            .map(|j| (0..rows).map(|i| data[i * cols + j]).collect())
            .collect();
        Self { len: rows, cols }
    }

    fn identity(n: usize) -> Self {
        let cols = (0..n)
            .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { len: n, cols }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (ap, aq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in ap.iter_mut().zip(aq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Thin SVD of a tall (`rows ≥ cols`) matrix. Returns (`u` columns, σ, `v` columns), unsorted.
fn one_sided_jacobi(a: &mut Columns) -> (Vec<f64>, Columns) {
    let n = a.cols.len();
    let mut v = Columns::identity(n);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&a.cols[p], &a.cols[p]);
                let beta = dot(&a.cols[q], &a.cols[q]);
                let gamma = dot(&a.cols[p], &a.cols[q]);
                if gamma == 0.0 || gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a.cols, p, q, c, s);
                rotate(&mut v.cols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma = a.cols.iter().map(|c| dot(c, c).sqrt()).collect();
    (sigma, v)
}

/// Appends unit vectors orthogonal to `basis` until it has `target` columns.
/// Candidates are standard basis vectors, the one with the largest residual first.
fn complete_basis(basis: &mut Vec<Vec<f64>>, len: usize, target: usize) {
    while basis.len() < target {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..len {
            let mut cand = vec![0.0; len];
            cand[e] = 1.0;
            for _ in 0..2 {
                for b in basis.iter() {
                    let d = dot(b, &cand);
                    cand.iter_mut().zip(b).for_each(|(c, bi)| *c -= d * bi);
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if best.as_ref().is_none_or(|(bn, _)| norm > *bn) {
                best = Some((norm, cand));
            }
        }
        let (norm, mut cand) = best.expect("basis cannot be completed in an empty space");
        assert!(norm > 1e-8, "basis already spans the space");
        cand.iter_mut().for_each(|c| *c /= norm);
        basis.push(cand);
    }
}

/// Flips `u_col` (and `v_col`) so its largest-magnitude entry is non-negative.
fn canonical_sign(u_col: &mut [f64], v_col: Option<&mut [f64]>) {
    let mut best = 0usize;
    for (i, x) in u_col.iter().enumerate() {
        if x.abs() > u_col[best].abs() {
            best = i;
        }
    }
    if u_col[best] < 0.0 {
        u_col.iter_mut().for_each(|x| *x = -*x);
        if let Some(v) = v_col {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Full thin decomposition in `f64`: columns of `u` (`rows` long), σ, columns of `v`,
/// sorted and sign-normalized, `min(rows, cols)` triplets.
pub(crate) fn thin_svd_f64(
    rows: usize,
    cols: usize,
    data: &[f64],
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let tall = rows >= cols;
    let mut a = if tall {
        Columns::from_row_major(rows, cols, data)
    } else {
        // Work on the transpose; its columns are our rows.
        let t: Vec<f64> = (0..cols)
            .flat_map(|j| (0..rows).map(move |i| (i, j)))
            .map(|(i, j)| data[i * cols + j])
            .collect();
        Columns::from_row_major(cols, rows, &t)
    };
    let (sigma, right) = one_sided_jacobi(&mut a);
    let k = sigma.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]));
    let smax = order.first().map_or(0.0, |&i| sigma[i]);

    // `left` spans the column space of the working matrix, `right` its row space.
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut values = Vec::with_capacity(k);
    let mut right_sorted = Vec::with_capacity(k);
    for &j in &order {
        let s = sigma[j];
        if s > 0.0 && s > ZERO_TOL * smax {
            left.push(a.cols[j].iter().map(|x| x / s).collect());
            values.push(s);
        } else {
            values.push(0.0);
        }
        right_sorted.push(right.cols[j].clone());
    }
    // Zero singular values sort last, so completed directions line up with them.
    complete_basis(&mut left, a.len, k);

    let (mut u, mut v) = if tall {
        (left, right_sorted)
    } else {
        (right_sorted, left)
    };
    for (uc, vc) in u.iter_mut().zip(v.iter_mut()) {
        canonical_sign(uc, Some(vc));
    }
    (u, values, v)
}

/// Rank-`r` truncated SVD of `m`.
pub fn truncated_svd<T: Scalar>(m: &Matrix<T>, r: usize) -> Result<SvdResult<T>, TensorError> {
    let max = m.rows().min(m.cols());
    if r == 0 || r > max {
        return Err(TensorError::RankOutOfRange { rank: r, max });
    }
    if let Some(pos) = m.data().iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite(pos));
    }
    let data: Vec<f64> = m.data().iter().map(|v| v.as_f64()).collect();
    let (u, s, v) = thin_svd_f64(m.rows(), m.cols(), &data);
    Ok(SvdResult {
        u: columns_to_matrix(&u[..r], m.rows()),
        s: s[..r].iter().map(|&x| T::from_f64_lossy(x)).collect(),
        v: columns_to_matrix(&v[..r], m.cols()),
        rank: r,
    })
}

/// The `r` leading left singular vectors of `m`, for any `r ≤ rows`.
///
/// When `r` exceeds `min(rows, cols)` the basis is completed with
/// deterministic orthonormal directions of the left null space.
pub fn leading_left_singular_vectors<T: Scalar>(
    m: &Matrix<T>,
    r: usize,
) -> Result<Matrix<T>, TensorError> {
    if r == 0 || r > m.rows() {
        return Err(TensorError::RankOutOfRange { rank: r, max: m.rows() });
    }
    if let Some(pos) = m.data().iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite(pos));
    }
    let data: Vec<f64> = m.data().iter().map(|v| v.as_f64()).collect();
    let (mut u, _, _) = thin_svd_f64(m.rows(), m.cols(), &data);
    u.truncate(r);
    if u.len() < r {
        let have = u.len();
        complete_basis(&mut u, m.rows(), r);
        for col in &mut u[have..] {
            canonical_sign(col, None);
        }
    }
    Ok(columns_to_matrix(&u, m.rows()))
}

fn columns_to_matrix<T: Scalar>(cols: &[Vec<f64>], rows: usize) -> Matrix<T> {
    Matrix::from_fn(rows, cols.len(), |i, j| T::from_f64_lossy(cols[j][i]))
}

/// `‖QᵀQ − I‖_F` for a matrix with (supposedly) orthonormal columns.
pub fn orthonormality_defect<T: Scalar>(q: &Matrix<T>) -> f64 {
    let k = q.cols();
    let mut acc = 0.0;
    for a in 0..k {
        for b in 0..k {
            let d: f64 = (0..q.rows())
                .map(|i| q.get(i, a).as_f64() * q.get(i, b).as_f64())
                .sum();
            let target = if a == b { 1.0 } else { 0.0 };
            acc += (d - target).powi(2);
        }
    }
    acc.sqrt()
}
