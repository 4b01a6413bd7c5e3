//! Third-order Tucker decomposition: HOSVD initialization and HOOI refinement.
//!
//! All iterations run in `f64`; the returned pack is cast back to the input
//! scalar type.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::svd::leading_left_singular_vectors;
use crate::tensor::{mode_product, unfold, Matrix, Tensor, TensorError};

pub const DEFAULT_MAX_ITERS: usize = 20;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Multilinear ranks `(R₁, R₂, R₃)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TuckerRanks {
    pub r1: usize,
    pub r2: usize,
    pub r3: usize,
}

impl TuckerRanks {
    pub const fn new(r1: usize, r2: usize, r3: usize) -> Self {
        Self { r1, r2, r3 }
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.r1, self.r2, self.r3]
    }

    /// Component-wise `min(rank, extent)`.
    pub fn clamped_to(&self, extents: [usize; 3]) -> Self {
        Self::new(
            self.r1.min(extents[0]),
            self.r2.min(extents[1]),
            self.r3.min(extents[2]),
        )
    }

    pub fn validate(&self, extents: [usize; 3]) -> Result<(), TensorError> {
        for (r, e) in self.as_array().into_iter().zip(extents) {
            if r == 0 || r > e {
                return Err(TensorError::RankOutOfRange { rank: r, max: e });
            }
        }
        Ok(())
    }
}

impl Default for TuckerRanks {
    fn default() -> Self {
        Self::new(256, 512, 8)
    }
}

impl fmt::Display for TuckerRanks {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.r1, self.r2, self.r3)
    }
}

impl FromStr for TuckerRanks {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("invalid ranks {s:?}: {e}"))?;
        match parts.as_slice() {
            &[a, b, c] if a > 0 && b > 0 && c > 0 => Ok(Self::new(a, b, c)),
            _ => Err(format!("ranks must be three positive integers, got {s:?}")),
        }
    }
}

/// Core tensor plus one factor matrix per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TuckerPack<T> {
    /// `R₁ × R₂ × R₃`.
    pub core: Tensor<T>,
    /// `d_i × R₁`.
    pub u1: Matrix<T>,
    /// `d_o × R₂`.
    pub u2: Matrix<T>,
    /// `n × R₃`.
    pub u3: Matrix<T>,
    pub ranks: TuckerRanks,
}

impl<T: Scalar> TuckerPack<T> {
    /// Assembles a pack after checking that all shapes agree.
    pub fn new(core: Tensor<T>, u1: Matrix<T>, u2: Matrix<T>, u3: Matrix<T>) -> Result<Self, TensorError> {
        if core.rank() != 3 {
            return Err(TensorError::DimensionMismatch(format!(
                "core must be rank 3, got shape {:?}",
                core.shape()
            )));
        }
        let ranks = TuckerRanks::new(core.shape()[0], core.shape()[1], core.shape()[2]);
        for (name, u, r) in [("u1", &u1, ranks.r1), ("u2", &u2, ranks.r2), ("u3", &u3, ranks.r3)] {
            if u.cols() != r || u.rows() < r {
                return Err(TensorError::DimensionMismatch(format!(
                    "{name} is {}x{} but the core needs {r} columns with at least as many rows",
                    u.rows(),
                    u.cols()
                )));
            }
        }
        Ok(Self { core, u1, u2, u3, ranks })
    }

    /// `(d_i, d_o, n)` of the tensor this pack reconstructs.
    pub fn extents(&self) -> [usize; 3] {
        [self.u1.rows(), self.u2.rows(), self.u3.rows()]
    }

    pub fn param_count(&self) -> usize {
        pack_param_count(self.extents(), self.ranks)
    }

    pub fn cast<U: Scalar>(&self) -> TuckerPack<U> {
        TuckerPack {
            core: self.core.cast(),
            u1: self.u1.cast(),
            u2: self.u2.cast(),
            u3: self.u3.cast(),
            ranks: self.ranks,
        }
    }
}

/// `R₁R₂R₃ + d_iR₁ + d_oR₂ + nR₃`.
pub fn pack_param_count(extents: [usize; 3], ranks: TuckerRanks) -> usize {
    ranks.r1 * ranks.r2 * ranks.r3
        + extents[0] * ranks.r1
        + extents[1] * ranks.r2
        + extents[2] * ranks.r3
}

fn extents3<T: Scalar>(z: &Tensor<T>) -> Result<[usize; 3], TensorError> {
    match z.shape() {
        &[a, b, c] => Ok([a, b, c]),
        s => Err(TensorError::DimensionMismatch(format!(
            "Tucker decomposition needs a rank-3 tensor, got shape {s:?}"
        ))),
    }
}

/// `core ×₁ u1 ×₂ u2 ×₃ u3`.
pub fn reconstruct<T: Scalar>(pack: &TuckerPack<T>) -> Tensor<T> {
    let t = mode_product(&pack.core, &pack.u1, 0).expect("pack shapes validated");
    let t = mode_product(&t, &pack.u2, 1).expect("pack shapes validated");
    mode_product(&t, &pack.u3, 2).expect("pack shapes validated")
}

fn project_core(z: &Tensor<f64>, u: [&Matrix<f64>; 3]) -> Tensor<f64> {
    let mut t = z.clone();
    for (mode, f) in u.into_iter().enumerate() {
        t = mode_product(&t, &f.transpose(), mode).expect("factor shapes match");
    }
    t
}

struct State {
    u: [Matrix<f64>; 3],
    core: Tensor<f64>,
    error: f64,
}

impl State {
    fn new(z: &Tensor<f64>, u: [Matrix<f64>; 3]) -> Self {
        let core = project_core(z, [&u[0], &u[1], &u[2]]);
        let pack = TuckerPack {
            core: core.clone(),
            u1: u[0].clone(),
            u2: u[1].clone(),
            u3: u[2].clone(),
            ranks: TuckerRanks::new(u[0].cols(), u[1].cols(), u[2].cols()),
        };
        let error = reconstruct(&pack).relative_error(z);
        Self { u, core, error }
    }

    fn into_pack<T: Scalar>(self) -> TuckerPack<T> {
        let [u1, u2, u3] = self.u;
        let ranks = TuckerRanks::new(u1.cols(), u2.cols(), u3.cols());
        TuckerPack {
            core: self.core.cast(),
            u1: u1.cast(),
            u2: u2.cast(),
            u3: u3.cast(),
            ranks,
        }
    }
}

fn hosvd_state(z: &Tensor<f64>, ranks: TuckerRanks) -> Result<State, TensorError> {
    let r = ranks.as_array();
    let mut factors = Vec::with_capacity(3);
    for mode in 0..3 {
        factors.push(leading_left_singular_vectors(&unfold(z, mode)?, r[mode])?);
    }
    let u: [Matrix<f64>; 3] = factors.try_into().expect("three factors");
    Ok(State::new(z, u))
}

/// Truncated higher-order SVD: each factor holds the leading left singular
/// vectors of the corresponding unfolding.
pub fn tucker_hosvd<T: Scalar>(z: &Tensor<T>, ranks: TuckerRanks) -> Result<TuckerPack<T>, TensorError> {
    ranks.validate(extents3(z)?)?;
    Ok(hosvd_state(&z.cast(), ranks)?.into_pack())
}

/// HOOI (orthogonal ALS) started from HOSVD.
pub fn tucker_hooi<T: Scalar>(
    z: &Tensor<T>,
    ranks: TuckerRanks,
    max_iters: usize,
    tol: f64,
) -> Result<TuckerPack<T>, TensorError> {
    tucker_hooi_traced(z, ranks, max_iters, tol).map(|(pack, _)| pack)
}

/// As [`tucker_hooi`], also returning the relative reconstruction error of
/// the HOSVD start followed by every accepted iteration.
pub fn tucker_hooi_traced<T: Scalar>(
    z: &Tensor<T>,
    ranks: TuckerRanks,
    max_iters: usize,
    tol: f64,
) -> Result<(TuckerPack<T>, Vec<f64>), TensorError> {
    ranks.validate(extents3(z)?)?;
    if max_iters == 0 {
        return Err(TensorError::DimensionMismatch("max_iters must be at least 1".into()));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(TensorError::DimensionMismatch("tol must be positive".into()));
    }
    let z = z.cast::<f64>();
    let r = ranks.as_array();
    let mut state = hosvd_state(&z, ranks)?;
    let mut trace = vec![state.error];
    for _ in 0..max_iters {
        let mut u = state.u.clone();
        for mode in 0..3 {
            let mut y = z.clone();
            for (other, f) in u.iter().enumerate() {
                if other != mode {
                    y = mode_product(&y, &f.transpose(), other)?;
                }
            }
            u[mode] = leading_left_singular_vectors(&unfold(&y, mode)?, r[mode])?;
        }
        let next = State::new(&z, u);
        // ALS cannot increase the error in exact arithmetic; keep the better iterate
        // if rounding says otherwise.
        if next.error > state.error {
            break;
        }
        let improvement = state.error - next.error;
        trace.push(next.error);
        state = next;
        if improvement < tol {
            break;
        }
    }
    Ok((state.into_pack(), trace))
}
