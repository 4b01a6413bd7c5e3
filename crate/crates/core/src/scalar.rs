//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Storage is generic (`f32` for checkpoints, `f64` for the trainer and for
//! decomposition internals); reductions always accumulate in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Real floating-point element type for tensors and matrices.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Name used in checkpoint headers and diagnostics.
    const DTYPE: &'static str;

    fn from_f64_lossy(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Tanh-approximated GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let t = (k * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // large positive inputs pass through, large negative inputs vanish
        assert!((gelu(8.0) - 8.0).abs() < 1e-12);
        assert!(gelu(-8.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -1.2, -0.3, 0.0, 0.4, 1.7, 2.9] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
