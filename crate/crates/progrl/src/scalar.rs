//! Scalar abstraction for the numeric core.
//!
//! All array math, layers, losses, and the optimizer are generic over
//! [`Scalar`] so the same code runs in `f32` or `f64`. The pipeline itself
//! uses the crate-level [`crate::Real`] alias.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use rand::distributions::uniform::SampleUniform;

/// Floating-point scalar usable by the numeric core.
pub trait Scalar:
    Float
    + NumAssignOps
    + ToPrimitive
    + FromPrimitive
    + SampleUniform
    + Sum
    + Default
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64` (exact for `f64`, rounded for `f32`).
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    /// Widening conversion to `f64`.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// General matrix multiply `C = alpha * A * B + beta * C` with explicit
    /// row/column strides, dispatched to a width-specific backend.
    ///
    /// # Safety
    /// The pointers must be valid for `m x k` (A), `k x n` (B), and `m x n`
    /// (C) elements under the given strides, and C must not alias A or B.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}
