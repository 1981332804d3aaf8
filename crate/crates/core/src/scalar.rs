//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Models train in `f32`; the `f64` instantiation exists so that oracles
//! (finite differences, reference implementations) can run the very same
//! code at higher precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point element type: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Raw general matrix multiply `C ← α·A·B + β·C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`)
    /// regions of the stated dimensions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    fn to_f32_lossy(self) -> f32;
    fn of_f32(v: f32) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_f32_lossy(self) -> f32 {
        self
    }

    fn of_f32(v: f32) -> Self {
        v
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_f32_lossy(self) -> f32 {
        self as f32
    }

    fn of_f32(v: f32) -> Self {
        v as f64
    }
}
