use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

/// Real scalar the numerical kernels are generic over.
///
/// Implemented for `f64` (the default everywhere) and `f32`.
pub trait Scalar:
    Float
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Short name used in reports and file headers.
    const NAME: &'static str;

    /// Converts an `f64` literal, rounding for narrower types.
    fn lit(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    fn count(n: usize) -> Self {
        Self::lit(n as f64)
    }

    /// `c = a b + beta c` for an `m x k` matrix `a` and a `k x n` matrix
    /// `b`, each given with its `(row, column)` strides; `c` is dense
    /// row-major `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    /// Draws one standard normal sample.
    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let x: f64 = rng.sample(StandardNormal);
        Self::lit(x)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    ) {
        check_gemm(m, k, n, a.len(), a_strides, b.len(), b_strides, c.len());
        // SAFETY: check_gemm bounds every strided access by the slice lengths.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    ) {
        check_gemm(m, k, n, a.len(), a_strides, b.len(), b_strides, c.len());
        // SAFETY: check_gemm bounds every strided access by the slice lengths.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
}

/// Panics unless every strided access of a `gemm` call stays in bounds.
#[allow(clippy::too_many_arguments)]
fn check_gemm(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    (ra, ca): (isize, isize),
    b_len: usize,
    (rb, cb): (isize, isize),
    c_len: usize,
) {
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(ra >= 0 && ca >= 0 && rb >= 0 && cb >= 0, "negative gemm stride");
    assert!(last(m, k, ra, ca) <= a_len, "gemm: a out of bounds");
    assert!(last(k, n, rb, cb) <= b_len, "gemm: b out of bounds");
    assert!(m * n <= c_len, "gemm: c out of bounds");
}
