use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};

/// Floating-point element type of the engine (`f32` or `f64`).
pub trait Scalar: Float + NumAssign + Default + Debug + Display + Sum + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c += a·b` on strided matrices (row stride, column stride per operand).
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
    );
}

macro_rules! gemm_impl {
    ($t:ty, $f:path) => {
        #[inline]
        fn gemm_acc(
            m: usize,
            k: usize,
            n: usize,
            a: &[$t],
            (rsa, csa): (isize, isize),
            b: &[$t],
            (rsb, csb): (isize, isize),
            c: &mut [$t],
        ) {
            if m == 0 || k == 0 || n == 0 {
                return;
            }
            assert!(c.len() >= m * n);
            let last =
                |rows: usize, cols: usize, rs: isize, cs: isize| (rows as isize - 1) * rs + (cols as isize - 1) * cs;
            assert!((last(m, k, rsa, csa) as usize) < a.len());
            assert!((last(k, n, rsb, csb) as usize) < b.len());
            // SAFETY: the asserts above keep every strided access in bounds.
            unsafe {
                $f(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    rsa,
                    csa,
                    b.as_ptr(),
                    rsb,
                    csb,
                    1.0,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    };
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    gemm_impl!(f32, matrixmultiply::sgemm);
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    gemm_impl!(f64, matrixmultiply::dgemm);
}
