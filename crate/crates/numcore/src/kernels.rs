//! Dense kernels over row-major slices. All `gemm_*` routines accumulate
//! (`c += a·b`) so backward passes can add into existing gradient buffers.

use crate::Scalar;

/// Products with fewer multiply-adds than this skip the packed kernel, whose
/// setup cost dominates at attention-head sizes.
const SMALL_GEMM: usize = 1 << 15;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n < SMALL_GEMM {
        for i in 0..m {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
                for (cj, &bj) in c_row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cj += a_ip * bj;
                }
            }
        }
        return;
    }
    T::gemm_acc(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n < SMALL_GEMM {
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            for j in 0..n {
                c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    T::gemm_acc(m, k, n, a, (k as isize, 1), b, (1, k as isize), c);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n < SMALL_GEMM {
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            for (i, &a_pi) in a[p * m..(p + 1) * m].iter().enumerate() {
                for (cj, &bj) in c[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                    *cj += a_pi * bj;
                }
            }
        }
        return;
    }
    T::gemm_acc(m, k, n, a, (1, m as isize), b, (n as isize, 1), c);
}

/// Row-major transpose of a `rows×cols` matrix.
pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            acc[l] += a[c * 8 + l] * b[c * 8 + l];
        }
    }
    let mut s = acc.iter().copied().fold(T::zero(), |x, y| x + y);
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}
