use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Scalar type of a tensor: `f32` for training, `f64` for gradient checks.
pub trait Real:
    Float + Default + Debug + Display + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a·b + beta·c` on strided row/column layouts.
    ///
    /// # Safety
    /// Callers go through [`gemm`], which checks every stride against the
    /// slice lengths.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        f64::from(self)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided matrix layout: `(row stride, column stride)`.
#[derive(Debug, Clone, Copy)]
pub struct Layout(pub usize, pub usize);

impl Layout {
    /// Row-major with `cols` columns.
    pub fn rows(cols: usize) -> Self {
        Layout(cols, 1)
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Layout(1, cols)
    }

    fn max_index(self, r: usize, c: usize) -> usize {
        if r == 0 || c == 0 {
            0
        } else {
            (r - 1) * self.0 + (c - 1) * self.1
        }
    }
}

/// `c (m×n) = a (m×k) · b (k×n) + beta·c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(la.max_index(m, k) < a.len(), "gemm: lhs out of bounds");
        assert!(lb.max_index(k, n) < b.len(), "gemm: rhs out of bounds");
    }
    assert!(lc.max_index(m, n) < c.len(), "gemm: output out of bounds");
    // SAFETY: all strided accesses were bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            la.0 as isize,
            la.1 as isize,
            b.as_ptr(),
            lb.0 as isize,
            lb.1 as isize,
            beta,
            c.as_mut_ptr(),
            lc.0 as isize,
            lc.1 as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, &a, Layout::rows(2), &b, Layout::rows(2), 0.0, &mut c, Layout::rows(2));
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // aᵀ·b
        gemm(2, 2, 2, &a, Layout::transposed(2), &b, Layout::rows(2), 0.0, &mut c, Layout::rows(2));
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        // accumulate
        gemm(2, 2, 2, &a, Layout::transposed(2), &b, Layout::rows(2), 1.0, &mut c, Layout::rows(2));
        assert_eq!(c, [52.0, 60.0, 76.0, 88.0]);
    }
}
