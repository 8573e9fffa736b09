//! Scalar abstraction over `f32` (training) and `f64` (gradient checking),
//! plus a strided matrix-multiply entry point.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// `C = alpha * A * B + beta * C` on raw strided buffers.
    ///
    /// # Safety
    /// The strides and extents must describe memory fully inside the buffers.
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

    fn from_f64_lossy(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
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

    fn from_f64_lossy(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
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

    fn from_f64_lossy(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Shorthand for converting literals.
#[inline]
pub fn c<T: Real>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// A borrowed row-major matrix view, optionally transposed.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    /// Distance between consecutive rows in `data`.
    pub stride: usize,
    pub trans: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols)
    }

    pub fn strided(data: &'a [T], rows: usize, cols: usize, stride: usize) -> Self {
        assert!(cols <= stride || rows <= 1, "stride smaller than row width");
        if rows > 0 && cols > 0 {
            assert!(
                (rows - 1) * stride + cols <= data.len(),
                "matrix view exceeds buffer"
            );
        }
        Self {
            data,
            rows,
            cols,
            stride,
            trans: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            trans: !self.trans,
            ..self
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.stride as isize)
        } else {
            (self.stride as isize, 1)
        }
    }
}

/// `out = alpha * a * b + beta * out`, where `out` is row-major with row stride `out_stride`.
pub fn gemm<T: Real>(
    alpha: T,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    out: &mut [T],
    out_stride: usize,
) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "inner dimensions differ");
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * out_stride + n <= out.len(), "output exceeds buffer");
    if k == 0 {
        for r in 0..m {
            for v in &mut out[r * out_stride..r * out_stride + n] {
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: extents were checked against buffer lengths above and in MatRef::strided.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            out_stride as isize,
            1,
        );
    }
}

/// `a * b` for dense row-major operands, returning a fresh buffer.
pub fn matmul<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>) -> Vec<T> {
    let (m, _) = a.shape();
    let (_, n) = b.shape();
    let mut out = vec![T::zero(); m * n];
    gemm(T::one(), a, b, T::zero(), &mut out, n);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..20).map(|v| (v as f64).sin()).collect();
        let out = matmul(MatRef::new(&a, 3, 4), MatRef::new(&b, 4, 5));
        for (x, y) in out.iter().zip(naive(&a, &b, 3, 4, 5)) {
            assert!((x - y).abs() < 1e-12);
        }

        // aᵀ stored as 4x3
        let mut at = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                at[j * 3 + i] = a[i * 4 + j];
            }
        }
        let out_t = matmul(MatRef::new(&at, 4, 3).t(), MatRef::new(&b, 4, 5));
        for (x, y) in out_t.iter().zip(naive(&a, &b, 3, 4, 5)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_views_select_columns() {
        // 2x4 buffer, take columns 1..3 as a 2x2 matrix
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let id = [1.0f32, 0.0, 0.0, 1.0];
        let out = matmul(MatRef::strided(&a[1..], 2, 2, 4), MatRef::new(&id, 2, 2));
        assert_eq!(out, vec![2.0, 3.0, 6.0, 7.0]);
    }
}
