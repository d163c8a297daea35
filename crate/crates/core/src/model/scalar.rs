//! Floating-point element type and the dense kernels the transformer needs.
//!
//! Training runs in `f32`; gradient checks instantiate the same code in `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub trait Scalar:
    num_traits::Float + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `exp` for the hot loops. Single precision uses a branch-free
    /// polynomial that the compiler can vectorize; double precision (used
    /// for gradient checking) keeps the library routine.
    fn fast_exp(self) -> Self;

    /// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product with
    /// arbitrary element strides.
    ///
    /// # Safety
    /// Every addressed element must lie inside the allocations behind the
    /// pointers, and `c` must not alias `a` or `b`.
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
}

/// Range reduction `x = k ln2 + r` with `|r| <= ln2 / 2`, a degree-6
/// polynomial for `e^r`, and `2^k` assembled in the exponent bits. Within
/// 2 ulp of the exact value on `[-87, 88]`; inputs are clamped to that
/// range (the lower end flushes to about 1e-38 rather than 0) and NaN
/// propagates.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let x = x.clamp(-87.0, 88.0);
    // Adding 1.5 * 2^23 rounds to an integer held in the low mantissa bits,
    // which also yields k as an integer without a float-to-int conversion.
    let shifted = x * LOG2E + ROUND;
    let k = shifted - ROUND;
    let k_int = shifted.to_bits() as i32 - ROUND.to_bits() as i32;
    let r = x - k * LN2_HI - k * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let e = p * r * r + r + 1.0;
    e * f32::from_bits(((k_int + 127) as u32) << 23)
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn fast_exp(self) -> Self {
        exp_f32(self)
    }
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn fast_exp(self) -> Self {
        self.exp()
    }
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided view of a matrix inside a flat buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    /// Dense row-major `rows x cols` block starting at `offset`.
    pub fn dense(offset: usize, rows: usize, cols: usize) -> Self {
        View {
            offset,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Row-major block with an explicit row stride (column slices of a wider matrix).
    pub fn strided(offset: usize, rows: usize, cols: usize, rs: usize) -> Self {
        View {
            offset,
            rows,
            cols,
            rs,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn last(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            self.offset
        } else {
            self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `c = alpha * a * b + beta * c` over views into three distinct buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(alpha: T, a: &[T], av: View, b: &[T], bv: View, beta: T, c: &mut [T], cv: View) {
    assert_eq!(av.cols, bv.rows, "inner dimensions");
    assert_eq!(av.rows, cv.rows, "output rows");
    assert_eq!(bv.cols, cv.cols, "output cols");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    assert!(av.last() < a.len() || av.cols == 0);
    assert!(bv.last() < b.len() || bv.rows == 0);
    assert!(cv.last() < c.len());
    // SAFETY: bounds checked above; `c` is a unique borrow so it cannot alias.
    unsafe {
        T::gemm_raw(
            cv.rows,
            av.cols,
            cv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Dense `(m x k) * (k x n)`, overwriting or accumulating into `c`.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    gemm(
        T::one(),
        a,
        View::dense(0, m, k),
        b,
        View::dense(0, k, n),
        beta,
        c,
        View::dense(0, m, n),
    );
}

/// `c (+)= a * b^T` where `a` is `m x k` and `b` is `n x k`.
pub(crate) fn matmul_bt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    gemm(
        T::one(),
        a,
        View::dense(0, m, k),
        b,
        View::dense(0, n, k).t(),
        beta,
        c,
        View::dense(0, m, n),
    );
}

/// `c (+)= a^T * b` where `a` is `k x m` and `b` is `k x n`.
pub(crate) fn matmul_at<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    gemm(
        T::one(),
        a,
        View::dense(0, k, m).t(),
        b,
        View::dense(0, k, n),
        beta,
        c,
        View::dense(0, m, n),
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_tracks_library_exp() {
        let mut worst = 0.0f64;
        for i in 0..=350_000 {
            let x = -87.0 + i as f64 * 0.0005;
            let exact = x.exp();
            let got = (x as f32).fast_exp() as f64;
            let exact_at_f32 = (x as f32 as f64).exp();
            worst = worst.max(((got - exact_at_f32) / exact_at_f32).abs());
            assert!(got.is_finite() && got > 0.0, "{x} -> {got} (exact {exact})");
        }
        assert!(worst < 3e-7, "worst relative error {worst}");
        assert_eq!(0.0f32.fast_exp(), 1.0);
        assert!(f32::NAN.fast_exp().is_nan());
        assert!(f32::NEG_INFINITY.fast_exp() < 1e-37);
        assert!(f32::INFINITY.fast_exp() > 1e38);
    }

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul(&a, &b, &mut c, m, k, n, false);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let bt = transpose(&b, k, n);
        let mut c2 = vec![1.0; m * n];
        matmul_bt(&a, &bt, &mut c2, m, k, n, true);
        assert!(c2.iter().zip(&want).all(|(x, y)| (x - 1.0 - y).abs() < 1e-12));

        let at = transpose(&a, m, k);
        let mut c3 = vec![0.0; m * n];
        matmul_at(&at, &b, &mut c3, m, k, n, false);
        assert!(c3.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
