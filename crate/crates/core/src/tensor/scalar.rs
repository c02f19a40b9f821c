use std::fmt;
use std::iter::Sum;

use num_traits::{Float, NumAssignOps};

/// Element type for graph tensors.
///
/// Training and inference run in `f32`; `f64` exists for finite-difference
/// gradient verification, where single precision would drown the comparison
/// in rounding noise.
pub trait Scalar:
    Float + NumAssignOps + Sum + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `tanh` as used inside GELU. The `f64` impl is the libm function so
    /// gradient verification sees an exactly self-consistent derivative;
    /// the `f32` impl is a clamped rational approximation (max error about
    /// one ulp) that vectorizes, since activation `tanh` dominates the
    /// elementwise cost of a training step.
    fn tanh_act(self) -> Self;

    /// `c ← alpha * a·b + beta * c` with explicit row/column strides on
    /// every operand, so transposed or interleaved views cost nothing.
    /// `a` is `[m,k]`, `b` is `[k,n]`, `c` is `[m,n]` under the strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_view(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    /// Strided operands, contiguous row-major output.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        Self::gemm_view(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
    }

    /// Contiguous row-major `c ← alpha * a·b + beta * c`.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        Self::gemm_strided(m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c);
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn tanh_act(self) -> f32 {
        // Odd rational approximation x·P(x²)/Q(x²) on the clamped range,
        // the standard single-precision kernel used by SIMD math libraries.
        const CLAMP: f32 = 7.905_311f32;
        const A1: f32 = 4.893_525e-3;
        const A3: f32 = 6.372_619e-4;
        const A5: f32 = 1.485_722e-5;
        const A7: f32 = 5.122_297e-8;
        const A9: f32 = -8.604_672e-11;
        const A11: f32 = 2.000_188e-13;
        const A13: f32 = -2.760_768e-16;
        const B0: f32 = 4.893_525e-3;
        const B2: f32 = 2.268_435e-3;
        const B4: f32 = 1.185_347e-4;
        const B6: f32 = 1.198_258e-6;
        let x = self.clamp(-CLAMP, CLAMP);
        let s = x * x;
        let p = A13;
        let p = p * s + A11;
        let p = p * s + A9;
        let p = p * s + A7;
        let p = p * s + A5;
        let p = p * s + A3;
        let p = p * s + A1;
        let p = p * x;
        let q = B6;
        let q = q * s + B4;
        let q = q * s + B2;
        let q = q * s + B0;
        p / q
    }

    fn gemm_view(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), rsc, csc,
            );
        }
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn tanh_act(self) -> f64 {
        self.tanh()
    }

    fn gemm_view(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), rsc, csc,
            );
        }
    }
}
