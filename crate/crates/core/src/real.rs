use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point element type of a [`Tensor`](crate::Tensor).
///
/// Implemented for `f32` (training) and `f64` (gradient and oracle checks).
pub trait Real:
    num_traits::Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;

    /// Replaces each `x` with `exp(x - shift)` and returns the sum.
    ///
    /// Callers pass `shift >= max(xs)`, so every argument is non-positive.
    fn exp_shifted(xs: &mut [Self], shift: Self) -> Self {
        let mut sum = Self::zero();
        for x in xs {
            *x = (*x - shift).exp();
            sum += *x;
        }
        sum
    }

    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; each given as
    /// (slice, row stride, column stride).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], usize, usize),
        b: (&[Self], usize, usize),
        beta: Self,
        c: (&mut [Self], usize, usize),
    );
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $erf:path, $gemm:path $(, $extra:item)*) => {
        impl Real for $t {
            $($extra)*
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn erf(self) -> Self {
                $erf(self)
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: (&[Self], usize, usize),
                b: (&[Self], usize, usize),
                beta: Self,
                c: (&mut [Self], usize, usize),
            ) {
                assert!(a.0.len() >= span(m, k, a.1, a.2), "gemm: lhs too short");
                assert!(b.0.len() >= span(k, n, b.1, b.2), "gemm: rhs too short");
                assert!(c.0.len() >= span(m, n, c.1, c.2), "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above keep every strided access inside
                // the three slices, and `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.0.as_ptr(),
                        a.1 as isize,
                        a.2 as isize,
                        b.0.as_ptr(),
                        b.1 as isize,
                        b.2 as isize,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1 as isize,
                        c.2 as isize,
                    );
                }
            }
        }
    };
}

impl_real!(
    f32,
    libm::erff,
    matrixmultiply::sgemm,
    fn exp_shifted(xs: &mut [Self], shift: Self) -> Self {
        let mut lanes = [0.0f32; 8];
        let mut chunks = xs.chunks_exact_mut(8);
        for c in &mut chunks {
            for (x, acc) in c.iter_mut().zip(&mut lanes) {
                *x = exp_nonpositive(*x - shift);
                *acc += *x;
            }
        }
        let mut sum: f32 = lanes.iter().sum();
        for x in chunks.into_remainder() {
            *x = exp_nonpositive(*x - shift);
            sum += *x;
        }
        sum
    }
);
impl_real!(f64, libm::erf, matrixmultiply::dgemm);

/// Branch-free `exp` for `x <= 0`, accurate to a few ulp, that the compiler
/// can vectorize. Arguments below `-87` flush to about `1.6e-38`; NaN
/// propagates.
#[inline(always)]
fn exp_nonpositive(x: f32) -> f32 {
    const MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23: adding it rounds to an integer
    let x = if x < -87.0 { -87.0 } else { x }; // keeps NaN, unlike f32::max
    let m = x * std::f32::consts::LOG2_E + MAGIC;
    let n = m - MAGIC;
    let r = x - n * 0.693_359_4 - n * -2.121_944_4e-4;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 0.166_666_65;
    p = p * r + 0.5;
    let poly = p * r * r + r + 1.0;
    let k = m.to_bits().wrapping_sub(MAGIC.to_bits()) as i32;
    // wrapping ops: checked arithmetic would block vectorization in test builds
    poly * f32::from_bits((k.wrapping_add(127) as u32).wrapping_shl(23))
}
