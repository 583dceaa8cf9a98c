//! Slice kernels written with eight independent accumulators so the
//! compiler can vectorize the reductions.

use crate::real::Real;

const LANES: usize = 8;

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// `y += alpha * x`
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Largest element, or NaN if any element is NaN.
pub fn max<T: Real>(xs: &[T]) -> T {
    let mut acc = [T::neg_infinity(); LANES];
    let mut nan = false;
    let chunks = xs.chunks_exact(LANES);
    let mut best = T::neg_infinity();
    for &v in chunks.remainder() {
        nan |= v.is_nan();
        best = if v > best { v } else { best };
    }
    for c in chunks {
        for l in 0..LANES {
            acc[l] = if c[l] > acc[l] { c[l] } else { acc[l] };
            nan |= c[l].is_nan();
        }
    }
    if nan {
        return T::nan();
    }
    acc.iter().fold(best, |m, &v| if v > m { v } else { m })
}
