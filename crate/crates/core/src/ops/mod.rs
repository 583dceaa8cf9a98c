//! Numeric kernels behind the [`Tape`](crate::Tape) operations. Each kernel
//! works on flat row-major slices and knows nothing about the tape.

pub mod attention;
pub mod conv;
pub(crate) mod lanes;
pub mod matmul;
pub mod norm;
pub mod shape;

use crate::real::Real;

pub fn gelu<T: Real>(v: T) -> T {
    let half = T::of(0.5);
    half * v * (T::one() + (v * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Real>(v: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (v * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * v * v).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + v * pdf
}
