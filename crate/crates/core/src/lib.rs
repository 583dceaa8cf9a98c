//! Residual transformer fusion network (RTF-Net) for salt-and-pepper image
//! denoising, built on a small dense-tensor and reverse-mode autodiff engine.
//!
//! The crate is organized bottom-up:
//!
//! - [`Tensor`] and [`Tape`]: storage, differentiable operations and
//!   backpropagation.
//! - [`optim`]: parameter initialization, Adam and the step-decay schedule.
//! - [`model`]: the noise suppression network (residual CNN) and the
//!   structure enhancement network (convolutional vision transformer).
//! - [`noise`], [`image`]: impulse noise injection, PGM/PPM I/O, patching.
//! - [`metrics`], [`train`]: MSE/PSNR, training curves, reference PSNR table,
//!   the training loop and checkpoints.

pub mod error;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod ops;
pub mod optim;
mod real;
mod tape;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Activation, Mode, NormKind, RunningStats, Tape, Var};
pub use tensor::Tensor;

// The guide under `book/` is compiled into doc-tests, one module per chapter,
// so every snippet in it keeps building against the current API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/noise.md")]
    mod noise {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
