//! The two-stage restoration network.
//!
//! Noise suppression (NSN): head conv `C → F`, `nsn_depth` residual blocks of
//! two conv/batch-norm/ReLU blocks each, tail conv `F → C`; its output is the
//! noise map subtracted from the input to give the transition image.
//!
//! Structure enhancement (SEN): head conv, `sen_depth` CvT blocks
//! (convolutional embedding + `cvt_depth` pre-norm transformer blocks with
//! layer norm), tail conv; its output is added to the transition image.
//!
//! Attention runs on a pixel-unshuffled grid: unshuffle by `r`, 1×1 reduce to
//! `F` channels, per-head Q/K/V projections over row-major tokens, scaled
//! dot-product attention, heads concatenated, pixel shuffle by `r`, 1×1
//! projection back to `F` channels.

mod params;
mod session;

pub use params::{layout, ArchConfig, ModelParams, ParamKind, ParamSpec};
pub use session::{BlockCounts, Restoration, Session};

use crate::error::Result;
use crate::real::Real;
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;

/// Restored and transition images of a batch, computed without gradients.
pub fn restore<T: Real>(params: &mut ModelParams<T>, noisy: Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::inference();
    let mut session = Session::bind(&mut tape, params, mode);
    let x = session.input(noisy);
    let out = session.rtfnet_forward(x)?;
    Ok((tape.value(out.restored).clone(), tape.value(out.transition).clone()))
}
