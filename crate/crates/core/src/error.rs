use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("data length {got} does not match dims {dims:?} (expected {expected})")]
    LengthMismatch {
        dims: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("invalid extent in dims {0:?}: every extent must be at least 1")]
    InvalidExtent(Vec<usize>),
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward called on a non-scalar tensor with dims {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; record a new forward pass")]
    TapeConsumed,
    #[error("this tape records no gradients")]
    NoGrad,
    #[error("eval-mode batch normalization needs running statistics")]
    MissingRunningStats,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint truncated while reading tensor `{0}`")]
    Truncated(String),
    #[error("unknown comparison key: {0}")]
    UnknownKey(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
