use std::path::PathBuf;

use thiserror::Error;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("scale {scale} out of range (valid 0..={max})")]
    ScaleOutOfRange { scale: i64, max: usize },
    #[error("scale {requested} is not trained (trained up to {trained:?})")]
    Untrained { requested: usize, trained: Option<usize> },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("non-finite {what} at scale {scale}, iteration {iteration}")]
    NonFinite { what: String, scale: usize, iteration: usize },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
