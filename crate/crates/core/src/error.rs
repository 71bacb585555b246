use std::path::PathBuf;

use crate::model::Pose;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("histogram has no nonzero bins")]
    EmptyHistogram,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Registration lost track; carries the last pose reached.
    #[error("tracking diverged: {reason}")]
    Divergence { reason: String, last_pose: Pose },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("dataset format error in {path}: {reason}")]
    DatasetFormat { path: PathBuf, reason: String },

    #[error("dataset at {0} produced no associated frames")]
    EmptyDataset(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
