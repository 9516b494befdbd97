use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error on {path}: {message}")]
    Png { path: PathBuf, message: String },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("kernel file: {0}")]
    KernelFormat(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("solver diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("tile generation failed after {attempts} attempts")]
    AttemptCapExceeded { attempts: usize },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("process corners: {0}")]
    CornerOrder(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Png { .. } => "png",
            Error::UnsupportedFormat(_) => "unsupported_format",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidConfig(_) => "invalid_config",
            Error::KernelFormat(_) => "kernel_format",
            Error::Checkpoint(_) => "checkpoint",
            Error::Diverged { .. } => "diverged",
            Error::AttemptCapExceeded { .. } => "attempt_cap_exceeded",
            Error::Dataset(_) => "dataset",
            Error::CornerOrder(_) => "corner_order",
            Error::Json(_) => "json",
        }
    }
}
