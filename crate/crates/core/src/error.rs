use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CodecError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("symbol {symbol} at index {index} lies outside the table support [{min}, {max}]")]
    OutOfSupport {
        index: usize,
        symbol: i64,
        min: i64,
        max: i64,
    },

    #[error("latent support [{min}, {max}] exceeds the configured width {limit}; the latent has diverged")]
    Diverged { min: i64, max: i64, limit: usize },

    #[error("truncated stream: {0}")]
    Truncated(String),

    #[error("malformed bitstream: {0}")]
    Format(String),

    #[error("model digest mismatch: stream was produced by {expected}, checkpoint is {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("perceptual weights not found: {}", path.display())]
    MissingWeights { path: PathBuf },

    #[error("empty dataset: {}", .0.display())]
    EmptyDataset(PathBuf),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl CodecError {
    /// Stable, machine-parsable class name used by the command-line tool.
    pub fn class(&self) -> &'static str {
        match self {
            CodecError::Shape(_) => "shape",
            CodecError::Config(_) => "config",
            CodecError::InvalidInput(_) => "input",
            CodecError::OutOfSupport { .. } => "support",
            CodecError::Diverged { .. } => "diverged",
            CodecError::Truncated(_) => "truncated",
            CodecError::Format(_) => "format",
            CodecError::DigestMismatch { .. } => "digest",
            CodecError::NonFinite(_) => "nonfinite",
            CodecError::MissingWeights { .. } => "weights",
            CodecError::EmptyDataset(_) => "dataset",
            CodecError::Image(_) => "image",
            CodecError::Io { .. } => "io",
            CodecError::Serde(_) => "serde",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CodecError::Io {
            path: path.into(),
            source,
        }
    }
}
