use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TrvError>;

#[derive(Debug, Error)]
pub enum TrvError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A binary or text file failed validation. `field` names the offending part.
    #[error("format error in {field}: {detail}")]
    Format { field: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty sample region: {0}")]
    EmptyRegion(String),

    #[error("insufficient positives: need at least 2, got {0}")]
    InsufficientPositives(usize),

    #[error("traversability vector is not initialized")]
    UninitializedVector,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("no usable frames: {0}")]
    NoFrames(String),
}

impl TrvError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TrvError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        TrvError::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrvError::Config(_) => 2,
            TrvError::Numeric(_) => 4,
            _ => 3,
        }
    }
}
