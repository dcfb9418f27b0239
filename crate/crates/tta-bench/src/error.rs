//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, TtaError>;

#[derive(Debug, thiserror::Error)]
pub enum TtaError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("unknown bundle format version {0}")]
    UnknownFormatVersion(u32),

    #[error("blob {name}: expected {expected} bytes, found {found}")]
    BlobSize {
        name: String,
        expected: u64,
        found: u64,
    },

    #[error("{name} row {index} has norm {norm:.6e}, expected 1 within {tol:.0e}")]
    NormViolation {
        name: String,
        index: usize,
        norm: f64,
        tol: f64,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unknown method '{tag}'; available: {available}")]
    UnknownMethod { tag: String, available: String },

    #[error("method '{tag}' does not run in {mode} mode")]
    ModeMismatch { tag: String, mode: String },

    #[error("prediction for sample '{0}' carries no confidence")]
    MissingConfidence(String),
}

impl TtaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TtaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for usage/validation problems,
    /// 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            TtaError::InvalidInput(_)
            | TtaError::DimensionMismatch(_)
            | TtaError::UnknownMethod { .. }
            | TtaError::ModeMismatch { .. }
            | TtaError::MissingConfidence(_)
            | TtaError::Manifest(_) => 2,
            _ => 3,
        }
    }
}
