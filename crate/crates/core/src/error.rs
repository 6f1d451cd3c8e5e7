use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DppError> = std::result::Result<T, E>;

/// Errors raised across the crate.
///
/// Variants split into two families that map onto the CLI exit codes:
/// input/validation problems (exit 2) and numerical/conditioning failures (exit 3).
#[derive(Debug, Error)]
pub enum DppError {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unsupported model file version '{found}' (expected v1)")]
    Version { found: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("matrix is not positive definite (pivot {pivot}){context}")]
    NotPositiveDefinite { pivot: usize, context: String },

    #[error("cholesky failed at maximum jitter {max_jitter:e}; smallest eigenvalue estimate {min_eigenvalue:e}")]
    Conditioning { max_jitter: f64, min_eigenvalue: f64 },

    #[error("matrix is not PSD: eigenvalue {eigenvalue:e} below tolerance {tolerance:e}")]
    NotPsd { eigenvalue: f64, tolerance: f64 },

    #[error("objective evaluation failed: {0}")]
    Evaluation(String),

    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl DppError {
    pub fn input(msg: impl Into<String>) -> Self {
        DppError::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DppError::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            DppError::Input(_)
            | DppError::Parse { .. }
            | DppError::Version { .. }
            | DppError::DimensionMismatch(_)
            | DppError::Io { .. } => 2,
            DppError::NotPositiveDefinite { .. }
            | DppError::Conditioning { .. }
            | DppError::NotPsd { .. }
            | DppError::Evaluation(_)
            | DppError::Numeric(_) => 3,
        }
    }
}
