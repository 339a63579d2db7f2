use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("matrix is not positive definite even after jitter of {jitter:e}; add noise variance or jitter")]
    NotPositiveDefinite { jitter: f64 },

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported format_version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Attaches a location prefix to data and numerical errors.
    pub fn context(self, prefix: &str) -> Self {
        match self {
            Error::Data(m) => Error::Data(format!("{prefix}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("{prefix}: {m}")),
            Error::Diverged { epoch, message } => Error::Diverged {
                epoch,
                message: format!("{prefix}: {message}"),
            },
            other => other,
        }
    }
}
