use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, left is {left:?}, right is {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid value for `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid weight matrix: {0}")]
    InvalidWeights(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("training aborted at epoch {epoch}, step {step}: {reason}")]
    Aborted {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the CLI: 2 for runtime aborts, 1 for everything
    /// that is a rejected input.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Aborted { .. } | Error::NonFinite(_) => 2,
            _ => 1,
        }
    }
}
