use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum ShiraError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    /// A serialized file failed validation. `field` names the offending part.
    #[error("format error in {field}: {message}")]
    Format { field: &'static str, message: String },

    #[error("corrupt adapter: {0}")]
    CorruptAdapter(String),

    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ShiraError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Self::Parameter(msg.into())
    }

    pub(crate) fn format(field: &'static str, msg: impl Into<String>) -> Self {
        Self::Format {
            field,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numeric kind (divergence, non-convergence).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Self::Numeric(_) | Self::Training { .. })
    }
}

pub type Result<T> = std::result::Result<T, ShiraError>;
