//! Harness error type and its process exit-code mapping.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    /// Bad flags, config values or input files: exit code 1.
    #[error("{0}")]
    Invalid(String),

    /// I/O failure: exit code 1.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed binary or CSV input, with the byte offset that failed:
    /// exit code 1.
    #[error("{path}: {msg} (at byte {offset})")]
    Format { path: PathBuf, offset: u64, msg: String },

    /// Training or measurement produced non-finite values: exit code 2.
    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Core(#[from] sharpness_core::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        LabError::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }

    /// 0 is success; 1 validation/input errors; 2 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Divergence(_) => 2,
            LabError::Core(sharpness_core::Error::Divergence { .. })
            | LabError::Core(sharpness_core::Error::NonFinite { .. }) => 2,
            _ => 1,
        }
    }
}
