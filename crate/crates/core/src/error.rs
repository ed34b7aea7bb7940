//! Error type shared by all core modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    #[error("shape mismatch in `{op}`: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    /// Training or measurement hit a non-finite loss.
    #[error("numeric divergence at step {step}")]
    Divergence { step: u64 },

    /// A normalization operator with a zero diagonal entry cannot be inverted.
    #[error("normalization operator has a zero scale at coordinate {index}; use eta > 0")]
    ZeroScale { index: usize },

    /// Caller passed an argument outside its documented domain.
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
