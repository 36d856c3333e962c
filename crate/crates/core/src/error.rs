use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no propagation path survives between BS and UE")]
    EmptyLink,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid data in {path}: {reason}")]
    InvalidData { path: PathBuf, reason: String },
    #[error("non-finite value at training step {step}: {source}")]
    NonFiniteStep {
        step: usize,
        source: semloc_autograd::Error,
    },
    #[error(transparent)]
    Autograd(#[from] semloc_autograd::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

impl Error {
    /// True when the failure is a NaN/Inf in numerics rather than bad input.
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteStep { .. } | Error::Autograd(semloc_autograd::Error::NonFinite { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}
