use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DdError>;

#[derive(Debug, Error)]
pub enum DdError {
    #[error("{what} = {value} is out of range (allowed {allowed})")]
    OutOfRange {
        what: &'static str,
        value: i64,
        allowed: String,
    },

    #[error("structural error: {0}")]
    Structural(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("ODE solver produced a non-finite state at step {step}")]
    Solver { step: usize },

    #[error("pair generation failed at position {position}: {source}")]
    PairPosition {
        position: usize,
        #[source]
        source: Box<DdError>,
    },

    #[error("pair {index} failed: {source}")]
    PairIndex {
        index: usize,
        #[source]
        source: Box<DdError>,
    },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("teacher fingerprint mismatch: store has {expected}, teacher has {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DdError {
    pub(crate) fn out_of_range(what: &'static str, value: usize, allowed: impl Into<String>) -> Self {
        DdError::OutOfRange {
            what,
            value: value as i64,
            allowed: allowed.into(),
        }
    }

    /// Strips the pair/position wrappers.
    pub fn root(&self) -> &DdError {
        match self {
            DdError::PairPosition { source, .. } | DdError::PairIndex { source, .. } => source.root(),
            other => other,
        }
    }
}
