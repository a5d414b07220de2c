use thiserror::Error;

use crate::models::Provenance;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported prior/likelihood pair: {prior} with {likelihood}")]
    UnsupportedPair { prior: String, likelihood: String },

    #[error("dataset is empty")]
    EmptyData,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("expected {expected} data, found {found}")]
    Provenance {
        expected: Provenance,
        found: Provenance,
    },

    #[error("generator failed: {message}")]
    Generator {
        message: String,
        diagnostics: String,
    },

    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error(
        "no convergence after {iterations} iterations (gradient sup-norm {gradient_norm:e}, log-likelihood {log_likelihood})"
    )]
    NonConvergence {
        iterations: usize,
        gradient_norm: f64,
        log_likelihood: f64,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
