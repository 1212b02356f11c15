//! Error type shared by every module of the crate.

use thiserror::Error;

/// Failure modes of the solver stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of a pointwise function.
    #[error("domain error: {0}")]
    Domain(String),
    /// A model or numerical parameter violates its invariants.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// Evaluation would overflow the floating-point range.
    #[error("range error: {0}")]
    Range(String),
    /// Two objects that must share a basis or grid do not.
    #[error("contract error: {0}")]
    Contract(String),
    /// An input violates a documented precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// A requested discretization exceeds the configured size cap.
    #[error("resource limit: {0}")]
    Resource(String),
    /// A linear or nonlinear solve failed.
    #[error("solver failure: {0}")]
    Solver(String),
    /// The exponent window for the requested γ is empty.
    #[error("admissibility failure: {0}")]
    Admissibility(String),
    /// Run configuration could not be parsed or validated.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Filesystem or serialization failure.
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
