//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up (matmul, add, gram construction, ...).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A linear system could not be factorized even after diagonal jitter.
    #[error("singular system: {0}")]
    Singular(String),

    /// Invalid or unknown configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A discrete objective needed a within-group partner that does not exist.
    /// `groups` lists one description per offending group.
    #[error("insufficient samples per group: {}", groups.join("; "))]
    InsufficientSamples { groups: Vec<String> },

    /// Training produced a non-finite loss and was aborted.
    #[error("non-finite loss ({loss_kind}) at step {step}")]
    NonFinite { step: usize, loss_kind: String },

    /// Text input (CSV, config file, checkpoint) failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for a `Shape` error from format arguments.
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Shorthand for a `Contract` error from format arguments.
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
