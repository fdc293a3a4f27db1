//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation was called outside its contract (non-scalar loss,
    /// double backward, mismatched node counts, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value or malformed config file.
    #[error("config error: {0}")]
    Config(String),

    /// Input data could not be parsed.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// A NaN or infinite value surfaced where finite values are required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Checkpoint or cache artifact does not match the current inputs.
    #[error("artifact incompatibility: {0}")]
    Incompatible(String),

    /// Versioned binary payload could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Format(format!("csv error: {other:?}")),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 user/config errors, 3 artifact
    /// compatibility, 4 numerical failure, 1 everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => 2,
            Error::Incompatible(_) => 3,
            Error::Numerical(_) => 4,
            _ => 1,
        }
    }
}
