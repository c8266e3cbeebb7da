//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. The CLI maps errors onto
//! exit codes: usage/validation problems exit 2, runtime failures exit 1.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on an operation's inputs was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Bad run configuration (unknown key, missing field, unparseable value).
    #[error("config error: {0}")]
    Config(String),

    /// A file named in the configuration does not exist.
    #[error("{kind} not found: {path}")]
    MissingFile { kind: &'static str, path: PathBuf },

    /// Malformed record in a data file, with its 1-based line or row number.
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// The simulator could not make progress (e.g. page pool exhausted with
    /// nothing left to free).
    #[error("simulation error: {0}")]
    Sim(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Exit code for the CLI: 2 for usage/validation errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::Config(_)
            | Error::MissingFile { .. }
            | Error::Parse { .. } => 2,
            Error::Sim(_) | Error::Io(_) => 1,
        }
    }
}
