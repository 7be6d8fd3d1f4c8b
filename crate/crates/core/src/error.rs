//! Crate-wide error type with the categories the CLI maps to exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Array dimensions do not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset layout or content problem (missing modality, bad labels, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint missing, corrupt, or incompatible with the requested config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Process exit code category used by the CLI: config=2, data=3,
    /// checkpoint=4, everything else 5.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Checkpoint(_) => 4,
            Error::Shape(_) | Error::Io(_) | Error::Format(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}
