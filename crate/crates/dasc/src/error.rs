//! Crate-wide error type, mapped onto the CLI exit codes.

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// Each variant corresponds to one process exit code so CLI behaviour is
/// scriptable: configuration errors exit 2, data/format errors exit 3,
/// numeric failures exit 4.
#[derive(Error, Debug)]
pub enum Error {
    /// Inconsistent shapes, invalid options, mismatched declarations.
    #[error("configuration error: {0}")]
    Config(String),

    /// Missing/corrupt files, malformed manifests, empty selections.
    #[error("data error: {0}")]
    Data(String),

    /// NaN/Inf values, non-finite losses, failed numeric contracts.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code documented for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand constructors; error strings carry full context per the CLI contract.
pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn data_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Data(msg.into()))
}

pub(crate) fn numeric_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Numeric(msg.into()))
}
