//! Error type shared across the crate.

use std::fmt;

/// Errors surfaced by construction, planning, and I/O paths.
#[derive(Debug)]
pub enum Error {
    /// Malformed input: bad dimensions, non-positive sizes, invalid sets.
    InvalidArgument(String),
    /// A numeric routine failed to reach its tolerance; carries a residual report.
    NumericFailure(String),
    /// Offline generation (reference plan) diverged or could not complete.
    GenerationFailure(String),
    /// File or network I/O failed.
    Io(std::io::Error),
    /// A structured-text payload could not be parsed.
    Parse(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NumericFailure(msg) => write!(f, "numeric failure: {msg}"),
            Error::GenerationFailure(msg) => write!(f, "generation failure: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
