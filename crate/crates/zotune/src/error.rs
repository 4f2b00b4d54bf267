//! Error type shared across the crate.
//!
//! Every fallible operation returns [`Error`]. The variants mirror the four
//! failure classes the command-line tool maps to exit codes: invalid shapes
//! or configuration (exit 2), numeric failures such as a non-finite loss
//! (exit 3), and I/O failures (exit 4).

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not match what an operation requires.
    Shape(String),
    /// A configuration value is out of range or inconsistent.
    Config(String),
    /// Malformed or out-of-range data (tokens, datasets, checkpoints).
    Data(String),
    /// A numeric invariant broke mid-computation (NaN/Inf loss, overflow).
    Numeric(String),
    /// Underlying I/O failure, with the path or context that produced it.
    Io(String),
}

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Config(_) | Error::Data(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io(_) => 4,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_match_failure_classes() {
        assert_eq!(Error::Shape("x".into()).exit_code(), 2);
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Data("x".into()).exit_code(), 2);
        assert_eq!(Error::Numeric("x".into()).exit_code(), 3);
        assert_eq!(Error::Io("x".into()).exit_code(), 4);
    }
}
