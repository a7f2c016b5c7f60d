//! Crate-wide error type.
//!
//! Variants are grouped by how the command-line harness reports them:
//! configuration problems exit with code 2, unreadable or inconsistent
//! data with code 3, and numeric failures (a NaN or infinity reaching a
//! loss or checkpoint) with code 4.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or argument mismatch in a tensor or network operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration file, key, value, or flag combination.
    #[error("config error: {0}")]
    Config(String),

    /// Missing, malformed, or inconsistent input data (bursts,
    /// datasets, checkpoints, images).
    #[error("data error: {0}")]
    Data(String),

    /// A non-finite value was produced where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl fmt::Display) -> Self {
        Error::Shape(msg.to_string())
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        Error::Data(msg.to_string())
    }

    pub fn numeric(msg: impl fmt::Display) -> Self {
        Error::Numeric(msg.to_string())
    }

    /// Process exit code used by the command-line interface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Shape(_) | Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}
