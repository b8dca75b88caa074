//! Crate-wide error type.

use std::fmt;

/// Error cases surfaced by the pipeline.
#[derive(Debug)]
pub enum Error {
    /// Tensor extents do not line up; message names both shapes.
    Shape(String),
    /// Invalid parameter or inconsistent configuration.
    Config(String),
    /// A runtime contract was violated (e.g. weights not summing to 1).
    Contract(String),
    /// A ragged voxel does not fit the fixed point cap.
    Capacity(String),
    /// Malformed input file or config text.
    Parse(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Capacity(m) => write!(f, "capacity error: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
