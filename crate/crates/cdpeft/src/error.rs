//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor shape violation (mismatched dims, bad axis, non-scalar loss, ...).
    Shape(String),
    /// Invalid configuration value or unknown variant.
    Config(String),
    /// Dataset layout / sample consistency problem.
    Data(String),
    /// Weight file format or content problem.
    Weights(String),
    /// Training-time failure (NaN loss, empty dataset, ...).
    Train(String),
    /// Command-line usage error.
    Cli(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Weights(m) => write!(f, "weight file error: {m}"),
            Error::Train(m) => write!(f, "training error: {m}"),
            Error::Cli(m) => write!(f, "usage error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
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

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
