use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand extents do not fit together.
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A class or element index lies outside its range.
    Index { index: usize, len: usize },
    /// A NaN or infinity appeared where a finite value is required.
    NonFinite(String),
    /// Input without the variance or rank an algorithm needs.
    Degenerate(String),
    /// Invalid configuration or empty split.
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Degenerate(_))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => {
                write!(f, "{op}: dimension mismatch between {left:?} and {right:?}")
            }
            Error::Index { index, len } => write!(f, "index {index} out of range for length {len}"),
            Error::NonFinite(ctx) => write!(f, "non-finite value: {ctx}"),
            Error::Degenerate(ctx) => write!(f, "degenerate input: {ctx}"),
            Error::Config(ctx) => write!(f, "configuration error: {ctx}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T, E = Error> = core::result::Result<T, E>;
