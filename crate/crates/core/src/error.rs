use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Two operands whose extents do not line up.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A shape whose element count disagrees with the data supplied.
    InvalidShape { shape: Vec<usize>, len: usize },
    NonScalarLoss { shape: Vec<usize> },
    TokenOutOfRange { position: usize, token: usize, vocab: usize },
    InvalidConfig(String),
    /// A fused output projection used after the weights it was built from changed.
    StaleFusion,
    CacheMismatch { expected: usize, got: usize },
    LayerNotSelected { layer: usize },
    NonFinite(String),
    InvalidUtf8(std::str::Utf8Error),
    Format(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::InvalidShape { shape, len } => {
                write!(f, "shape {shape:?} does not describe {len} elements")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward needs a scalar loss, got shape {shape:?}")
            }
            Error::TokenOutOfRange { position, token, vocab } => write!(
                f,
                "token {token} at position {position} is outside the vocabulary of {vocab}"
            ),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::StaleFusion => write!(
                f,
                "fused output projection is stale: its source weights changed since fusion"
            ),
            Error::CacheMismatch { expected, got } => write!(
                f,
                "kv cache holds {got} positions but position {expected} was requested"
            ),
            Error::LayerNotSelected { layer } => {
                write!(f, "layer {layer} carries no layer-local value bank")
            }
            Error::NonFinite(what) => write!(f, "non-finite value: {what}"),
            Error::InvalidUtf8(e) => write!(f, "invalid UTF-8 input: {e}"),
            Error::Format(msg) => write!(f, "malformed input: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::InvalidUtf8(e) => Some(e),
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

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(format!("csv: {e}"))
    }
}

impl From<std::str::Utf8Error> for Error {
    fn from(e: std::str::Utf8Error) -> Self {
        Error::InvalidUtf8(e)
    }
}
