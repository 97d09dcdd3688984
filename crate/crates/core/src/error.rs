use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: incompatible shapes {}x{} and {}x{}", left.0, left.1, right.0, right.1)]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("infeasible partition: {0}")]
    Infeasible(String),
    #[error("malformed payload: {0}")]
    Format(#[from] FormatError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Reasons a serialized tensor fails to parse.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u16),
    #[error("payload truncated in {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("code {code} at position {index} exceeds codebook of {len} values")]
    CodeOverflow { index: usize, code: u32, len: usize },
    #[error("corrupt field: {0}")]
    Corrupt(String),
}
