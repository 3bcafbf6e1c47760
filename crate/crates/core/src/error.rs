use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Vocabulary construction received no sequences.
    EmptyCorpus,
    /// A character that is not part of the closed vocabulary.
    UnknownToken { token: char, position: usize },
    /// A token id outside `0..vocab_size`.
    InvalidTokenId { id: usize, vocab_size: usize },
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A forward op produced NaN or an infinity.
    NonFinite { op: &'static str },
    FullyMaskedRow { row: usize },
    SequenceTooShort { len: usize, required: usize },
    InvalidArgument(String),
    ConfigMismatch(String),
    /// A metric that has no value for the given input.
    Undefined(&'static str),
    /// Malformed serialized data.
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::EmptyCorpus => f.write_str("empty corpus"),
            Error::UnknownToken { token, position } => {
                write!(f, "unknown character {token:?} at position {position}")
            }
            Error::InvalidTokenId { id, vocab_size } => {
                write!(f, "token id {id} out of range for vocabulary of size {vocab_size}")
            }
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Error::FullyMaskedRow { row } => write!(f, "softmax row {row} is fully masked"),
            Error::SequenceTooShort { len, required } => {
                write!(f, "sequence length {len} is shorter than the required {required}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::ConfigMismatch(msg) => write!(f, "config mismatch: {msg}"),
            Error::Undefined(msg) => f.write_str(msg),
            Error::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by NaN or infinite values.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}
