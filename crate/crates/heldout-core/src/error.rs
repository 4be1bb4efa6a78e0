//! Error type shared by every module in the crate.

use alloc::string::String;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

/// Structured failure modes. Variants carry enough context to name the
/// offending operation and shapes in the message.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An op was handed tensors whose shapes do not conform to it.
    ShapeMismatch { op: &'static str, detail: String },
    /// An op attribute is out of its documented range.
    InvalidArgument { op: &'static str, detail: String },
    /// `backward` was called on a non-scalar root.
    NonScalarRoot { len: usize },
    /// An optimizer step found a parameter with no gradient.
    MissingGrad { param: String },
    /// A dataset or split violated a protocol precondition.
    Protocol(String),
    /// Metrics were asked to evaluate a set with no positive examples.
    NoPositives,
    /// A score passed to the metrics layer was NaN or infinite.
    NonFiniteScore { index: usize },
    /// A model is missing the head required by the requested task.
    MissingHead { head: &'static str },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            Error::InvalidArgument { op, detail } => {
                write!(f, "invalid argument to {op}: {detail}")
            }
            Error::NonScalarRoot { len } => {
                write!(f, "backward root must be scalar, got {len} elements")
            }
            Error::MissingGrad { param } => {
                write!(f, "parameter {param} has no gradient; run backward first")
            }
            Error::Protocol(detail) => write!(f, "protocol violation: {detail}"),
            Error::NoPositives => {
                write!(f, "no positive (anomalous) examples: recall is undefined")
            }
            Error::NonFiniteScore { index } => {
                write!(f, "score at index {index} is not finite")
            }
            Error::MissingHead { head } => write!(f, "model has no {head} head"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
