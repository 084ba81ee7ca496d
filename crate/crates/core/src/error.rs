//! Error type shared by every module in the crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = core::result::Result<T, Error>;

/// Errors emitted by tensor arithmetic, tokenization, data handling and
/// training.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two tensors that must agree in shape do not.
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    /// A reshape or constructor was given a shape whose element count does
    /// not match the data length.
    DataLength { expected: usize, got: usize },
    /// An axis argument is out of range for the tensor's rank.
    InvalidAxis { axis: usize, rank: usize },
    /// A forward or backward pass produced NaN or Inf.
    NonFinite { context: &'static str },
    /// A vector passed to cosine similarity has (near-)zero norm.
    ZeroNorm,
    /// Vocabulary construction was asked for fewer slots than the specials
    /// plus single-character pieces require.
    VocabTooSmall { requested: usize, needed: usize },
    /// Vocabulary construction received an empty corpus.
    EmptyCorpus,
    /// Fewer than two maskable vocabulary entries: random replacement is
    /// impossible.
    VocabNoReplacement,
    /// A token id is outside the vocabulary.
    TokenIdOutOfRange { id: u32, vocab_size: usize },
    /// A sequence is longer than the encoder's position table.
    SequenceTooLong { len: usize, max: usize },
    /// Label list length does not match the encoding it annotates.
    LabelLengthMismatch { labels: usize, expected: usize },
    /// A data file line failed to parse.
    Parse { line: usize, message: String },
    /// An architectural constraint was violated (with explanation).
    InvalidConfig(String),
    /// A distillation plan is incompatible with the model shapes in use.
    IncompatiblePlan(String),
    /// A hyperparameter is outside its legal range.
    InvalidHyperparameter { name: &'static str, message: String },
    /// A named parameter was missing when rebuilding a model.
    MissingParameter(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { left, right } => {
                write!(f, "shape mismatch: {left:?} vs {right:?}")
            }
            Error::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape ({expected} elements)")
            }
            Error::InvalidAxis { axis, rank } => {
                write!(f, "axis {axis} invalid for rank-{rank} tensor")
            }
            Error::NonFinite { context } => write!(f, "non-finite value produced in {context}"),
            Error::ZeroNorm => write!(f, "zero-norm vector"),
            Error::VocabTooSmall { requested, needed } => write!(
                f,
                "target vocabulary size {requested} below minimum {needed} (specials + alphabet)"
            ),
            Error::EmptyCorpus => write!(f, "empty corpus"),
            Error::VocabNoReplacement => {
                write!(f, "vocabulary has fewer than two non-special tokens")
            }
            Error::TokenIdOutOfRange { id, vocab_size } => {
                write!(f, "token id {id} out of range for vocabulary of {vocab_size}")
            }
            Error::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds maximum position {max}")
            }
            Error::LabelLengthMismatch { labels, expected } => {
                write!(f, "{labels} labels for {expected} slots")
            }
            Error::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::IncompatiblePlan(msg) => write!(f, "incompatible distillation plan: {msg}"),
            Error::InvalidHyperparameter { name, message } => {
                write!(f, "invalid hyperparameter {name}: {message}")
            }
            Error::MissingParameter(name) => write!(f, "missing parameter {name}"),
        }
    }
}

impl core::error::Error for Error {}
