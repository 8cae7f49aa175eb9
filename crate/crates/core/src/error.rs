//! Error types shared across the crate.
//!
//! The CLI maps these onto stable exit codes: 0 ok, 2 I/O or format,
//! 3 shape, 4 configuration, 5 numeric failure.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraftError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed archive header (bad length prefix, bad JSON, bad magic).
    #[error("archive header: {0}")]
    ArchiveHeader(String),

    /// Payload shorter than the byte ranges declared in the header.
    #[error("archive truncated: declared end {declared} but payload has {actual} bytes")]
    ArchiveTruncated { declared: usize, actual: usize },

    /// Two header entries claim overlapping byte ranges.
    #[error("archive byte ranges overlap: {first:?} and {second:?}")]
    ArchiveOverlap { first: String, second: String },

    /// The same tensor name appears twice in the header.
    #[error("archive declares duplicate tensor name {0:?}")]
    ArchiveDuplicate(String),

    /// Only little-endian F32 payloads are supported.
    #[error("unsupported dtype {dtype:?} for tensor {name:?} (only F32 is accepted)")]
    ArchiveDtype { name: String, dtype: String },

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("tensor {name:?} has shape {got:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("checkpoint version {got} not supported (expected {expected})")]
    VersionMismatch { expected: u32, got: u32 },

    /// Dataset file rejected: wrong length, bad magic, bad record, count mismatch.
    #[error("data format: {0}")]
    DataFormat(String),

    #[error("token id {id} out of vocabulary (vocab size {vocab})")]
    TokenOutOfRange { id: u32, vocab: u32 },

    #[error("sequence length {len} exceeds maximum positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    /// Runtime dimension mismatch between tensors.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Invalid configuration or invalid flag combination.
    #[error("config: {0}")]
    Config(String),

    /// NaN or infinity encountered; the message names the offending tensor.
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl GraftError {
    /// Stable CLI exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            GraftError::Io(_)
            | GraftError::ArchiveHeader(_)
            | GraftError::ArchiveTruncated { .. }
            | GraftError::ArchiveOverlap { .. }
            | GraftError::ArchiveDuplicate(_)
            | GraftError::ArchiveDtype { .. }
            | GraftError::MissingTensor(_)
            | GraftError::VersionMismatch { .. }
            | GraftError::DataFormat(_)
            | GraftError::TokenOutOfRange { .. } => 2,
            GraftError::TensorShape { .. }
            | GraftError::SequenceTooLong { .. }
            | GraftError::ShapeMismatch(_) => 3,
            GraftError::Config(_) => 4,
            GraftError::NonFinite(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, GraftError>;
