//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor op produced a NaN or infinity. Carries the op identity.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    /// Backward was called on a tape that has already been consumed.
    #[error("gradient tape already consumed; build a new forward pass")]
    TapeConsumed,

    /// Backward target is not a scalar.
    #[error("backward target must be a scalar, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input data dimensionality does not match the model.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("codebook index {index} out of range (K = {k})")]
    IndexOutOfRange { index: usize, k: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("bad magic: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 4], got: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    /// Structurally broken file: truncation, shape inconsistency, bad field.
    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("frame `{0}` has no group assignment")]
    UnknownGroup(String),

    #[error("group `{0}` has no frames")]
    EmptyGroup(String),

    #[error("frame `{0}` has no reference feature row")]
    MissingReference(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn non_finite(op: impl Into<String>) -> Self {
        Error::NonFinite { op: op.into() }
    }
}
