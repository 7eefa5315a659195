use thiserror::Error;

/// Errors produced by the numeric core, the models and the training loops.
#[derive(Debug, Error)]
pub enum RiffError {
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("malformed token sequence: {0}")]
    MalformedSequence(String),

    #[error("expected exactly one MASK token, found {0}")]
    MaskCount(usize),

    #[error("input of {len} tokens exceeds the limit of {max}")]
    TooLong { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("finite-difference probe produced a non-finite value at coordinate {coordinate}")]
    FiniteDiff { coordinate: usize },

    #[error("degenerate sample batch: all weights have zero mass")]
    DegenerateBatch,

    #[error("enumeration of {vocab}^{max_len} sequences exceeds the guard of {guard}")]
    EnumerationGuard { vocab: usize, max_len: usize, guard: u64 },

    #[error("label {label} has {available} examples, {required} required")]
    InsufficientExamples { label: usize, available: usize, required: usize },

    #[error("paraphrase cache miss for example {0}")]
    CacheMiss(usize),

    #[error("invalid run configuration: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("external scorer: {0}")]
    Adapter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = RiffError> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> RiffError {
    RiffError::InvalidArgument { name, reason: reason.into() }
}
