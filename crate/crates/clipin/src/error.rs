//! Crate-wide error type.
//!
//! Contract violations (bad shapes, out-of-range tokens, malformed records)
//! surface as typed errors rather than panics so the CLI can map them to
//! exit codes and tests can assert on the exact failure.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // ---- numerics ----
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("l2_normalize: row {row} has near-zero norm ({norm:.3e})")]
    ZeroNormRow { row: usize, norm: f64 },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("token id {token} out of range for vocab size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence {index} contains only padding")]
    PadOnlySequence { index: usize },

    // ---- losses ----
    #[error("contrastive loss needs a batch of at least {min}, got {got}")]
    BatchTooSmall { got: usize, min: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("loss component {0} is enabled but its inputs were not supplied")]
    MissingComponent(&'static str),

    // ---- augment / data ----
    #[error("pixel value {value} outside [0,1] at flat index {index}")]
    OutOfRangePixels { index: usize, value: f64 },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,

    // ---- train ----
    #[error("non-finite loss at step {step}; breakdown: {dump}")]
    NonFiniteLoss { step: u64, dump: String },
    #[error("training step {step}: {source}")]
    Step { step: u64, source: Box<Error> },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    // ---- eval ----
    #[error("class {0} is single-valued in the train split")]
    DegenerateClass(usize),
    #[error("scores cover only a single class")]
    SingleClass,
    #[error("no positive labels in ranking")]
    NoPositives,
    #[error("prompt list is empty")]
    EmptyPrompts,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
