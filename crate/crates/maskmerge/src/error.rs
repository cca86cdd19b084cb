//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by tensor math, model evaluation, estimation, merging,
/// and the file container.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("token id {token} out of range (vocab size {vocab_size})")]
    TokenOutOfRange { token: usize, vocab_size: usize },

    #[error("label {label} out of range for task {task_id} ({n_classes} classes)")]
    LabelOutOfRange {
        label: usize,
        task_id: String,
        n_classes: usize,
    },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("no head for task {task_id}")]
    MissingHead { task_id: String },

    #[error("missing parameter {name}")]
    MissingParam { name: String },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("checkpoints are not siblings: {0}")]
    NotSiblings(String),

    #[error("head {task_id} present in multiple inputs with different values; cannot carry verbatim")]
    ConflictingHeads { task_id: String },

    #[error("digest mismatch: {context} (expected {expected}, found {found})")]
    DigestMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("need {needed} examples, got {got}")]
    NotEnoughExamples { needed: usize, got: usize },

    #[error("examples mix task ids {first} and {second}")]
    MixedTasks { first: String, second: String },

    #[error("merge needs at least two models, got {0}")]
    TooFewModels(usize),

    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("invalid container file: {0}")]
    BadContainer(String),

    #[error("invalid protocol config: {0}")]
    BadProtocolConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
