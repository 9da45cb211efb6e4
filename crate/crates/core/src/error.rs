//! Crate-wide error type.

use crate::ItemId;

/// Errors surfaced by pipeline operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("need at least 2 users, got {0}")]
    TooFewUsers(usize),

    #[error("sequence of length {len} cannot be split into history plus {n} future items")]
    SequenceTooShort { len: usize, n: usize },

    #[error("empty embedding matrix")]
    EmptyEmbeddings,

    #[error("embedding dim {dim} exceeds item count {count}")]
    DimTooLarge { dim: usize, count: usize },

    #[error("unknown item {0}")]
    UnknownItem(ItemId),

    #[error("invalid category path {0}")]
    InvalidPath(String),

    #[error("item {item} not in encoder vocabulary")]
    UnknownSourceItem { item: ItemId },

    #[error("source length {len} exceeds encoder maximum {max}")]
    SourceTooLong { len: usize, max: usize },

    #[error("training diverged: non-finite loss ({context})")]
    NonFiniteLoss { context: String },

    #[error("empty sub-library for category {0}")]
    EmptySubLibrary(String),

    #[error("no evaluable users")]
    NoEvaluableUsers,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
