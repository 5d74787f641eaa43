//! Crate-wide error type.

use thiserror::Error;

use crate::graph_index::VectorId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("index is empty")]
    EmptyIndex,

    #[error("unknown vector id {0}")]
    UnknownId(VectorId),

    #[error("vector id {0} is not live")]
    NotLive(VectorId),

    #[error("index capacity exhausted")]
    CapacityExhausted,

    #[error("corrupt record at id {id}: {reason}")]
    CorruptRecord { id: u32, reason: String },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("device queue depth exceeded: submitted {submitted}, depth {depth}")]
    QueueDepthExceeded { submitted: usize, depth: usize },

    #[error("stale or closed device handle")]
    StaleHandle,

    #[error("device error: {0}")]
    Device(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
