//! Shared error type for every layer of the library.

use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("rank {rank} out of range for a {rows}x{cols} matrix")]
    RankOutOfRange { rank: usize, rows: usize, cols: usize },
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("decomposition plan error: {0}")]
    Plan(String),
    #[error("collective error: {0}")]
    Collective(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("cache capacity exceeded: {0}")]
    Capacity(String),
    #[error("cache payload error: {0}")]
    Payload(String),
    #[error("unknown sequence id {0}")]
    UnknownSequence(u64),
    #[error("replay contract violation: {0}")]
    Replay(String),
    #[error("traffic reconciliation failed: {0}")]
    Reconcile(String),
}

pub type Result<T> = std::result::Result<T, Error>;
