use thiserror::Error;

use crate::engine::RealCommId;
use crate::upperhalf::Vid;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("simulation halted")]
    Halted,
    #[error("schedule exhausted: decision {index} out of range ({enabled} enabled) at cursor {cursor}")]
    ScheduleExhausted { cursor: usize, index: usize, enabled: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid rank {rank} for communicator {comm:?}")]
    InvalidRank { rank: u32, comm: RealCommId },
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("unknown communicator {0:?}")]
    UnknownComm(RealCommId),
    #[error("virtual handle {0} is not bound")]
    UnboundHandle(Vid),
    #[error("checkpoint already in progress")]
    AlreadyInProgress,
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("deadlock: {0}")]
    Deadlock(String),
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("unsupported image version {0}")]
    UnsupportedVersion(u8),
    #[error("corrupt image: {0}")]
    Corrupt(String),
    #[error("state contains a real communicator id ({0:?}); refusing to serialize")]
    RealIdInState(RealCommId),
    #[error("image set is missing rank {0}")]
    MissingRank(u32),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
