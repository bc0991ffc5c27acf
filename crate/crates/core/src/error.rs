use thiserror::Error;

use crate::transport::QpId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("channel shut down")]
    Shutdown,

    /// A caller broke an API contract (consumer bug, bad imm, duplicate sequence, ...).
    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("access fault on rank {rank}: offset {offset:#x} + {length} bytes outside region of {region_len} bytes")]
    Fault { rank: u32, offset: u64, length: u64, region_len: u64 },

    #[error("connection error: {0}")]
    Connection(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("handshake error: {0}")]
    Handshake(String),

    #[error("simulated time regression: requested {requested} ns, clock at {now} ns")]
    TimeRegression { requested: u64, now: u64 },

    #[error("watchdog expired: {0}")]
    Watchdog(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("no queue pair {0:?}")]
    UnknownQp(QpId),
}

impl Error {
    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
