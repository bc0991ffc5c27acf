//! Scenario-driven benchmark harness for `ep-proxy`.
//!
//! A scenario file picks a workload, a topology and a transport profile;
//! [`run`] executes it, audits every iteration and returns a text report.

pub mod runner;
pub mod scenario;

use thiserror::Error;

pub use runner::{run, RunOptions, RunOutput, TraceSel};
pub use scenario::{Kind, ModeSel, Scenario};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BenchError {
    pub fn exit_code(&self) -> u8 {
        match self {
            BenchError::Config(_) => 2,
            BenchError::Invariant(_) => 3,
            BenchError::Io(_) => 1,
        }
    }
}

impl From<ep_proxy::Error> for BenchError {
    fn from(e: ep_proxy::Error) -> Self {
        match e {
            ep_proxy::Error::Config(msg) => BenchError::Config(msg),
            other => BenchError::Invariant(other.to_string()),
        }
    }
}
