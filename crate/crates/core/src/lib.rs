//! CPU-proxy expert-parallel communication over a simulated RDMA fabric.
//!
//! The producer side (emulated GPU threads) hands 16-byte [`TransferCmd`]s to
//! per-rank proxy threads through bounded SPSC FIFO channels. Proxy threads
//! translate symmetric-memory offsets, pick queue pairs and post writes on a
//! discrete-event fabric whose delivery may be ordered or unordered.
//! Receivers restore the ordering guarantees the MoE dispatch/combine
//! kernels need from 32-bit immediate data.

pub mod command;
pub mod delivery;
pub mod engine;
pub mod error;
pub mod proxy;
pub mod transport;

pub use command::TransferCmd;
pub use error::{Error, Result};
