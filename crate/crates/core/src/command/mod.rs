//! Producer-to-proxy control path: command descriptors and the FIFO channels
//! that carry them.

mod cmd;
mod fifo;
mod placement;
mod stress;

pub use cmd::{BarrierScope, CmdFlags, CmdKind, TransferCmd, CMD_BYTES, DRAIN_ALL, MAX_CHANNELS, MAX_RANKS};
pub use fifo::{
    channel, ChannelStats, CmdIndex, FifoChannel, FifoConsumer, FifoProducer, TryPush, DEFAULT_MAX_INFLIGHT,
};
pub use placement::{CounterPlacement, DEFAULT_CROSSING_NS};
pub use stress::{fifo_stress, ChannelThroughput, StressReport};
