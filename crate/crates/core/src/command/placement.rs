//! Latency model for where the FIFO counters live.
//!
//! A read of a counter that resides on the other side of the host/device
//! link costs `crossing_ns`; writes are posted and free. The split
//! placement keeps each side's own counter local, so only cache refreshes
//! cross. Co-locating both counters makes one side pay on every access.

use super::fifo::ChannelStats;

pub const DEFAULT_CROSSING_NS: u64 = 600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CounterPlacement {
    /// Tail in device memory, head in host memory.
    Split,
    BothOnHost,
    BothOnDevice,
}

impl CounterPlacement {
    pub const ALL: [CounterPlacement; 3] =
        [CounterPlacement::Split, CounterPlacement::BothOnHost, CounterPlacement::BothOnDevice];

    /// Number of link-crossing reads implied by `stats` under this placement.
    pub fn crossings(self, stats: &ChannelStats) -> u64 {
        match self {
            CounterPlacement::Split => stats.producer_head_refreshes + stats.consumer_tail_refreshes,
            // Producer reads its own tail on every push, across the link.
            CounterPlacement::BothOnHost => stats.pushes + stats.producer_head_refreshes,
            // Consumer reads its own head on every poll and pop, across the link.
            CounterPlacement::BothOnDevice => stats.polls + stats.pops + stats.consumer_tail_refreshes,
        }
    }

    pub fn latency_ns(self, stats: &ChannelStats, crossing_ns: u64) -> u64 {
        self.crossings(stats) * crossing_ns
    }
}
