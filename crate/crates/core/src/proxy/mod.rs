//! The per-rank CPU proxy.
//!
//! Each rank runs `num_threads` proxy threads. Thread `t` owns a contiguous
//! block of `channels_per_thread` FIFO channels and its own queue pairs,
//! which connect only to thread `t` of other ranks. Threads share nothing
//! except the node-local barrier rendezvous.

mod barrier;
mod cluster;
mod handshake;
mod script;
mod worker;

use serde::{Deserialize, Serialize};

pub use barrier::BarrierHub;
pub use cluster::{Cluster, Device, GpuProgram};
pub use handshake::{HandshakeRecord, PeerTable, RecordKind, RemoteRegion};
pub use script::CommandScript;
pub use worker::{ProxyThread, ThreadStats};

use crate::command::{DEFAULT_MAX_INFLIGHT, MAX_CHANNELS, MAX_RANKS};
use crate::delivery::{CounterLayout, Enforcement};
use crate::error::{Error, Result};
use crate::transport::{ImmLayout, TransportProfile, LL_MAX_EXPERTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "ll")]
    LowLatency,
    #[serde(rename = "ht")]
    HighThroughput,
}

impl From<Mode> for ImmLayout {
    fn from(m: Mode) -> Self {
        match m {
            Mode::LowLatency => ImmLayout::LowLatency,
            Mode::HighThroughput => ImmLayout::HighThroughput,
        }
    }
}

/// When a served command counts as complete for `check_completion`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionPoint {
    AtPop,
    AtTransportCompletion,
}

/// Completion point per data-moving kind. Drain and Barrier always complete
/// when their protocol finishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletionPolicy {
    pub write: CompletionPoint,
    pub atomic: CompletionPoint,
}

impl Default for CompletionPolicy {
    fn default() -> Self {
        CompletionPolicy { write: CompletionPoint::AtPop, atomic: CompletionPoint::AtPop }
    }
}

/// Configuration shared by every rank's proxy.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyConfig {
    pub num_threads: u32,
    pub channels_per_thread: u32,
    pub gpus_per_node: u32,
    pub nodes: u32,
    pub mode: Mode,
    pub completion: CompletionPolicy,
    pub enforcement: Enforcement,
    pub fifo_capacity: usize,
    /// Bytes of each rank's symmetric region.
    pub region_len: usize,
    /// LL fence key of a write is `dst_offset / ll_window_bytes`.
    pub ll_window_bytes: u32,
    pub ll_keys: u32,
    /// Emulate atomics with immediate data even when the NIC has them.
    pub emulate_atomics: bool,
}

impl ProxyConfig {
    pub fn new(nodes: u32, gpus_per_node: u32, mode: Mode) -> Self {
        ProxyConfig {
            num_threads: 4,
            channels_per_thread: 2,
            gpus_per_node,
            nodes,
            mode,
            completion: CompletionPolicy::default(),
            enforcement: Enforcement::Receiver,
            fifo_capacity: DEFAULT_MAX_INFLIGHT,
            region_len: 1 << 20,
            ll_window_bytes: 1 << 20,
            ll_keys: 1,
            emulate_atomics: false,
        }
    }

    pub fn ep_size(&self) -> u32 {
        self.nodes * self.gpus_per_node
    }

    pub fn channels(&self) -> u32 {
        self.num_threads * self.channels_per_thread
    }

    pub fn thread_of_channel(&self, channel: u32) -> u32 {
        channel / self.channels_per_thread
    }

    pub fn node_of(&self, rank: u32) -> u32 {
        rank / self.gpus_per_node
    }

    pub fn local_of(&self, rank: u32) -> u32 {
        rank % self.gpus_per_node
    }

    pub fn rank_at(&self, node: u32, local: u32) -> u32 {
        node * self.gpus_per_node + local
    }

    pub fn counter_layout(&self) -> CounterLayout {
        CounterLayout::new(self.ep_size(), self.ll_keys, self.channels())
    }

    /// HT queue pairs per node: one per channel to every same-rail peer,
    /// for every GPU on the node.
    pub fn ht_qps_per_node(&self) -> u64 {
        self.channels() as u64 * self.gpus_per_node as u64 * self.nodes as u64
    }

    /// Checks the HT QP count against the NIC budget.
    pub fn check_qp_budget(&self, profile: &TransportProfile) -> Result<()> {
        if self.mode != Mode::HighThroughput {
            return Ok(());
        }
        let need = self.ht_qps_per_node();
        let budget = profile.max_qps as u64 * profile.nics_per_rank as u64;
        if need > budget {
            return Err(Error::Config(format!(
                "HT mode needs channels ({}) x gpus_per_node ({}) x nodes ({}) = {need} QPs per node, \
                 over the budget max_qps ({}) x nics ({}) = {budget}",
                self.channels(),
                self.gpus_per_node,
                self.nodes,
                profile.max_qps,
                profile.nics_per_rank
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_threads", self.num_threads),
            ("channels_per_thread", self.channels_per_thread),
            ("gpus_per_node", self.gpus_per_node),
            ("nodes", self.nodes),
            ("ll_window_bytes", self.ll_window_bytes),
            ("ll_keys", self.ll_keys),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.channels() > MAX_CHANNELS {
            return Err(Error::Config(format!("{} channels exceed the limit of {MAX_CHANNELS}", self.channels())));
        }
        if self.ep_size() > MAX_RANKS {
            return Err(Error::Config(format!("{} ranks exceed the limit of {MAX_RANKS}", self.ep_size())));
        }
        if self.ll_keys > LL_MAX_EXPERTS {
            return Err(Error::Config(format!("ll_keys {} exceeds {LL_MAX_EXPERTS}", self.ll_keys)));
        }
        if !self.fifo_capacity.is_power_of_two() {
            return Err(Error::Config(format!("fifo_capacity {} is not a power of two", self.fifo_capacity)));
        }
        if self.region_len as u64 > u32::MAX as u64 {
            return Err(Error::Config("region_len must fit 32-bit offsets".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ht(channels_per_thread: u32, gpus: u32, nodes: u32) -> ProxyConfig {
        ProxyConfig { num_threads: 1, channels_per_thread, ..ProxyConfig::new(nodes, gpus, Mode::HighThroughput) }
    }

    #[test]
    fn ht_qp_formula() {
        let profile = TransportProfile::srd(10_000, 0.0, 0);
        let four = ht(8, 8, 4);
        assert_eq!(four.ht_qps_per_node(), 256);
        four.check_qp_budget(&profile).unwrap();
        let eight = ht(8, 8, 8);
        assert_eq!(eight.ht_qps_per_node(), 512);
        let err = eight.check_qp_budget(&profile).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("512") && m.contains("256")), "{err}");
        let mut two_nics = profile.clone();
        two_nics.nics_per_rank = 2;
        eight.check_qp_budget(&two_nics).unwrap();
    }

    #[test]
    fn topology_helpers() {
        let c = ProxyConfig::new(2, 4, Mode::LowLatency);
        assert_eq!(c.ep_size(), 8);
        assert_eq!((c.node_of(6), c.local_of(6)), (1, 2));
        assert_eq!(c.rank_at(1, 2), 6);
        assert_eq!(c.thread_of_channel(5), 2);
    }
}
