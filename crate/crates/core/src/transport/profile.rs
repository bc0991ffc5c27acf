use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Delivery order offered by the simulated NIC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryOrder {
    /// Reliable connected: per-QP FIFO delivery.
    Ordered,
    /// Scalable reliable datagram: reliable, no order.
    Unordered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportProfile {
    pub ordering: DeliveryOrder,
    pub hw_atomics: bool,
    pub rtt_ns: u64,
    #[serde(default)]
    pub reorder_prob: f64,
    #[serde(default)]
    pub jitter_ns: u64,
    pub max_qps: u32,
    pub nics_per_rank: u32,
    /// Optional per-NIC serialization cap.
    #[serde(default)]
    pub nic_bytes_per_sec: Option<u64>,
}

impl TransportProfile {
    /// RC-like NIC: ordered, hardware atomics.
    pub fn rc(rtt_ns: u64) -> Self {
        TransportProfile {
            ordering: DeliveryOrder::Ordered,
            hw_atomics: true,
            rtt_ns,
            reorder_prob: 0.0,
            jitter_ns: 0,
            max_qps: 256,
            nics_per_rank: 1,
            nic_bytes_per_sec: None,
        }
    }

    /// EFA-like NIC: unordered, no hardware atomics, 256 QPs per NIC.
    pub fn srd(rtt_ns: u64, reorder_prob: f64, jitter_ns: u64) -> Self {
        TransportProfile {
            ordering: DeliveryOrder::Unordered,
            hw_atomics: false,
            rtt_ns,
            reorder_prob,
            jitter_ns,
            max_qps: 256,
            nics_per_rank: 1,
            nic_bytes_per_sec: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.reorder_prob) || self.reorder_prob.is_nan() {
            return Err(Error::config(format!("reorder_prob {} outside [0, 1]", self.reorder_prob)));
        }
        if self.ordering == DeliveryOrder::Ordered && self.reorder_prob > 0.0 {
            return Err(Error::config("ordered transport cannot have reorder_prob > 0"));
        }
        if self.max_qps == 0 || self.nics_per_rank == 0 {
            return Err(Error::config("max_qps and nics_per_rank must be positive"));
        }
        if self.nic_bytes_per_sec == Some(0) {
            return Err(Error::config("nic_bytes_per_sec must be positive when set"));
        }
        Ok(())
    }

    pub fn one_way_ns(&self) -> u64 {
        self.rtt_ns / 2
    }
}
