//! Simulated RDMA fabric.

mod fabric;
mod imm;
mod profile;
mod trace;

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

pub use fabric::{Fabric, FabricStats};
pub use imm::{
    seq_distance, unwrap_seq, ImmKind, ImmLayout, ImmWord, EPOCH_MASK, HT_MAX_OPERAND, LL_MAX_EXPERTS, LL_MAX_OPERAND,
    SEQ_WINDOW,
};
pub use profile::{DeliveryOrder, TransportProfile};
pub use trace::{TraceEvent, TraceRecord};

use crate::error::Result;

/// A proxy thread's network identity: `(rank, thread index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub rank: u32,
    pub thread: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QpId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WorkId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QpInfo {
    pub id: QpId,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub nic: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionEvent {
    /// Sender-side completion of a posted write or atomic.
    Sent { work: WorkId, qp: QpId },
    /// A write-with-immediate landed at this endpoint.
    Received { work: WorkId, qp: QpId, src: Endpoint, imm: Option<u32>, length: u32 },
}

/// Host-resident 64-bit counters, the target of both hardware and emulated
/// atomics. Readable from any thread.
#[derive(Debug)]
pub struct HostCounters {
    slots: Box<[AtomicI64]>,
}

impl HostCounters {
    pub fn new(len: usize) -> Self {
        HostCounters { slots: (0..len).map(|_| AtomicI64::new(0)).collect() }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, slot: usize) -> i64 {
        self.slots[slot].load(Ordering::Acquire)
    }

    /// Returns the value after the add.
    pub fn add(&self, slot: usize, value: i64) -> i64 {
        self.slots[slot].fetch_add(value, Ordering::AcqRel) + value
    }

    pub fn snapshot(&self) -> Vec<i64> {
        self.slots.iter().map(|s| s.load(Ordering::Acquire)).collect()
    }
}

/// What a proxy thread needs from the network.
pub trait Transport {
    fn profile(&self) -> TransportProfile;
    fn now(&self) -> u64;
    fn event_no(&self) -> u64;
    fn post_write(
        &mut self,
        qp: QpId,
        src_offset: u64,
        remote_addr: u64,
        length: u32,
        imm: Option<u32>,
    ) -> Result<WorkId>;
    fn post_atomic(&mut self, qp: QpId, remote_addr: u64, value: i64) -> Result<WorkId>;
    fn poll_cq_into(&mut self, endpoint: Endpoint, out: &mut Vec<CompletionEvent>);
}

impl Transport for Fabric {
    fn profile(&self) -> TransportProfile {
        Fabric::profile(self).clone()
    }

    fn now(&self) -> u64 {
        Fabric::now(self)
    }

    fn event_no(&self) -> u64 {
        Fabric::event_no(self)
    }

    fn post_write(
        &mut self,
        qp: QpId,
        src_offset: u64,
        remote_addr: u64,
        length: u32,
        imm: Option<u32>,
    ) -> Result<WorkId> {
        Fabric::post_write(self, qp, src_offset, remote_addr, length, imm)
    }

    fn post_atomic(&mut self, qp: QpId, remote_addr: u64, value: i64) -> Result<WorkId> {
        Fabric::post_atomic(self, qp, remote_addr, value)
    }

    fn poll_cq_into(&mut self, endpoint: Endpoint, out: &mut Vec<CompletionEvent>) {
        Fabric::poll_cq_into(self, endpoint, out)
    }
}

/// Thread-safe submission handle: proxy threads on real OS threads share one
/// fabric, and the mutex serializes their operations into the event engine.
#[derive(Clone)]
pub struct SharedFabric(Arc<Mutex<Fabric>>);

impl SharedFabric {
    pub fn new(fabric: Fabric) -> Self {
        SharedFabric(Arc::new(Mutex::new(fabric)))
    }

    pub fn lock(&self) -> MutexGuard<'_, Fabric> {
        self.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Recovers the fabric once every other handle is dropped.
    pub fn into_inner(self) -> std::result::Result<Fabric, SharedFabric> {
        Arc::try_unwrap(self.0).map(|m| m.into_inner().unwrap_or_else(|p| p.into_inner())).map_err(SharedFabric)
    }
}

impl Transport for SharedFabric {
    fn profile(&self) -> TransportProfile {
        self.lock().profile().clone()
    }

    fn now(&self) -> u64 {
        self.lock().now()
    }

    fn event_no(&self) -> u64 {
        self.lock().event_no()
    }

    fn post_write(
        &mut self,
        qp: QpId,
        src_offset: u64,
        remote_addr: u64,
        length: u32,
        imm: Option<u32>,
    ) -> Result<WorkId> {
        self.lock().post_write(qp, src_offset, remote_addr, length, imm)
    }

    fn post_atomic(&mut self, qp: QpId, remote_addr: u64, value: i64) -> Result<WorkId> {
        self.lock().post_atomic(qp, remote_addr, value)
    }

    fn poll_cq_into(&mut self, endpoint: Endpoint, out: &mut Vec<CompletionEvent>) {
        self.lock().poll_cq_into(endpoint, out)
    }
}
