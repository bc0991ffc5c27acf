//! Discrete-event fabric: queue pairs, write-with-immediate, optional
//! hardware atomics, completion queues and pluggable delivery order.
//!
//! Timing model: a message posted at `t` is delivered at
//! `t + rtt/2 + U(0, jitter)` (plus serialization when a NIC bandwidth cap
//! is set) and its sender completion fires `rtt - rtt/2` after delivery.
//! Ordered profiles clamp delivery to per-QP post order. Unordered profiles
//! additionally hold each message with probability `reorder_prob` and push
//! it behind the next message posted on the same QP, recursively.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::trace::{TraceEvent, TraceRecord};
use super::{CompletionEvent, DeliveryOrder, Endpoint, HostCounters, QpId, QpInfo, TransportProfile, WorkId};
use crate::error::{Error, Result};

const REGION_BASE: u64 = 0x0000_1000_0000_0000;
const REGION_STRIDE: u64 = 0x0000_0010_0000_0000;
const COUNTER_BASE: u64 = 0x0000_8000_0000_0000;

struct RankMemory {
    base: u64,
    bytes: Vec<u8>,
    counter_base: u64,
    counters: Arc<HostCounters>,
}

enum Payload {
    Write { dst_offset: usize, data: Vec<u8>, imm: Option<u32> },
    Atomic { slot: usize, value: i64 },
}

struct Message {
    qp: QpId,
    payload: Payload,
    length: u32,
    deliver_at: u64,
    version: u32,
    delivered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Action {
    Deliver,
    Cqe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Scheduled {
    time: u64,
    seq: u64,
    action: Action,
    work: u64,
    version: u32,
}

struct QpState {
    info: QpInfo,
    last_delivery: u64,
    held: Vec<WorkId>,
}

/// Running totals, mainly for conservation checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FabricStats {
    pub posted_writes: u64,
    pub posted_atomics: u64,
    pub delivered_writes: u64,
    pub delivered_atomics: u64,
    pub sent_events: u64,
    pub received_events: u64,
    pub bytes: u64,
}

pub struct Fabric {
    profile: TransportProfile,
    rng: ChaCha8Rng,
    now: u64,
    next_seq: u64,
    next_work: u64,
    event_no: u64,
    heap: BinaryHeap<Reverse<Scheduled>>,
    messages: HashMap<u64, Message>,
    qps: Vec<QpState>,
    qps_per_nic: HashMap<(u32, u32), u32>,
    nic_busy_until: HashMap<(u32, u32), u64>,
    queues: HashMap<Endpoint, VecDeque<CompletionEvent>>,
    ranks: Vec<RankMemory>,
    trace: Option<Vec<TraceRecord>>,
    stats: FabricStats,
}

impl Fabric {
    pub fn new(profile: TransportProfile, seed: u64) -> Result<Self> {
        profile.validate()?;
        Ok(Fabric {
            profile,
            rng: ChaCha8Rng::seed_from_u64(seed),
            now: 0,
            next_seq: 0,
            next_work: 0,
            event_no: 0,
            heap: BinaryHeap::new(),
            messages: HashMap::new(),
            qps: Vec::new(),
            qps_per_nic: HashMap::new(),
            nic_busy_until: HashMap::new(),
            queues: HashMap::new(),
            ranks: Vec::new(),
            trace: None,
            stats: FabricStats::default(),
        })
    }

    pub fn profile(&self) -> &TransportProfile {
        &self.profile
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn stats(&self) -> FabricStats {
        self.stats
    }

    /// Simulated time in nanoseconds.
    pub fn now(&self) -> u64 {
        self.now
    }

    /// Count of post/deliver/CQE events so far. With tracing enabled from the
    /// start, trace record `i` is event number `i`.
    pub fn event_no(&self) -> u64 {
        self.event_no
    }

    /// Registers a rank's symmetric region and host counter array.
    pub fn add_rank(&mut self, region_len: usize, counter_slots: usize) -> u32 {
        let rank = self.ranks.len() as u64;
        self.ranks.push(RankMemory {
            base: REGION_BASE + rank * REGION_STRIDE,
            bytes: vec![0; region_len],
            counter_base: COUNTER_BASE + rank * REGION_STRIDE,
            counters: Arc::new(HostCounters::new(counter_slots)),
        });
        rank as u32
    }

    pub fn num_ranks(&self) -> u32 {
        self.ranks.len() as u32
    }

    fn rank_mem(&self, rank: u32) -> Result<&RankMemory> {
        self.ranks.get(rank as usize).ok_or_else(|| Error::Connection(format!("unknown rank {rank}")))
    }

    pub fn region_base(&self, rank: u32) -> Result<u64> {
        Ok(self.rank_mem(rank)?.base)
    }

    pub fn counter_base(&self, rank: u32) -> Result<u64> {
        Ok(self.rank_mem(rank)?.counter_base)
    }

    pub fn region(&self, rank: u32) -> &[u8] {
        &self.ranks[rank as usize].bytes
    }

    pub fn region_mut(&mut self, rank: u32) -> &mut [u8] {
        &mut self.ranks[rank as usize].bytes
    }

    pub fn counters(&self, rank: u32) -> &Arc<HostCounters> {
        &self.ranks[rank as usize].counters
    }

    /// Creates a sender-side queue pair on `nic` of `src.rank`.
    pub fn connect(&mut self, src: Endpoint, dst: Endpoint, nic: u32) -> Result<QpId> {
        self.rank_mem(src.rank)?;
        self.rank_mem(dst.rank)?;
        if nic >= self.profile.nics_per_rank {
            return Err(Error::Connection(format!("rank {} has no NIC {nic}", src.rank)));
        }
        let used = self.qps_per_nic.entry((src.rank, nic)).or_insert(0);
        if *used >= self.profile.max_qps {
            return Err(Error::config(format!(
                "QP budget exhausted on rank {} NIC {nic}: max_qps = {}",
                src.rank, self.profile.max_qps
            )));
        }
        *used += 1;
        let id = QpId(self.qps.len() as u32);
        self.qps.push(QpState { info: QpInfo { id, src, dst, nic }, last_delivery: 0, held: Vec::new() });
        self.queues.entry(src).or_default();
        self.queues.entry(dst).or_default();
        Ok(id)
    }

    pub fn qp_info(&self, qp: QpId) -> Result<QpInfo> {
        self.qps.get(qp.0 as usize).map(|q| q.info).ok_or(Error::UnknownQp(qp))
    }

    pub fn num_qps(&self) -> usize {
        self.qps.len()
    }

    /// QPs created on `rank`, all NICs.
    pub fn qps_on_rank(&self, rank: u32) -> u32 {
        self.qps_per_nic.iter().filter(|((r, _), _)| *r == rank).map(|(_, n)| n).sum()
    }

    /// Posts an RDMA write of `length` bytes from `src_offset` in the sender's
    /// region to the absolute `remote_addr` in the destination region.
    pub fn post_write(
        &mut self,
        qp: QpId,
        src_offset: u64,
        remote_addr: u64,
        length: u32,
        imm: Option<u32>,
    ) -> Result<WorkId> {
        let info = self.qp_info(qp)?;
        let src_mem = self.rank_mem(info.src.rank)?;
        let src_end = src_offset.checked_add(length as u64);
        if src_end.is_none_or(|end| end > src_mem.bytes.len() as u64) {
            return Err(Error::Fault {
                rank: info.src.rank,
                offset: src_offset,
                length: length as u64,
                region_len: src_mem.bytes.len() as u64,
            });
        }
        let dst_mem = self.rank_mem(info.dst.rank)?;
        let dst_offset = remote_addr.wrapping_sub(dst_mem.base);
        let region_len = dst_mem.bytes.len() as u64;
        if remote_addr < dst_mem.base || dst_offset.checked_add(length as u64).is_none_or(|end| end > region_len) {
            return Err(Error::Fault { rank: info.dst.rank, offset: dst_offset, length: length as u64, region_len });
        }
        let start = src_offset as usize;
        let data = src_mem.bytes[start..start + length as usize].to_vec();
        self.stats.posted_writes += 1;
        self.stats.bytes += length as u64;
        Ok(self.enqueue(qp, Payload::Write { dst_offset: dst_offset as usize, data, imm }, length, imm))
    }

    /// Posts a hardware fetch-and-add on the remote 64-bit host counter at
    /// `remote_addr`.
    pub fn post_atomic(&mut self, qp: QpId, remote_addr: u64, value: i64) -> Result<WorkId> {
        if !self.profile.hw_atomics {
            return Err(Error::Unsupported("transport has no hardware atomics; emulate with immediate data".into()));
        }
        let info = self.qp_info(qp)?;
        let mem = self.rank_mem(info.dst.rank)?;
        let off = remote_addr.wrapping_sub(mem.counter_base);
        let len = mem.counters.len() as u64 * 8;
        if remote_addr < mem.counter_base || off % 8 != 0 || off + 8 > len {
            return Err(Error::Fault { rank: info.dst.rank, offset: off, length: 8, region_len: len });
        }
        self.stats.posted_atomics += 1;
        Ok(self.enqueue(qp, Payload::Atomic { slot: (off / 8) as usize, value }, 8, None))
    }

    fn bump_seq(&mut self) -> u64 {
        self.next_seq += 1;
        self.next_seq
    }

    fn enqueue(&mut self, qp: QpId, payload: Payload, length: u32, imm: Option<u32>) -> WorkId {
        let work = WorkId(self.next_work);
        self.next_work += 1;
        let info = self.qps[qp.0 as usize].info;

        let mut depart = self.now;
        if let Some(bps) = self.profile.nic_bytes_per_sec {
            let busy = self.nic_busy_until.entry((info.src.rank, info.nic)).or_insert(0);
            let ser = (length as u128 * 1_000_000_000u128).div_ceil(bps as u128) as u64;
            depart = (*busy).max(self.now) + ser;
            *busy = depart;
        }
        let jitter = if self.profile.jitter_ns > 0 { self.rng.gen_range(0..=self.profile.jitter_ns) } else { 0 };
        let mut deliver_at = depart + self.profile.one_way_ns() + jitter;

        let qstate = &mut self.qps[qp.0 as usize];
        if self.profile.ordering == DeliveryOrder::Ordered {
            deliver_at = deliver_at.max(qstate.last_delivery);
            qstate.last_delivery = deliver_at;
        }

        self.record(TraceEvent::Post, qp, work, imm, length);

        // Held messages on this QP move behind the new one.
        if self.profile.ordering == DeliveryOrder::Unordered {
            let held = std::mem::take(&mut self.qps[qp.0 as usize].held);
            let mut still_held = Vec::with_capacity(held.len());
            for h in held {
                let Some(msg) = self.messages.get_mut(&h.0) else { continue };
                if msg.delivered {
                    continue;
                }
                if msg.deliver_at <= deliver_at {
                    msg.deliver_at = deliver_at + 1;
                    msg.version += 1;
                    let (t, v) = (msg.deliver_at, msg.version);
                    let seq = self.bump_seq();
                    self.heap.push(Reverse(Scheduled { time: t, seq, action: Action::Deliver, work: h.0, version: v }));
                }
                if self.rng.gen_bool(self.profile.reorder_prob) {
                    still_held.push(h);
                }
            }
            if self.profile.reorder_prob > 0.0 && self.rng.gen_bool(self.profile.reorder_prob) {
                still_held.push(work);
            }
            self.qps[qp.0 as usize].held = still_held;
        }

        self.messages.insert(work.0, Message { qp, payload, length, deliver_at, version: 0, delivered: false });
        let seq = self.bump_seq();
        self.heap.push(Reverse(Scheduled { time: deliver_at, seq, action: Action::Deliver, work: work.0, version: 0 }));
        work
    }

    fn record(&mut self, event: TraceEvent, qp: QpId, work: WorkId, imm: Option<u32>, length: u32) {
        self.event_no += 1;
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRecord { t_ns: self.now, event, qp, work, imm, length });
        }
    }

    fn is_live(&self, s: &Scheduled) -> bool {
        match s.action {
            Action::Cqe => true,
            Action::Deliver => self.messages.get(&s.work).is_some_and(|m| !m.delivered && m.version == s.version),
        }
    }

    /// Timestamp of the next pending event, discarding stale entries.
    pub fn next_event_time(&mut self) -> Option<u64> {
        while let Some(Reverse(top)) = self.heap.peek().copied() {
            if self.is_live(&top) {
                return Some(top.time);
            }
            self.heap.pop();
        }
        None
    }

    /// Makes every delivery and completion with timestamp `<= until` visible.
    pub fn advance_clock(&mut self, until: u64) -> Result<()> {
        if until < self.now {
            return Err(Error::TimeRegression { requested: until, now: self.now });
        }
        while let Some(Reverse(top)) = self.heap.peek().copied() {
            if top.time > until {
                break;
            }
            self.heap.pop();
            if !self.is_live(&top) {
                continue;
            }
            self.now = top.time;
            match top.action {
                Action::Deliver => self.deliver(top.work),
                Action::Cqe => self.complete(top.work),
            }
        }
        self.now = until;
        Ok(())
    }

    /// Advances to the next pending event; false if nothing is pending.
    pub fn advance_to_next(&mut self) -> Result<bool> {
        match self.next_event_time() {
            Some(t) => {
                self.advance_clock(t.max(self.now))?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    fn deliver(&mut self, work: u64) {
        let msg = self.messages.get_mut(&work).expect("live message");
        msg.delivered = true;
        let (qp, length) = (msg.qp, msg.length);
        let info = self.qps[qp.0 as usize].info;
        let payload = std::mem::replace(&mut msg.payload, Payload::Atomic { slot: 0, value: 0 });
        let imm = match payload {
            Payload::Write { dst_offset, data, imm } => {
                let mem = &mut self.ranks[info.dst.rank as usize];
                mem.bytes[dst_offset..dst_offset + data.len()].copy_from_slice(&data);
                self.stats.delivered_writes += 1;
                self.stats.received_events += 1;
                self.queues.entry(info.dst).or_default().push_back(CompletionEvent::Received {
                    work: WorkId(work),
                    qp,
                    src: info.src,
                    imm,
                    length,
                });
                imm
            }
            Payload::Atomic { slot, value } => {
                self.ranks[info.dst.rank as usize].counters.add(slot, value);
                self.stats.delivered_atomics += 1;
                None
            }
        };
        self.record(TraceEvent::Deliver, qp, WorkId(work), imm, length);
        let cqe_at = self.now + (self.profile.rtt_ns - self.profile.one_way_ns());
        let seq = self.bump_seq();
        self.heap.push(Reverse(Scheduled { time: cqe_at, seq, action: Action::Cqe, work, version: 0 }));
    }

    fn complete(&mut self, work: u64) {
        let msg = self.messages.remove(&work).expect("CQE for unknown message");
        let info = self.qps[msg.qp.0 as usize].info;
        self.stats.sent_events += 1;
        self.queues.entry(info.src).or_default().push_back(CompletionEvent::Sent { work: WorkId(work), qp: msg.qp });
        self.record(TraceEvent::Cqe, msg.qp, WorkId(work), None, msg.length);
    }

    /// Drains the events currently visible at `endpoint`.
    pub fn poll_cq(&mut self, endpoint: Endpoint) -> Vec<CompletionEvent> {
        self.queues.get_mut(&endpoint).map(|q| q.drain(..).collect()).unwrap_or_default()
    }

    pub fn poll_cq_into(&mut self, endpoint: Endpoint, out: &mut Vec<CompletionEvent>) {
        if let Some(q) = self.queues.get_mut(&endpoint) {
            out.extend(q.drain(..));
        }
    }

    /// Messages posted whose sender completion has not fired yet.
    pub fn in_flight(&self) -> usize {
        self.messages.len()
    }

    /// No pending events and no undrained completions.
    pub fn is_idle(&self) -> bool {
        self.messages.is_empty() && self.queues.values().all(VecDeque::is_empty)
    }
}
