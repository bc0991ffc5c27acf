//! GPU-side programs for the dispatch and combine phases.

use std::collections::VecDeque;

use super::layout::{Layout, CHUNK_HEADER_BYTES, CONSUMED_SLOT, RECORD_HEADER_BYTES};
use crate::command::TransferCmd;
use crate::delivery::{CounterLayout, RingCounter};
use crate::error::{Error, Result};
use crate::proxy::{Device, GpuProgram};

/// Commands waiting for FIFO space, per (rank, channel).
#[derive(Debug)]
pub(crate) struct Outbox {
    channels: u32,
    queues: Vec<VecDeque<TransferCmd>>,
    queued: usize,
}

impl Outbox {
    pub fn new(ranks: u32, channels: u32) -> Self {
        Outbox { channels, queues: vec![VecDeque::new(); (ranks * channels) as usize], queued: 0 }
    }

    pub fn push(&mut self, rank: u32, cmd: TransferCmd) {
        self.queues[(rank * self.channels + cmd.channel_id()) as usize].push_back(cmd);
        self.queued += 1;
    }

    pub fn is_empty(&self) -> bool {
        self.queued == 0
    }

    pub fn flush(&mut self, dev: &mut Device<'_>) -> Result<bool> {
        if self.queued == 0 {
            return Ok(false);
        }
        let mut progress = false;
        for (i, q) in self.queues.iter_mut().enumerate() {
            let (rank, channel) = (i as u32 / self.channels, i as u32 % self.channels);
            while let Some(&cmd) = q.front() {
                if dev.try_push(rank, channel, cmd)?.is_none() {
                    break;
                }
                q.pop_front();
                self.queued -= 1;
                progress = true;
            }
        }
        Ok(progress)
    }
}

/// A counter `rank` waits on until it reaches `target`; `peer` is the rank
/// whose traffic it counts.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CounterWait {
    pub rank: u32,
    pub peer: u32,
    pub slot: usize,
    pub target: i64,
}

/// LL phase: every command is known up front; done when all counters
/// reach their targets.
#[derive(Debug)]
pub(crate) struct LlPhase {
    pub outbox: Outbox,
    pending: Vec<CounterWait>,
    /// `(rank, peer)` in the order each wait was observed satisfied.
    pub arrivals: Vec<(u32, u32)>,
    pub finished_at: Option<u64>,
}

impl LlPhase {
    pub fn new(outbox: Outbox, waits: Vec<CounterWait>) -> Self {
        LlPhase { outbox, pending: waits, arrivals: Vec::new(), finished_at: None }
    }
}

impl GpuProgram for LlPhase {
    fn step(&mut self, dev: &mut Device<'_>) -> Result<bool> {
        let mut progress = self.outbox.flush(dev)?;
        let before = self.pending.len();
        let arrivals = &mut self.arrivals;
        self.pending.retain(|w| {
            let reached = dev.counter(w.rank, w.slot) >= w.target;
            if reached {
                arrivals.push((w.rank, w.peer));
            }
            !reached
        });
        progress |= self.pending.len() != before;
        if self.finished_at.is_none() && self.pending.is_empty() && self.outbox.is_empty() {
            self.finished_at = Some(dev.now());
            progress = true;
        }
        Ok(progress)
    }

    fn is_done(&self) -> bool {
        self.finished_at.is_some()
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Payload {
    /// Offset in the sender's region.
    At(usize),
    Inline(Vec<u8>),
}

#[derive(Debug, Clone)]
pub(crate) struct RingRecord {
    pub token: u32,
    pub idx: u32,
    pub tag: u64,
    pub payload: Payload,
}

/// One directed ring: `src` stages chunks into `dst`'s ring on `channel`.
#[derive(Debug)]
pub(crate) struct Lane {
    pub src: u32,
    pub dst: u32,
    pub src_node: u32,
    pub dst_node: u32,
    pub channel: u32,
    pub chunks: VecDeque<Vec<RingRecord>>,
    /// Cumulative chunks staged / consumed on this ring.
    pub sent: u64,
    pub consumed: u64,
    pub target: u64,
}

/// What a receiver does with one record: `(receiver, sender, record header,
/// payload)`.
pub(crate) type Deliver<'a> =
    dyn FnMut(&mut Device<'_>, u32, u32, RecordHeader, std::ops::Range<usize>) -> Result<()> + 'a;

#[derive(Debug, Clone, Copy)]
pub(crate) struct RecordHeader {
    pub token: u32,
    pub idx: u32,
    pub tag: u64,
}

/// HT phase over ring channels.
pub(crate) struct RingPhase<'a> {
    pub layout: Layout,
    pub counters: CounterLayout,
    pub phase_tag: u32,
    pub lanes: Vec<Lane>,
    pub outbox: Outbox,
    pub deliver: Box<Deliver<'a>>,
    pub data_done_at: Option<u64>,
    pub finished_at: Option<u64>,
}

impl RingPhase<'_> {
    fn send(&mut self, dev: &mut Device<'_>) -> Result<bool> {
        let l = self.layout;
        let slots = l.ring_slots as u64;
        let mut progress = false;
        for lane in &mut self.lanes {
            let head_slot = self.counters.ht_slot(lane.dst, lane.channel, RingCounter::Head);
            while !lane.chunks.is_empty() {
                let head = dev.counter(lane.src, head_slot) as u64;
                if lane.sent - head >= slots {
                    break;
                }
                let chunk = lane.chunks.pop_front().expect("non-empty");
                let base = l.staging(lane.dst_node, lane.channel, lane.sent);
                let h = l.hidden as usize;
                let mut bytes = Vec::with_capacity(CHUNK_HEADER_BYTES + chunk.len() * (RECORD_HEADER_BYTES + h));
                bytes.extend_from_slice(&lane.sent.to_le_bytes());
                bytes.extend_from_slice(&(chunk.len() as u32).to_le_bytes());
                bytes.extend_from_slice(&self.phase_tag.to_le_bytes());
                for r in &chunk {
                    bytes.extend_from_slice(&r.token.to_le_bytes());
                    bytes.extend_from_slice(&r.idx.to_le_bytes());
                    bytes.extend_from_slice(&r.tag.to_le_bytes());
                    match &r.payload {
                        Payload::At(off) => bytes.extend_from_slice(&dev.region(lane.src)[*off..*off + h]),
                        Payload::Inline(v) => bytes.extend_from_slice(v),
                    }
                }
                dev.region_mut(lane.src)[base..base + bytes.len()].copy_from_slice(&bytes);
                let dst_off = l.ring(lane.src_node, lane.channel, lane.sent);
                self.outbox.push(
                    lane.src,
                    TransferCmd::write(lane.dst, lane.channel, base as u32, dst_off as u32, bytes.len() as u32)?,
                );
                let tail = CounterLayout::slot_offset(self.counters.ht_slot(lane.src, lane.channel, RingCounter::Tail));
                self.outbox.push(lane.src, TransferCmd::atomic(lane.dst, lane.channel, tail, 1)?);
                lane.sent += 1;
                progress = true;
            }
        }
        Ok(progress)
    }

    fn receive(&mut self, dev: &mut Device<'_>) -> Result<bool> {
        let l = self.layout;
        let h = l.hidden as usize;
        let mut progress = false;
        for lane in &mut self.lanes {
            let tail = dev.counter(lane.dst, self.counters.ht_slot(lane.src, lane.channel, RingCounter::Tail)) as u64;
            if tail > lane.consumed + l.ring_slots as u64 {
                return Err(Error::Invariant(format!(
                    "ring {}->{} channel {} overrun: tail {tail}, consumed {}",
                    lane.src, lane.dst, lane.channel, lane.consumed
                )));
            }
            while lane.consumed < tail {
                let base = l.ring(lane.src_node, lane.channel, lane.consumed);
                let region = dev.region(lane.dst);
                let word = |at: usize| u32::from_le_bytes(region[at..at + 4].try_into().expect("4"));
                let seq = u64::from_le_bytes(region[base..base + 8].try_into().expect("8"));
                let count = word(base + 8);
                let tag = word(base + 12);
                if seq != lane.consumed || tag != self.phase_tag || count == 0 || count > l.chunk_tokens {
                    return Err(Error::Invariant(format!(
                        "ring canary on rank {} from rank {} channel {}: slot holds seq {seq:#x} (tag {tag}, {count} \
                         records), expected seq {}",
                        lane.dst, lane.src, lane.channel, lane.consumed
                    )));
                }
                let mut at = base + CHUNK_HEADER_BYTES;
                for _ in 0..count {
                    let region = dev.region(lane.dst);
                    let header = RecordHeader {
                        token: u32::from_le_bytes(region[at..at + 4].try_into().expect("4")),
                        idx: u32::from_le_bytes(region[at + 4..at + 8].try_into().expect("4")),
                        tag: u64::from_le_bytes(region[at + 8..at + 16].try_into().expect("8")),
                    };
                    let payload = at + RECORD_HEADER_BYTES..at + RECORD_HEADER_BYTES + h;
                    (self.deliver)(dev, lane.dst, lane.src, header, payload)?;
                    at += RECORD_HEADER_BYTES + h;
                }
                dev.region_mut(lane.dst)[base..base + 8].copy_from_slice(&CONSUMED_SLOT.to_le_bytes());
                lane.consumed += 1;
                let head = CounterLayout::slot_offset(self.counters.ht_slot(lane.dst, lane.channel, RingCounter::Head));
                self.outbox.push(lane.dst, TransferCmd::atomic(lane.src, lane.channel, head, 1)?);
                progress = true;
            }
        }
        Ok(progress)
    }
}

impl GpuProgram for RingPhase<'_> {
    fn step(&mut self, dev: &mut Device<'_>) -> Result<bool> {
        let mut progress = self.send(dev)?;
        progress |= self.outbox.flush(dev)?;
        progress |= self.receive(dev)?;
        progress |= self.outbox.flush(dev)?;
        if self.data_done_at.is_none() && self.lanes.iter().all(|l| l.consumed == l.target) {
            self.data_done_at = Some(dev.now());
            progress = true;
        }
        if self.finished_at.is_none() && self.data_done_at.is_some() && self.outbox.is_empty() {
            let heads_back = self.lanes.iter().all(|l| {
                dev.counter(l.src, self.counters.ht_slot(l.dst, l.channel, RingCounter::Head)) as u64 == l.target
            });
            if heads_back {
                self.finished_at = Some(dev.now());
                progress = true;
            }
        }
        Ok(progress)
    }

    fn is_done(&self) -> bool {
        self.finished_at.is_some()
    }
}
