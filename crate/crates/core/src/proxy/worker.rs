//! One proxy thread: polls its FIFO channels and completion queue, posts to
//! the transport, and feeds received immediates to its control buffer.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use super::barrier::{BarrierCtx, BarrierInbox, BarrierWait};
use super::{BarrierHub, CompletionPoint, Mode, PeerTable, ProxyConfig};
use crate::command::{BarrierScope, CmdFlags, CmdIndex, CmdKind, FifoConsumer, TransferCmd, DRAIN_ALL};
use crate::delivery::{ht_operand, ControlBuffer, CounterLayout, CounterSlot, Effect, RingCounter, Stamp};
use crate::error::{Error, Result};
use crate::transport::{
    CompletionEvent, DeliveryOrder, Endpoint, HostCounters, ImmWord, QpId, Transport, TransportProfile, WorkId,
    LL_MAX_OPERAND,
};

/// Commands served per channel per poll before moving to the next channel.
const SERVE_BATCH: usize = 32;

/// Per-thread counters. Threads never touch each other's.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ThreadStats {
    pub commands: u64,
    pub writes: u64,
    pub hw_atomics: u64,
    pub emulated_atomics: u64,
    pub barrier_messages: u64,
    pub bytes: u64,
    pub sent_cqes: u64,
    pub received: u64,
    pub effects: u64,
    /// Atomics that had to wait for earlier completions on their channel.
    pub gated: u64,
    pub posts_per_qp: BTreeMap<QpId, u64>,
}

#[derive(Debug, Clone, Copy)]
enum Blocked {
    Drain { upto: Option<CmdIndex>, before_order: u64 },
    Gate(TransferCmd),
    Barrier(BarrierWait),
}

enum Unblock {
    Done,
    Progressed,
    Stalled,
}

#[derive(Debug)]
struct OwnedChannel {
    id: u32,
    consumer: FifoConsumer,
    blocked: Option<Blocked>,
    /// Posts without a sender completion, per command index, and whether
    /// the command completes when they drain.
    outstanding: BTreeMap<CmdIndex, (u32, bool)>,
    done: BTreeSet<CmdIndex>,
    completed: CmdIndex,
}

impl OwnedChannel {
    fn complete(&mut self, idx: CmdIndex) -> Result<()> {
        self.done.insert(idx);
        let start = self.completed;
        while self.done.remove(&self.completed) {
            self.completed += 1;
        }
        if self.completed > start {
            self.consumer.mark_completed(self.completed - 1)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Post {
    order: u64,
    chan: Option<(usize, CmdIndex)>,
}

#[derive(Debug)]
pub struct ProxyThread {
    cfg: Arc<ProxyConfig>,
    endpoint: Endpoint,
    profile: TransportProfile,
    peers: Arc<PeerTable>,
    counter_layout: CounterLayout,
    channels: Vec<OwnedChannel>,
    ht_qps: HashMap<(u32, u32), QpId>,
    ll_qps: HashMap<u32, Vec<QpId>>,
    ll_rr: HashMap<u32, usize>,
    ht_next_seq: HashMap<(u32, u32), u64>,
    control: ControlBuffer,
    inbox: BarrierInbox,
    next_epoch: [u32; 2],
    done_epoch: [Option<u32>; 2],
    inflight: HashMap<WorkId, Post>,
    inflight_orders: BTreeSet<u64>,
    next_order: u64,
    rx: Vec<CompletionEvent>,
    effects: Vec<Effect>,
    outgoing: Vec<(u32, ImmWord)>,
    stats: ThreadStats,
}

impl ProxyThread {
    pub(crate) fn new(
        cfg: Arc<ProxyConfig>,
        endpoint: Endpoint,
        profile: TransportProfile,
        peers: Arc<PeerTable>,
        counters: Arc<HostCounters>,
        consumers: Vec<(u32, FifoConsumer)>,
    ) -> Self {
        let counter_layout = cfg.counter_layout();
        let control = ControlBuffer::new(endpoint.rank, cfg.mode.into(), cfg.enforcement, counter_layout, counters);
        ProxyThread {
            endpoint,
            profile,
            peers,
            counter_layout,
            channels: consumers
                .into_iter()
                .map(|(id, consumer)| OwnedChannel {
                    id,
                    consumer,
                    blocked: None,
                    outstanding: BTreeMap::new(),
                    done: BTreeSet::new(),
                    completed: 0,
                })
                .collect(),
            ht_qps: HashMap::new(),
            ll_qps: HashMap::new(),
            ll_rr: HashMap::new(),
            ht_next_seq: HashMap::new(),
            control,
            inbox: BarrierInbox::default(),
            next_epoch: [0; 2],
            done_epoch: [None; 2],
            inflight: HashMap::new(),
            inflight_orders: BTreeSet::new(),
            next_order: 0,
            rx: Vec::new(),
            effects: Vec::new(),
            outgoing: Vec::new(),
            stats: ThreadStats::default(),
            cfg,
        }
    }

    pub(crate) fn add_ht_qp(&mut self, dst: u32, channel: u32, qp: QpId) {
        self.ht_qps.insert((dst, channel), qp);
    }

    pub(crate) fn add_ll_qp(&mut self, dst: u32, qp: QpId) {
        self.ll_qps.entry(dst).or_default().push(qp);
    }

    pub fn endpoint(&self) -> Endpoint {
        self.endpoint
    }

    pub fn stats(&self) -> &ThreadStats {
        &self.stats
    }

    pub fn control(&self) -> &ControlBuffer {
        &self.control
    }

    pub fn control_mut(&mut self) -> &mut ControlBuffer {
        &mut self.control
    }

    pub fn channel_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.channels.iter().map(|c| c.id)
    }

    /// Sequenced words issued so far to `(dst, channel)`.
    pub fn ht_issued(&self) -> impl Iterator<Item = ((u32, u32), u64)> + '_ {
        self.ht_next_seq.iter().map(|(k, v)| (*k, *v))
    }

    pub fn in_flight(&self) -> usize {
        self.inflight.len()
    }

    /// No blocked command, nothing in flight, nothing buffered.
    pub fn is_quiet(&self) -> bool {
        self.inflight.is_empty()
            && self.inbox.is_empty()
            && self.control.quiescence_check()
            && self.channels.iter().all(|c| c.blocked.is_none() && c.consumer.channel().occupancy() == 0)
    }

    /// HT: the channel's fixed QP to `dst`. LL: round-robin over this
    /// thread's QPs to `dst`.
    pub fn select_qp(&mut self, dst: u32, channel: u32) -> Result<QpId> {
        let missing = || Error::Connection(format!("no QP to rank {dst} for channel {channel}"));
        match self.cfg.mode {
            Mode::HighThroughput => self.ht_qps.get(&(dst, channel)).copied().ok_or_else(missing),
            Mode::LowLatency => {
                let qps = self.ll_qps.get(&dst).filter(|q| !q.is_empty()).ok_or_else(missing)?;
                let cursor = self.ll_rr.entry(dst).or_insert(0);
                let qp = qps[*cursor % qps.len()];
                *cursor += 1;
                Ok(qp)
            }
        }
    }

    /// One pass: drain the completion queue, then serve every owned channel.
    /// Returns whether anything changed.
    pub fn poll<T: Transport>(&mut self, net: &mut T, hub: &BarrierHub) -> Result<bool> {
        let mut progress = false;
        let mut rx = std::mem::take(&mut self.rx);
        rx.clear();
        net.poll_cq_into(self.endpoint, &mut rx);
        if !rx.is_empty() {
            progress = true;
            let at = Stamp { t_ns: net.now(), event_no: net.event_no() };
            for ev in &rx {
                self.on_event(*ev, at)?;
            }
        }
        self.rx = rx;
        for ci in 0..self.channels.len() {
            progress |= self.serve_channel(ci, net, hub)?;
        }
        Ok(progress)
    }

    fn on_event(&mut self, ev: CompletionEvent, at: Stamp) -> Result<()> {
        match ev {
            CompletionEvent::Sent { work, .. } => {
                self.stats.sent_cqes += 1;
                let post = self
                    .inflight
                    .remove(&work)
                    .ok_or_else(|| Error::protocol(format!("completion for unknown work {work:?}")))?;
                self.inflight_orders.remove(&post.order);
                if let Some((ci, idx)) = post.chan {
                    let chan = &mut self.channels[ci];
                    let entry = chan.outstanding.get_mut(&idx).expect("tracked post");
                    entry.0 -= 1;
                    if entry.0 == 0 {
                        let complete_now = entry.1;
                        chan.outstanding.remove(&idx);
                        if complete_now {
                            chan.complete(idx)?;
                        }
                    }
                }
            }
            CompletionEvent::Received { src, imm, length, .. } => {
                self.stats.received += 1;
                let imm = imm.ok_or_else(|| Error::protocol("write without immediate data"))?;
                let word = ImmWord::decode(imm, self.control.layout())?;
                if matches!(word, ImmWord::Barrier { .. }) {
                    self.inbox.accept(&self.cfg, self.endpoint.rank, word, self.done_epoch)?;
                } else {
                    self.effects.clear();
                    self.control.on_receive(src.rank, imm, length, at, &mut self.effects)?;
                    self.stats.effects += self.effects.len() as u64;
                }
            }
        }
        Ok(())
    }

    fn serve_channel<T: Transport>(&mut self, ci: usize, net: &mut T, hub: &BarrierHub) -> Result<bool> {
        let mut progress = false;
        for _ in 0..SERVE_BATCH {
            if self.channels[ci].blocked.is_some() {
                match self.try_unblock(ci, net, hub)? {
                    Unblock::Done => {
                        progress = true;
                        continue;
                    }
                    Unblock::Progressed => return Ok(true),
                    Unblock::Stalled => return Ok(progress),
                }
            }
            let Some(cmd) = self.channels[ci].consumer.poll() else { break };
            progress = true;
            self.serve(ci, cmd, net, hub)?;
        }
        Ok(progress)
    }

    fn serve<T: Transport>(&mut self, ci: usize, cmd: TransferCmd, net: &mut T, hub: &BarrierHub) -> Result<()> {
        let idx = self.channels[ci].consumer.head_index();
        if cmd.channel_id() != self.channels[ci].id {
            return Err(Error::protocol(format!(
                "command for channel {} found in channel {}",
                cmd.channel_id(),
                self.channels[ci].id
            )));
        }
        match cmd.kind() {
            CmdKind::Write => {
                let point = self.cfg.completion.write;
                self.post_data_write(ci, idx, &cmd, point, net)?;
                self.finish(ci, idx, point)?;
            }
            CmdKind::Atomic => {
                if self.atomic_needs_gate(&cmd)? && !self.channels[ci].outstanding.is_empty() {
                    self.stats.gated += 1;
                    self.channels[ci].blocked = Some(Blocked::Gate(cmd));
                } else {
                    let point = self.cfg.completion.atomic;
                    self.post_atomic_cmd(ci, idx, &cmd, point, net)?;
                    self.finish(ci, idx, point)?;
                }
            }
            CmdKind::Drain => {
                let upto = match cmd.length_or_value() {
                    DRAIN_ALL => None,
                    u => Some(u as CmdIndex),
                };
                self.channels[ci].blocked = Some(Blocked::Drain { upto, before_order: self.next_order });
            }
            CmdKind::Barrier => {
                let scope = BarrierScope::from_u32(cmd.length_or_value())
                    .ok_or_else(|| Error::protocol(format!("unknown barrier scope {}", cmd.length_or_value())))?;
                let rail_flag = cmd.flags().contains(CmdFlags::SAME_RAIL_BARRIER);
                if rail_flag != (scope == BarrierScope::SameRail) {
                    return Err(Error::protocol("barrier scope disagrees with the same-rail flag"));
                }
                let s = scope as usize;
                let epoch = self.next_epoch[s];
                self.next_epoch[s] = epoch.wrapping_add(1);
                let ctx = BarrierCtx { cfg: &self.cfg, hub, rank: self.endpoint.rank, thread: self.endpoint.thread };
                self.channels[ci].blocked = Some(Blocked::Barrier(BarrierWait::start(&ctx, scope, epoch)));
            }
        }
        Ok(())
    }

    fn finish(&mut self, ci: usize, idx: CmdIndex, point: CompletionPoint) -> Result<()> {
        let chan = &mut self.channels[ci];
        chan.consumer.pop()?;
        self.stats.commands += 1;
        if point == CompletionPoint::AtPop {
            chan.complete(idx)?;
        }
        Ok(())
    }

    fn try_unblock<T: Transport>(&mut self, ci: usize, net: &mut T, hub: &BarrierHub) -> Result<Unblock> {
        let idx = self.channels[ci].consumer.head_index();
        let blocked = self.channels[ci].blocked.expect("channel is blocked");
        match blocked {
            Blocked::Drain { upto, before_order } => {
                let clear = match upto {
                    None => self.inflight_orders.range(..before_order).next().is_none(),
                    Some(u) => self.channels[ci].outstanding.range(..=u).next().is_none(),
                };
                if !clear {
                    return Ok(Unblock::Stalled);
                }
                self.channels[ci].blocked = None;
                self.finish(ci, idx, CompletionPoint::AtPop)?;
            }
            Blocked::Gate(cmd) => {
                if !self.channels[ci].outstanding.is_empty() {
                    return Ok(Unblock::Stalled);
                }
                self.channels[ci].blocked = None;
                let point = self.cfg.completion.atomic;
                self.post_atomic_cmd(ci, idx, &cmd, point, net)?;
                self.finish(ci, idx, point)?;
            }
            Blocked::Barrier(mut wait) => {
                let ctx = BarrierCtx { cfg: &self.cfg, hub, rank: self.endpoint.rank, thread: self.endpoint.thread };
                let mut out = std::mem::take(&mut self.outgoing);
                out.clear();
                let released = wait.advance(&ctx, &mut self.inbox, &mut out);
                let channel = self.channels[ci].id;
                let sent = !out.is_empty();
                for &(dst, word) in &out {
                    self.send_control(dst, channel, word, net)?;
                }
                self.outgoing = out;
                if !released {
                    self.channels[ci].blocked = Some(Blocked::Barrier(wait));
                    return Ok(if sent { Unblock::Progressed } else { Unblock::Stalled });
                }
                self.done_epoch[wait.scope as usize] = Some(wait.epoch);
                self.channels[ci].blocked = None;
                self.finish(ci, idx, CompletionPoint::AtPop)?;
            }
        }
        Ok(Unblock::Done)
    }

    fn track(&mut self, work: WorkId, qp: QpId, chan: Option<(usize, CmdIndex, CompletionPoint)>) {
        let order = self.next_order;
        self.next_order += 1;
        self.inflight_orders.insert(order);
        *self.stats.posts_per_qp.entry(qp).or_insert(0) += 1;
        let chan = chan.map(|(ci, idx, point)| {
            let entry = self.channels[ci].outstanding.entry(idx).or_insert((0, false));
            entry.0 += 1;
            entry.1 = point == CompletionPoint::AtTransportCompletion;
            (ci, idx)
        });
        self.inflight.insert(work, Post { order, chan });
    }

    fn check_dst(&self, dst: u32) -> Result<()> {
        if dst >= self.cfg.ep_size() {
            return Err(Error::Connection(format!("destination rank {dst} outside EP size {}", self.cfg.ep_size())));
        }
        Ok(())
    }

    fn take_seq(&mut self, dst: u32, channel: u32) -> u16 {
        let next = self.ht_next_seq.entry((dst, channel)).or_insert(0);
        let seq = *next as u16;
        *next += 1;
        seq
    }

    fn post_data_write<T: Transport>(
        &mut self,
        ci: usize,
        idx: CmdIndex,
        cmd: &TransferCmd,
        point: CompletionPoint,
        net: &mut T,
    ) -> Result<()> {
        let dst = cmd.dst_rank();
        self.check_dst(dst)?;
        let len = cmd.length_or_value();
        let own_len = self.peers.get(self.endpoint.rank)?.region_len;
        if cmd.src_offset() as u64 + len as u64 > own_len {
            return Err(Error::Fault {
                rank: self.endpoint.rank,
                offset: cmd.src_offset() as u64,
                length: len as u64,
                region_len: own_len,
            });
        }
        let peer = *self.peers.get(dst)?;
        if cmd.dst_offset() as u64 + len as u64 > peer.region_len {
            return Err(Error::Fault {
                rank: dst,
                offset: cmd.dst_offset() as u64,
                length: len as u64,
                region_len: peer.region_len,
            });
        }
        let piggyback = cmd.flags().contains(CmdFlags::PIGGYBACK_ATOMIC);
        let channel = cmd.channel_id();
        let word = match self.cfg.mode {
            Mode::LowLatency => {
                let key = cmd.dst_offset() / self.cfg.ll_window_bytes;
                if key >= self.cfg.ll_keys {
                    return Err(Error::protocol(format!("write offset {:#x} maps to LL key {key}", cmd.dst_offset())));
                }
                if piggyback {
                    ImmWord::ll_atomic(key, 1)?
                } else {
                    ImmWord::ll_data(key)?
                }
            }
            Mode::HighThroughput => {
                let seq = self.take_seq(dst, channel);
                if piggyback {
                    ImmWord::ht_atomic(channel, seq, ht_operand(RingCounter::Tail, 1)?)?
                } else {
                    ImmWord::ht_data(channel, seq)?
                }
            }
        };
        let qp = self.select_qp(dst, channel)?;
        let work = net.post_write(
            qp,
            cmd.src_offset() as u64,
            peer.region_base + cmd.dst_offset() as u64,
            len,
            Some(word.encode()),
        )?;
        self.stats.writes += 1;
        self.stats.bytes += len as u64;
        self.track(work, qp, Some((ci, idx, point)));
        Ok(())
    }

    fn uses_hw_atomics(&self) -> bool {
        self.profile.hw_atomics && !self.cfg.emulate_atomics
    }

    /// Whether an atomic must wait for the sender completions of every
    /// earlier post on its channel before being issued.
    fn atomic_needs_gate(&self, cmd: &TransferCmd) -> Result<bool> {
        if self.cfg.enforcement == crate::delivery::Enforcement::Sender {
            return Ok(true);
        }
        if !self.uses_hw_atomics() {
            return Ok(false);
        }
        // Hardware atomics bypass the control buffer, so they rely on the
        // transport's own ordering.
        let multi_path =
            self.cfg.mode == Mode::LowLatency && self.ll_qps.get(&cmd.dst_rank()).is_some_and(|q| q.len() > 1);
        Ok(self.profile.ordering == DeliveryOrder::Unordered || multi_path)
    }

    fn post_atomic_cmd<T: Transport>(
        &mut self,
        ci: usize,
        idx: CmdIndex,
        cmd: &TransferCmd,
        point: CompletionPoint,
        net: &mut T,
    ) -> Result<()> {
        let dst = cmd.dst_rank();
        self.check_dst(dst)?;
        let channel = cmd.channel_id();
        let value = cmd.length_or_value();
        let slot = self.counter_layout.decode_offset(cmd.dst_offset())?;
        let me = self.endpoint.rank;
        match (self.cfg.mode, slot) {
            (Mode::LowLatency, CounterSlot::Ll { src, .. }) if src == me => {}
            (Mode::HighThroughput, CounterSlot::Ht { src, channel: c, .. }) if src == me && c == channel => {}
            _ => {
                return Err(Error::protocol(format!(
                    "atomic from rank {me} channel {channel} targets foreign counter slot {slot:?}"
                )));
            }
        }
        let peer = *self.peers.get(dst)?;
        let qp = self.select_qp(dst, channel)?;
        let work = if self.uses_hw_atomics() {
            self.stats.hw_atomics += 1;
            net.post_atomic(qp, peer.counter_base + cmd.dst_offset() as u64, value as i64)?
        } else {
            let word = match slot {
                CounterSlot::Ll { key, .. } => {
                    if value > LL_MAX_OPERAND {
                        return Err(Error::protocol(format!("LL atomic value {value} exceeds {LL_MAX_OPERAND}")));
                    }
                    ImmWord::ll_atomic(key, value)?
                }
                CounterSlot::Ht { counter, .. } => {
                    let operand = ht_operand(counter, value)?;
                    ImmWord::ht_atomic(channel, self.take_seq(dst, channel), operand)?
                }
            };
            self.stats.emulated_atomics += 1;
            net.post_write(qp, 0, peer.region_base, 0, Some(word.encode()))?
        };
        self.track(work, qp, Some((ci, idx, point)));
        Ok(())
    }

    fn send_control<T: Transport>(&mut self, dst: u32, channel: u32, word: ImmWord, net: &mut T) -> Result<()> {
        let peer = *self.peers.get(dst)?;
        let qp = self.select_qp(dst, channel)?;
        let work = net.post_write(qp, 0, peer.region_base, 0, Some(word.encode()))?;
        self.stats.barrier_messages += 1;
        self.track(work, qp, None);
        Ok(())
    }
}
