//! Receiver-side enforcement of the delivery guarantees the GPU kernels rely
//! on, over a transport that may reorder.
//!
//! * LL mode, partial completion fence: an atomic that requires `X` writes
//!   for `(src, expert)` is held until `X` such writes were received. Other
//!   experts never block it.
//! * HT mode, per-channel partial order: every DATA/ATOMIC word carries a
//!   per-`(src, channel)` sequence; effects are applied in exactly sequence
//!   order, and out-of-order arrivals wait in the control buffer.
//!
//! Write payloads land at delivery regardless; only counter effects are
//! gated. With [`Enforcement::Sender`] the sender already waited for
//! completions, so atomics apply on arrival.

mod audit;
mod counters;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;

pub use audit::{audit_fence, audit_ht_order, AuditReport, HtOrderAudit};
pub use counters::{CounterLayout, CounterSlot, RingCounter};

use crate::error::{Error, Result};
use crate::transport::{unwrap_seq, HostCounters, ImmKind, ImmLayout, ImmWord, SEQ_WINDOW};

/// Max out-of-order entries buffered per `(src, channel)`.
pub const HT_PENDING_LIMIT: usize = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Enforcement {
    #[default]
    Receiver,
    Sender,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EffectKind {
    Data,
    Atomic,
    /// Counter update carried by a data write's own immediate.
    PiggybackAtomic,
}

/// One effect applied by a control buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Effect {
    pub t_ns: u64,
    /// Fabric event count when the effect was applied (orders effects
    /// against trace records).
    pub event_no: u64,
    pub rank: u32,
    pub src: u32,
    pub kind: EffectKind,
    pub layout: ImmLayout,
    /// Expert key (LL) or channel (HT).
    pub key: u32,
    /// Absolute sequence (HT only).
    pub seq: Option<u64>,
    pub operand: u32,
    pub counter_after: Option<i64>,
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            EffectKind::Data => "data",
            EffectKind::Atomic => "atomic",
            EffectKind::PiggybackAtomic => "piggyback",
        };
        let key = match self.layout {
            ImmLayout::LowLatency => "expert",
            ImmLayout::HighThroughput => "channel",
        };
        write!(f, "t_ns={} rank={} src={} kind={kind} {key}={} seq=", self.t_ns, self.rank, self.src, self.key)?;
        match self.seq {
            Some(s) => write!(f, "{s}")?,
            None => f.write_str("-")?,
        }
        write!(f, " operand={} counter_after=", self.operand)?;
        match self.counter_after {
            Some(c) => write!(f, "{c}"),
            None => f.write_str("-"),
        }
    }
}

/// Time and fabric event count at which a received event is processed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Stamp {
    pub t_ns: u64,
    pub event_no: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PendingLl {
    required: u32,
    operand: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PendingHt {
    kind: ImmKind,
    operand: u8,
    piggyback: bool,
}

/// An LL atomic still waiting for its writes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StuckAtomic {
    pub src: u32,
    pub expert: u32,
    pub required: u32,
    pub received: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuiescenceReport {
    /// Deferred LL atomics whose fence never passed: writes were lost.
    pub stuck_atomics: Vec<StuckAtomic>,
    /// `(src, channel, buffered entries)` with a sequence gap.
    pub ht_gaps: Vec<(u32, u32, usize)>,
    /// `(src, channel, applied, expected)` where the cursor disagrees with
    /// the sender's count.
    pub cursor_mismatches: Vec<(u32, u32, u64, u64)>,
}

impl QuiescenceReport {
    pub fn is_clean(&self) -> bool {
        self.stuck_atomics.is_empty() && self.ht_gaps.is_empty() && self.cursor_mismatches.is_empty()
    }
}

/// Per-proxy-thread control buffer.
#[derive(Debug)]
pub struct ControlBuffer {
    rank: u32,
    layout: ImmLayout,
    enforcement: Enforcement,
    counter_layout: CounterLayout,
    counters: Arc<HostCounters>,
    ll_write_counts: HashMap<(u32, u32), u64>,
    ll_pending: HashMap<(u32, u32), VecDeque<PendingLl>>,
    ht_cursors: HashMap<(u32, u32), u64>,
    ht_pending: HashMap<(u32, u32), BTreeMap<u64, PendingHt>>,
    trace: Option<Vec<Effect>>,
}

impl ControlBuffer {
    pub fn new(
        rank: u32,
        layout: ImmLayout,
        enforcement: Enforcement,
        counter_layout: CounterLayout,
        counters: Arc<HostCounters>,
    ) -> Self {
        ControlBuffer {
            rank,
            layout,
            enforcement,
            counter_layout,
            counters,
            ll_write_counts: HashMap::new(),
            ll_pending: HashMap::new(),
            ht_cursors: HashMap::new(),
            ht_pending: HashMap::new(),
            trace: None,
        }
    }

    pub fn layout(&self) -> ImmLayout {
        self.layout
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[Effect] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn take_trace(&mut self) -> Vec<Effect> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn ll_write_count(&self, src: u32, expert: u32) -> u64 {
        self.ll_write_counts.get(&(src, expert)).copied().unwrap_or(0)
    }

    /// Next expected absolute sequence for `(src, channel)`.
    pub fn ht_cursor(&self, src: u32, channel: u32) -> u64 {
        self.ht_cursors.get(&(src, channel)).copied().unwrap_or(0)
    }

    pub fn ht_cursors(&self) -> impl Iterator<Item = ((u32, u32), u64)> + '_ {
        self.ht_cursors.iter().map(|(k, v)| (*k, *v))
    }

    pub fn pending_atomics(&self) -> usize {
        self.ll_pending.values().map(VecDeque::len).sum()
    }

    pub fn pending_ht(&self) -> usize {
        self.ht_pending.values().map(BTreeMap::len).sum()
    }

    /// Processes one received immediate from `src`. `length` is the write's
    /// byte count (zero for an emulated standalone atomic). Effects applied
    /// now are appended to `out` in application order.
    pub fn on_receive(&mut self, src: u32, imm: u32, length: u32, at: Stamp, out: &mut Vec<Effect>) -> Result<()> {
        let start = out.len();
        match ImmWord::decode(imm, self.layout)? {
            ImmWord::Ll { kind, expert, operand } => self.on_ll(src, kind, expert as u32, operand, length, at, out)?,
            ImmWord::Ht { kind, channel, seq, operand } => {
                self.on_ht(src, kind, channel as u32, seq, operand, length, at, out)?
            }
            ImmWord::Barrier { .. } => {
                return Err(Error::protocol("barrier immediate routed to the control buffer"));
            }
        }
        if let Some(trace) = self.trace.as_mut() {
            trace.extend_from_slice(&out[start..]);
        }
        Ok(())
    }

    fn effect(&self, src: u32, kind: EffectKind, key: u32, seq: Option<u64>, operand: u32, at: Stamp) -> Effect {
        Effect {
            t_ns: at.t_ns,
            event_no: at.event_no,
            rank: self.rank,
            src,
            kind,
            layout: self.layout,
            key,
            seq,
            operand,
            counter_after: None,
        }
    }

    fn check_expert(&self, src: u32, expert: u32) -> Result<()> {
        if src >= self.counter_layout.ranks || expert >= self.counter_layout.ll_keys {
            return Err(Error::protocol(format!("LL key ({src}, {expert}) outside counter layout")));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn on_ll(
        &mut self,
        src: u32,
        kind: ImmKind,
        expert: u32,
        operand: u32,
        length: u32,
        at: Stamp,
        out: &mut Vec<Effect>,
    ) -> Result<()> {
        self.check_expert(src, expert)?;
        let key = (src, expert);
        let slot = self.counter_layout.ll_slot(src, expert);
        match kind {
            ImmKind::Data => {
                *self.ll_write_counts.entry(key).or_insert(0) += 1;
                out.push(self.effect(src, EffectKind::Data, expert, None, 0, at));
                self.flush_ll(key, slot, at, out);
            }
            ImmKind::Atomic if length > 0 => {
                // Piggybacked on its own write: the fence is the carrying write.
                let mut e = self.effect(src, EffectKind::PiggybackAtomic, expert, None, operand, at);
                e.counter_after = Some(self.counters.add(slot, operand as i64));
                out.push(e);
            }
            ImmKind::Atomic => {
                let pending = PendingLl { required: operand, operand };
                if self.enforcement == Enforcement::Sender {
                    self.apply_ll(key, slot, pending, false, at, out);
                } else {
                    self.ll_pending.entry(key).or_default().push_back(pending);
                    self.flush_ll(key, slot, at, out);
                }
            }
            ImmKind::BarrierReq | ImmKind::BarrierAck => unreachable!("decoded as barrier"),
        }
        Ok(())
    }

    fn flush_ll(&mut self, key: (u32, u32), slot: usize, at: Stamp, out: &mut Vec<Effect>) {
        loop {
            let have = self.ll_write_counts.get(&key).copied().unwrap_or(0);
            let Some(queue) = self.ll_pending.get_mut(&key) else { return };
            match queue.front() {
                Some(p) if have >= p.required as u64 => {
                    let p = queue.pop_front().expect("front exists");
                    if queue.is_empty() {
                        self.ll_pending.remove(&key);
                    }
                    self.apply_ll(key, slot, p, true, at, out);
                }
                _ => return,
            }
        }
    }

    fn apply_ll(
        &mut self,
        key: (u32, u32),
        slot: usize,
        p: PendingLl,
        consume: bool,
        at: Stamp,
        out: &mut Vec<Effect>,
    ) {
        if consume && p.required > 0 {
            *self.ll_write_counts.get_mut(&key).expect("fence passed") -= p.required as u64;
        }
        let mut e = self.effect(key.0, EffectKind::Atomic, key.1, None, p.operand, at);
        e.counter_after = Some(self.counters.add(slot, p.operand as i64));
        out.push(e);
    }

    #[allow(clippy::too_many_arguments)]
    fn on_ht(
        &mut self,
        src: u32,
        kind: ImmKind,
        channel: u32,
        seq: u16,
        operand: u8,
        length: u32,
        at: Stamp,
        out: &mut Vec<Effect>,
    ) -> Result<()> {
        if src >= self.counter_layout.ranks || channel >= self.counter_layout.channels {
            return Err(Error::protocol(format!("HT key ({src}, {channel}) outside counter layout")));
        }
        let key = (src, channel);
        // A piggybacked atomic occupies one sequence slot like any other word.
        let msg = PendingHt { kind, operand, piggyback: kind == ImmKind::Atomic && length > 0 };
        if self.enforcement == Enforcement::Sender {
            self.apply_ht(key, None, msg, at, out);
            return Ok(());
        }
        let cursor = self.ht_cursor(src, channel);
        let abs = unwrap_seq(cursor, seq)
            .filter(|abs| *abs >= cursor)
            .ok_or_else(|| Error::protocol(format!("duplicate HT sequence {seq} from {key:?}, cursor {cursor}")))?;
        debug_assert!(abs - cursor < SEQ_WINDOW as u64);
        if abs > cursor {
            let pending = self.ht_pending.entry(key).or_default();
            if pending.contains_key(&abs) {
                return Err(Error::protocol(format!("duplicate HT sequence {seq} from {key:?}")));
            }
            if pending.len() >= HT_PENDING_LIMIT {
                return Err(Error::protocol(format!("HT reorder buffer overflow for {key:?}")));
            }
            pending.insert(abs, msg);
            return Ok(());
        }
        self.apply_ht(key, Some(abs), msg, at, out);
        let mut next = abs + 1;
        if let Some(mut pending) = self.ht_pending.remove(&key) {
            while let Some(m) = pending.remove(&next) {
                self.apply_ht(key, Some(next), m, at, out);
                next += 1;
            }
            if !pending.is_empty() {
                self.ht_pending.insert(key, pending);
            }
        }
        self.ht_cursors.insert(key, next);
        Ok(())
    }

    fn apply_ht(&mut self, key: (u32, u32), seq: Option<u64>, m: PendingHt, at: Stamp, out: &mut Vec<Effect>) {
        if m.kind == ImmKind::Data {
            out.push(self.effect(key.0, EffectKind::Data, key.1, seq, 0, at));
            return;
        }
        let counter = if m.operand & 0x80 != 0 { RingCounter::Head } else { RingCounter::Tail };
        let value = (m.operand & 0x7f) as i64;
        let slot = self.counter_layout.ht_slot(key.0, key.1, counter);
        let kind = if m.piggyback { EffectKind::PiggybackAtomic } else { EffectKind::Atomic };
        let mut e = self.effect(key.0, kind, key.1, seq, m.operand as u32, at);
        e.counter_after = Some(self.counters.add(slot, value));
        out.push(e);
    }

    /// True iff nothing is buffered. Call only when the transport has no
    /// messages in flight.
    pub fn quiescence_check(&self) -> bool {
        self.ll_pending.is_empty() && self.ht_pending.is_empty()
    }

    /// Detailed check. `expected_cursors` maps `(src, channel)` to the number
    /// of sequenced words the sender issued to this buffer.
    pub fn quiescence_report(&self, expected_cursors: &HashMap<(u32, u32), u64>) -> QuiescenceReport {
        let mut report = QuiescenceReport::default();
        for (&(src, expert), queue) in &self.ll_pending {
            for p in queue {
                report.stuck_atomics.push(StuckAtomic {
                    src,
                    expert,
                    required: p.required,
                    received: self.ll_write_count(src, expert),
                });
            }
        }
        for (&(src, channel), pending) in &self.ht_pending {
            report.ht_gaps.push((src, channel, pending.len()));
        }
        if self.enforcement == Enforcement::Receiver {
            for (&(src, channel), &want) in expected_cursors {
                let have = self.ht_cursor(src, channel);
                if have != want {
                    report.cursor_mismatches.push((src, channel, have, want));
                }
            }
        }
        report.stuck_atomics.sort_by_key(|s| (s.src, s.expert));
        report.ht_gaps.sort_unstable();
        report.cursor_mismatches.sort_unstable();
        report
    }
}

/// Operand for an HT atomic imm: bit 7 selects the ring counter, bits 0..7
/// are the add value.
pub fn ht_operand(counter: RingCounter, value: u32) -> Result<u32> {
    if value > 0x7f {
        return Err(Error::protocol(format!("HT atomic value {value} exceeds 7 bits")));
    }
    Ok(((counter as u32) << 7) | value)
}
