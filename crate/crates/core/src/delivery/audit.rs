//! Offline audits over the fabric event trace and applied-effects trace.
//!
//! The fence audit needs the fabric event number of the first trace record
//! (1 when tracing was on from the start) to line deliveries up with effects.

use std::collections::HashMap;

use super::{Effect, EffectKind};
use crate::transport::{ImmKind, ImmLayout, ImmWord, QpId, TraceEvent, TraceRecord};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    /// Number of items checked (atomics or sequenced effects).
    pub checked: u64,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Verifies that every applied LL atomic for `(rank, src, expert)` was
/// applied after the cumulative number of writes it requires had been
/// delivered. `first_event` is the event number of `trace[0]`; `qp_ranks`
/// maps a QP to its `(src_rank, dst_rank)`.
pub fn audit_fence(
    trace: &[TraceRecord],
    first_event: u64,
    qp_ranks: impl Fn(QpId) -> (u32, u32),
    effects: &[Effect],
) -> AuditReport {
    let mut deliveries: HashMap<(u32, u32, u32), Vec<u64>> = HashMap::new();
    for (i, rec) in trace.iter().enumerate() {
        if rec.event != TraceEvent::Deliver {
            continue;
        }
        let Some(imm) = rec.imm else { continue };
        if let Ok(ImmWord::Ll { kind: ImmKind::Data, expert, .. }) = ImmWord::decode(imm, ImmLayout::LowLatency) {
            let (src, dst) = qp_ranks(rec.qp);
            deliveries.entry((dst, src, expert as u32)).or_default().push(first_event + i as u64);
        }
    }

    let mut atomics: Vec<&Effect> =
        effects.iter().filter(|e| e.layout == ImmLayout::LowLatency && e.kind == EffectKind::Atomic).collect();
    atomics.sort_by_key(|e| (e.rank, e.src, e.key, e.event_no));

    let mut report = AuditReport::default();
    let mut required: HashMap<(u32, u32, u32), u64> = HashMap::new();
    for e in atomics {
        let key = (e.rank, e.src, e.key);
        let need = required.entry(key).or_insert(0);
        *need += e.operand as u64;
        let delivered = deliveries.get(&key).map_or(0, |d| d.partition_point(|&ev| ev <= e.event_no)) as u64;
        report.checked += 1;
        if delivered < *need {
            report.violations.push(format!(
                "atomic on rank {} from {} expert {} applied at t={} with {delivered} of {} writes delivered",
                e.rank, e.src, e.key, e.t_ns, *need
            ));
        }
    }
    report
}

/// Verifies that HT effects per `(rank, src, channel)` carry the sequences
/// 0, 1, 2, ... in application order. Cross-channel order is not checked.
pub fn audit_ht_order(effects: &[Effect]) -> AuditReport {
    HtOrderAudit::default().feed(effects)
}

/// [`audit_ht_order`] over a trace consumed in pieces: cursors carry over
/// between calls to [`feed`](Self::feed).
#[derive(Debug, Clone, Default)]
pub struct HtOrderAudit {
    next: HashMap<(u32, u32, u32), u64>,
}

impl HtOrderAudit {
    pub fn feed(&mut self, effects: &[Effect]) -> AuditReport {
        let mut report = AuditReport::default();
        for e in effects.iter().filter(|e| e.layout == ImmLayout::HighThroughput) {
            let Some(seq) = e.seq else {
                report.violations.push(format!("HT effect without sequence: {e}"));
                continue;
            };
            let want = self.next.entry((e.rank, e.src, e.key)).or_insert(0);
            report.checked += 1;
            if seq != *want {
                report.violations.push(format!(
                    "rank {} src {} channel {}: applied seq {seq}, expected {}",
                    e.rank, e.src, e.key, *want
                ));
            }
            *want = seq + 1;
        }
        report
    }
}
