//! Barrier protocols.
//!
//! * `AllPeers` is hierarchical. Ranks of a node rendezvous on node-local
//!   shared state whose leader is the lowest local rank. Node leaders then
//!   send `BARRIER_REQ` to the leader of node 0, which answers every node
//!   leader with `BARRIER_ACK`. Release runs in reverse.
//! * `SameRail` involves only the ranks with the same local index. Members
//!   send `BARRIER_REQ` to the member on node 0, which acknowledges each.
//!
//! Epochs count barriers per scope and per thread index; every rank must
//! issue a given barrier on a channel owned by the same thread index.

use std::collections::HashMap;
use std::sync::Mutex;

use super::ProxyConfig;
use crate::command::BarrierScope;
use crate::error::{Error, Result};
use crate::transport::{ImmKind, ImmWord, EPOCH_MASK};

#[derive(Debug, Default)]
struct Rendezvous {
    arrivals: HashMap<u32, u32>,
    released: Option<u32>,
}

/// Node-local shared state for the hierarchical barrier, one rendezvous per
/// `(node, thread index)`.
#[derive(Debug)]
pub struct BarrierHub {
    threads: u32,
    slots: Vec<Mutex<Rendezvous>>,
}

fn epoch_reached(current: Option<u32>, epoch: u32) -> bool {
    current.is_some_and(|c| (c.wrapping_sub(epoch) as i32) >= 0)
}

impl BarrierHub {
    pub fn new(nodes: u32, threads: u32) -> Self {
        BarrierHub { threads, slots: (0..nodes * threads).map(|_| Mutex::default()).collect() }
    }

    fn slot(&self, node: u32, thread: u32) -> std::sync::MutexGuard<'_, Rendezvous> {
        self.slots[(node * self.threads + thread) as usize].lock().unwrap_or_else(|p| p.into_inner())
    }

    fn arrive(&self, node: u32, thread: u32, epoch: u32) {
        *self.slot(node, thread).arrivals.entry(epoch).or_insert(0) += 1;
    }

    fn arrived(&self, node: u32, thread: u32, epoch: u32) -> u32 {
        self.slot(node, thread).arrivals.get(&epoch).copied().unwrap_or(0)
    }

    fn release(&self, node: u32, thread: u32, epoch: u32) {
        let mut s = self.slot(node, thread);
        s.arrivals.remove(&epoch);
        s.released = Some(epoch);
    }

    fn released(&self, node: u32, thread: u32, epoch: u32) -> bool {
        epoch_reached(self.slot(node, thread).released, epoch)
    }
}

/// Barrier control messages received but not yet consumed.
#[derive(Debug, Default)]
pub(crate) struct BarrierInbox {
    counts: HashMap<(BarrierScope, ImmKind, u32), u32>,
}

impl BarrierInbox {
    /// Records an incoming message after checking this rank may receive it.
    pub fn accept(&mut self, cfg: &ProxyConfig, rank: u32, word: ImmWord, done: [Option<u32>; 2]) -> Result<()> {
        let ImmWord::Barrier { kind, scope, epoch } = word else {
            return Err(Error::protocol("non-barrier word in barrier inbox"));
        };
        let (node, local) = (cfg.node_of(rank), cfg.local_of(rank));
        let allowed = match (scope, kind) {
            (BarrierScope::AllPeers, ImmKind::BarrierReq) => node == 0 && local == 0,
            (BarrierScope::AllPeers, ImmKind::BarrierAck) => node != 0 && local == 0,
            (BarrierScope::SameRail, ImmKind::BarrierReq) => node == 0,
            (BarrierScope::SameRail, ImmKind::BarrierAck) => node != 0,
            _ => false,
        };
        if !allowed {
            return Err(Error::protocol(format!("rank {rank} received unexpected {kind:?} for {scope:?} barrier")));
        }
        if let Some(last) = done[scope as usize] {
            let stale = (last.wrapping_sub(epoch) & EPOCH_MASK) <= (EPOCH_MASK >> 1);
            if stale {
                return Err(Error::protocol(format!(
                    "rank {rank} received {kind:?} for finished {scope:?} epoch {epoch} (last {last})"
                )));
            }
        }
        *self.counts.entry((scope, kind, epoch)).or_insert(0) += 1;
        Ok(())
    }

    fn take(&mut self, scope: BarrierScope, kind: ImmKind, epoch: u32, n: u32) -> bool {
        let key = (scope, kind, epoch & EPOCH_MASK);
        let have = self.counts.get(&key).copied().unwrap_or(0);
        if have < n {
            return false;
        }
        if have == n {
            self.counts.remove(&key);
        } else {
            self.counts.insert(key, have - n);
        }
        true
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Gather,
    AwaitReqs,
    AwaitAck,
    AwaitRelease,
}

/// One in-progress barrier on one proxy thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BarrierWait {
    pub scope: BarrierScope,
    pub epoch: u32,
    phase: Phase,
}

pub(crate) struct BarrierCtx<'a> {
    pub cfg: &'a ProxyConfig,
    pub hub: &'a BarrierHub,
    pub rank: u32,
    pub thread: u32,
}

impl BarrierWait {
    pub fn start(ctx: &BarrierCtx<'_>, scope: BarrierScope, epoch: u32) -> Self {
        let (node, local) = (ctx.cfg.node_of(ctx.rank), ctx.cfg.local_of(ctx.rank));
        let phase = match scope {
            BarrierScope::AllPeers => {
                ctx.hub.arrive(node, ctx.thread, epoch);
                if local == 0 {
                    Phase::Gather
                } else {
                    Phase::AwaitRelease
                }
            }
            BarrierScope::SameRail if node == 0 => Phase::AwaitReqs,
            BarrierScope::SameRail => Phase::Gather,
        };
        BarrierWait { scope, epoch, phase }
    }

    /// Drives the protocol; messages to send are appended to `out` as
    /// `(dst_rank, word)`. Returns true once this rank may leave.
    pub fn advance(&mut self, ctx: &BarrierCtx<'_>, inbox: &mut BarrierInbox, out: &mut Vec<(u32, ImmWord)>) -> bool {
        let cfg = ctx.cfg;
        let (node, local) = (cfg.node_of(ctx.rank), cfg.local_of(ctx.rank));
        let req = ImmWord::barrier_req(self.scope, self.epoch);
        let ack = ImmWord::barrier_ack(self.scope, self.epoch);
        loop {
            match (self.scope, self.phase) {
                (BarrierScope::AllPeers, Phase::Gather) => {
                    if ctx.hub.arrived(node, ctx.thread, self.epoch) < cfg.gpus_per_node {
                        return false;
                    }
                    if cfg.nodes == 1 {
                        ctx.hub.release(node, ctx.thread, self.epoch);
                        return true;
                    }
                    if node == 0 {
                        self.phase = Phase::AwaitReqs;
                    } else {
                        out.push((cfg.rank_at(0, 0), req));
                        self.phase = Phase::AwaitAck;
                    }
                }
                (BarrierScope::AllPeers, Phase::AwaitReqs) => {
                    if !inbox.take(self.scope, ImmKind::BarrierReq, self.epoch, cfg.nodes - 1) {
                        return false;
                    }
                    for n in 1..cfg.nodes {
                        out.push((cfg.rank_at(n, 0), ack));
                    }
                    ctx.hub.release(node, ctx.thread, self.epoch);
                    return true;
                }
                (BarrierScope::AllPeers, Phase::AwaitAck) => {
                    if !inbox.take(self.scope, ImmKind::BarrierAck, self.epoch, 1) {
                        return false;
                    }
                    ctx.hub.release(node, ctx.thread, self.epoch);
                    return true;
                }
                (BarrierScope::AllPeers, Phase::AwaitRelease) => {
                    return ctx.hub.released(node, ctx.thread, self.epoch);
                }
                (BarrierScope::SameRail, Phase::Gather) => {
                    out.push((cfg.rank_at(0, local), req));
                    self.phase = Phase::AwaitAck;
                }
                (BarrierScope::SameRail, Phase::AwaitReqs) => {
                    if !inbox.take(self.scope, ImmKind::BarrierReq, self.epoch, cfg.nodes - 1) {
                        return false;
                    }
                    for n in 1..cfg.nodes {
                        out.push((cfg.rank_at(n, local), ack));
                    }
                    return true;
                }
                (BarrierScope::SameRail, Phase::AwaitAck) => {
                    return inbox.take(self.scope, ImmKind::BarrierAck, self.epoch, 1);
                }
                (BarrierScope::SameRail, Phase::AwaitRelease) => unreachable!("same-rail barrier has no local release"),
            }
        }
    }
}
