//! All ranks' proxies over one fabric, plus the drivers that interleave the
//! emulated GPU side, the proxy threads and simulated time.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering::SeqCst};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;

use super::handshake::{HandshakeRecord, PeerTable, RecordKind};
use super::{BarrierHub, Mode, ProxyConfig, ProxyThread};
use crate::command::{self, CmdIndex, FifoProducer, TransferCmd, TryPush};
use crate::delivery::Effect;
use crate::error::{Error, Result};
use crate::transport::{Endpoint, Fabric, SharedFabric, TransportProfile};

/// Default bound on simulated time a single run may consume.
pub const DEFAULT_WATCHDOG_NS: u64 = 60_000_000_000;

/// Consecutive no-progress rounds tolerated by the threaded driver when no
/// event is pending.
const THREADED_STALL_LIMIT: u32 = 10_000;

/// The emulated GPU side: pushes commands and watches memory and counters.
pub trait GpuProgram {
    /// Advances the device side by one cooperative step. Returns whether
    /// anything changed.
    fn step(&mut self, dev: &mut Device<'_>) -> Result<bool>;

    fn is_done(&self) -> bool;
}

/// What a GPU program can touch during a step.
pub struct Device<'a> {
    fabric: &'a mut Fabric,
    producers: &'a mut [Vec<FifoProducer>],
}

impl Device<'_> {
    pub fn now(&self) -> u64 {
        self.fabric.now()
    }

    pub fn region(&self, rank: u32) -> &[u8] {
        self.fabric.region(rank)
    }

    pub fn region_mut(&mut self, rank: u32) -> &mut [u8] {
        self.fabric.region_mut(rank)
    }

    pub fn counter(&self, rank: u32, slot: usize) -> i64 {
        self.fabric.counters(rank).get(slot)
    }

    pub fn producer(&mut self, rank: u32, channel: u32) -> &mut FifoProducer {
        &mut self.producers[rank as usize][channel as usize]
    }

    /// Pushes unless the channel is full.
    pub fn try_push(&mut self, rank: u32, channel: u32, cmd: TransferCmd) -> Result<Option<CmdIndex>> {
        Ok(match self.producer(rank, channel).try_push(cmd)? {
            TryPush::Pushed(i) => Some(i),
            TryPush::Full => None,
        })
    }
}

pub struct Cluster {
    cfg: Arc<ProxyConfig>,
    fabric: SharedFabric,
    hub: Arc<BarrierHub>,
    peers: Arc<PeerTable>,
    records: Vec<HandshakeRecord>,
    producers: Vec<Vec<FifoProducer>>,
    workers: Vec<ProxyThread>,
    watchdog_ns: u64,
}

impl Cluster {
    /// Registers every rank's region, exchanges base addresses and creates
    /// the queue pairs.
    pub fn start(cfg: ProxyConfig, profile: TransportProfile, seed: u64) -> Result<Self> {
        cfg.validate()?;
        profile.validate()?;
        cfg.check_qp_budget(&profile)?;
        let cfg = Arc::new(cfg);
        let ep = cfg.ep_size();
        let layout = cfg.counter_layout();

        let mut fabric = Fabric::new(profile.clone(), seed)?;
        for _ in 0..ep {
            fabric.add_rank(cfg.region_len, layout.len());
        }

        let mut records = Vec::with_capacity((ep * cfg.num_threads * 2) as usize);
        for rank in 0..ep {
            for thread in 0..cfg.num_threads {
                for (kind, base, len) in [
                    (RecordKind::Region, fabric.region_base(rank)?, cfg.region_len as u32),
                    (RecordKind::Counters, fabric.counter_base(rank)?, (layout.len() * 8) as u32),
                ] {
                    let rec = HandshakeRecord { rank: rank as u16, thread: thread as u8, kind, len, base };
                    records.push(HandshakeRecord::from_bytes(&rec.to_bytes())?);
                }
            }
        }
        let peers = Arc::new(PeerTable::from_records(ep, &records)?);

        let mut producers = Vec::with_capacity(ep as usize);
        let mut workers = Vec::with_capacity((ep * cfg.num_threads) as usize);
        for rank in 0..ep {
            let mut rank_producers = Vec::with_capacity(cfg.channels() as usize);
            let mut consumers: Vec<Vec<_>> = (0..cfg.num_threads).map(|_| Vec::new()).collect();
            for c in 0..cfg.channels() {
                let (p, q) = command::channel(cfg.fifo_capacity)?;
                rank_producers.push(p);
                consumers[cfg.thread_of_channel(c) as usize].push((c, q));
            }
            producers.push(rank_producers);
            for (thread, owned) in consumers.into_iter().enumerate() {
                let endpoint = Endpoint { rank, thread: thread as u32 };
                let counters = Arc::clone(fabric.counters(rank));
                workers.push(ProxyThread::new(
                    Arc::clone(&cfg),
                    endpoint,
                    profile.clone(),
                    Arc::clone(&peers),
                    counters,
                    owned,
                ));
            }
        }

        for w in &mut workers {
            let src = w.endpoint();
            match cfg.mode {
                Mode::LowLatency => {
                    for dst in (0..ep).filter(|&d| d != src.rank) {
                        for nic in 0..profile.nics_per_rank {
                            let qp = fabric.connect(src, Endpoint { rank: dst, thread: src.thread }, nic)?;
                            w.add_ll_qp(dst, qp);
                        }
                    }
                }
                Mode::HighThroughput => {
                    let channels: Vec<u32> = w.channel_ids().collect();
                    for c in channels {
                        for node in 0..cfg.nodes {
                            let dst = cfg.rank_at(node, cfg.local_of(src.rank));
                            let nic = c % profile.nics_per_rank;
                            let qp = fabric.connect(src, Endpoint { rank: dst, thread: src.thread }, nic)?;
                            w.add_ht_qp(dst, c, qp);
                        }
                    }
                }
            }
        }

        Ok(Cluster {
            hub: Arc::new(BarrierHub::new(cfg.nodes, cfg.num_threads)),
            cfg,
            fabric: SharedFabric::new(fabric),
            peers,
            records,
            producers,
            workers,
            watchdog_ns: DEFAULT_WATCHDOG_NS,
        })
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.cfg
    }

    pub fn fabric(&self) -> MutexGuard<'_, Fabric> {
        self.fabric.lock()
    }

    pub fn peers(&self) -> &PeerTable {
        &self.peers
    }

    pub fn handshake_records(&self) -> &[HandshakeRecord] {
        &self.records
    }

    pub fn workers(&self) -> &[ProxyThread] {
        &self.workers
    }

    pub fn worker(&self, rank: u32, thread: u32) -> &ProxyThread {
        &self.workers[(rank * self.cfg.num_threads + thread) as usize]
    }

    pub fn producer(&mut self, rank: u32, channel: u32) -> &mut FifoProducer {
        &mut self.producers[rank as usize][channel as usize]
    }

    pub fn set_watchdog_ns(&mut self, ns: u64) {
        self.watchdog_ns = ns;
    }

    /// QPs created by the ranks of `node`.
    pub fn qps_on_node(&self, node: u32) -> u32 {
        let f = self.fabric.lock();
        (0..self.cfg.gpus_per_node).map(|l| f.qps_on_rank(self.cfg.rank_at(node, l))).sum()
    }

    /// Records fabric events and applied effects from now on.
    pub fn enable_trace(&mut self) {
        self.fabric.lock().enable_trace();
        for w in &mut self.workers {
            w.control_mut().enable_trace();
        }
    }

    /// Applied effects of every control buffer, grouped per proxy thread in
    /// application order.
    pub fn take_effects(&mut self) -> Vec<Effect> {
        self.workers.iter_mut().flat_map(|w| w.control_mut().take_trace()).collect()
    }

    /// One pass over every proxy thread without advancing time.
    pub fn step(&mut self) -> Result<bool> {
        let mut fabric = self.fabric.lock();
        let mut progress = false;
        for w in &mut self.workers {
            progress |= w.poll(&mut *fabric, &self.hub)?;
        }
        Ok(progress)
    }

    /// Runs the proxies and `prog` cooperatively on this thread until the
    /// program reports done. Simulated time advances only when neither side
    /// can make progress.
    pub fn run<P: GpuProgram + ?Sized>(&mut self, prog: &mut P) -> Result<()> {
        let start = self.fabric.lock().now();
        loop {
            let mut fabric = self.fabric.lock();
            let mut progress = prog.step(&mut Device { fabric: &mut fabric, producers: &mut self.producers })?;
            for w in &mut self.workers {
                progress |= w.poll(&mut *fabric, &self.hub)?;
            }
            if prog.is_done() {
                return Ok(());
            }
            if progress {
                continue;
            }
            if fabric.now() - start > self.watchdog_ns {
                return Err(Error::Watchdog(format!("no completion after {} ns of simulated time", self.watchdog_ns)));
            }
            if !fabric.advance_to_next()? {
                return Err(Error::Watchdog(format!(
                    "stalled at t={} ns: no progress and no pending fabric events",
                    fabric.now()
                )));
            }
        }
    }

    /// Serves and advances time until nothing more can happen. Blocked
    /// commands (a barrier missing participants, say) may remain.
    pub fn settle(&mut self) -> Result<()> {
        loop {
            if self.step()? {
                continue;
            }
            if !self.fabric.lock().advance_to_next()? {
                return Ok(());
            }
        }
    }

    /// Serves until nothing is in flight and no proxy thread has work left.
    pub fn run_until_idle(&mut self) -> Result<()> {
        let start = self.fabric.lock().now();
        loop {
            let mut fabric = self.fabric.lock();
            let mut progress = false;
            for w in &mut self.workers {
                progress |= w.poll(&mut *fabric, &self.hub)?;
            }
            if progress {
                continue;
            }
            if fabric.is_idle() && self.workers.iter().all(ProxyThread::is_quiet) {
                return Ok(());
            }
            if fabric.now() - start > self.watchdog_ns {
                return Err(Error::Watchdog(format!("not idle after {} ns of simulated time", self.watchdog_ns)));
            }
            if !fabric.advance_to_next()? {
                return Err(Error::Watchdog(format!("stalled at t={} ns with blocked proxy work", fabric.now())));
            }
        }
    }

    /// Like [`run`](Self::run), but every proxy thread runs on its own OS
    /// thread against the shared fabric. Simulated time advances once every
    /// proxy thread has completed a full pass without progress.
    pub fn run_threaded<P: GpuProgram + ?Sized>(&mut self, prog: &mut P) -> Result<()> {
        let Cluster { fabric, hub, producers, workers, watchdog_ns, .. } = self;
        let watchdog_ns = *watchdog_ns;
        let stop = AtomicBool::new(false);
        let tick = AtomicU64::new(0);
        let quiet: Vec<AtomicU64> = workers.iter().map(|_| AtomicU64::new(u64::MAX)).collect();
        let failure: Mutex<Option<Error>> = Mutex::new(None);

        let result = thread::scope(|s| {
            for (w, q) in workers.iter_mut().zip(&quiet) {
                let mut net = fabric.clone();
                let (stop, tick, failure, hub) = (&stop, &tick, &failure, &**hub);
                s.spawn(move || {
                    while !stop.load(SeqCst) {
                        let seen = tick.load(SeqCst);
                        match w.poll(&mut net, hub) {
                            Ok(true) => {
                                tick.fetch_add(1, SeqCst);
                            }
                            Ok(false) => {
                                q.store(seen, SeqCst);
                                thread::yield_now();
                            }
                            Err(e) => {
                                failure.lock().unwrap_or_else(|p| p.into_inner()).get_or_insert(e);
                                stop.store(true, SeqCst);
                            }
                        }
                    }
                });
            }

            let result = (|| -> Result<()> {
                let start = fabric.lock().now();
                let mut stalls = 0u32;
                while !stop.load(SeqCst) {
                    let progressed = {
                        let mut f = fabric.lock();
                        prog.step(&mut Device { fabric: &mut f, producers })?
                    };
                    if progressed {
                        tick.fetch_add(1, SeqCst);
                    }
                    if prog.is_done() {
                        return Ok(());
                    }
                    let seen = tick.load(SeqCst);
                    if progressed || quiet.iter().any(|q| q.load(SeqCst) != seen) {
                        thread::yield_now();
                        continue;
                    }
                    let mut f = fabric.lock();
                    if f.now() - start > watchdog_ns {
                        return Err(Error::Watchdog(format!("no completion after {watchdog_ns} ns of simulated time")));
                    }
                    if f.advance_to_next()? {
                        stalls = 0;
                    } else {
                        stalls += 1;
                        if stalls > THREADED_STALL_LIMIT {
                            return Err(Error::Watchdog(format!("stalled at t={} ns", f.now())));
                        }
                    }
                    drop(f);
                    tick.fetch_add(1, SeqCst);
                }
                Ok(())
            })();
            stop.store(true, SeqCst);
            result
        });
        if let Some(e) = failure.into_inner().unwrap_or_else(|p| p.into_inner()) {
            return Err(e);
        }
        result
    }

    /// Sequenced words each receiver should have applied, per proxy thread.
    fn expected_cursors(&self) -> HashMap<Endpoint, HashMap<(u32, u32), u64>> {
        let mut out: HashMap<Endpoint, HashMap<(u32, u32), u64>> = HashMap::new();
        for w in &self.workers {
            let src = w.endpoint();
            for ((dst, channel), n) in w.ht_issued() {
                let ep = Endpoint { rank: dst, thread: src.thread };
                out.entry(ep).or_default().insert((src.rank, channel), n);
            }
        }
        out
    }

    /// Fails unless the fabric is idle and every control buffer applied
    /// everything it was sent.
    pub fn check_quiescence(&self) -> Result<()> {
        if !self.fabric.lock().is_idle() {
            return Err(Error::Invariant("fabric still has messages in flight".into()));
        }
        let expected = self.expected_cursors();
        let empty = HashMap::new();
        for w in &self.workers {
            let ep = w.endpoint();
            let report = w.control().quiescence_report(expected.get(&ep).unwrap_or(&empty));
            if !report.is_clean() {
                return Err(Error::Invariant(format!("rank {} thread {}: {report:?}", ep.rank, ep.thread)));
            }
            if !w.is_quiet() {
                return Err(Error::Invariant(format!("rank {} thread {} has unfinished work", ep.rank, ep.thread)));
            }
        }
        Ok(())
    }
}
