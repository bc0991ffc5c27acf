//! Emulated MoE dispatch and combine on top of the proxy.
//!
//! LL mode sends every (token, expert) pair as its own write and fences the
//! expert's counter; HT mode deduplicates tokens per destination node,
//! streams 32-token chunks through ring channels to the same-rail peer and
//! forwards them to local experts there. Combine runs the reverse path: LL
//! experts return weighted outputs, HT nodes return one partial sum per
//! token.

mod layout;
pub mod oracle;
mod plan;
mod programs;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use layout::{Layout, CHUNK_HEADER_BYTES, POISON, RECORD_HEADER_BYTES};
pub use plan::{
    decode_corpus, encode_corpus, inter_node_sends, plan_dedup, NodeRoute, RoutingPlan, TokenBatch, CORPUS_MAGIC,
    CORPUS_VERSION, WEIGHT_SUM_TOLERANCE,
};

use programs::{CounterWait, Lane, LlPhase, Outbox, Payload, RingPhase, RingRecord};

use crate::command::{CmdFlags, TransferCmd, DEFAULT_MAX_INFLIGHT};
use crate::delivery::{CounterLayout, Enforcement};
use crate::error::{Error, Result};
use crate::proxy::{Cluster, Mode, ProxyConfig};
use crate::transport::{TransportProfile, LL_MAX_OPERAND};

const DISPATCH_KEY: u32 = 0;
const COMBINE_KEY: u32 = 1;
const DISPATCH_TAG: u32 = 0x4449_5350;
const COMBINE_TAG: u32 = 0x434f_4d42;

/// What each expert computes on its tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertFn {
    /// Tokens echo back unchanged.
    #[default]
    Identity,
    /// `out = in + expert_id` on every fp64 lane; makes mis-routing visible.
    AddExpertId,
}

impl ExpertFn {
    pub fn apply(self, expert: u32, v: f64) -> f64 {
        match self {
            ExpertFn::Identity => v,
            ExpertFn::AddExpertId => v + expert as f64,
        }
    }
}

/// How an LL sender signals a batch of writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlSignal {
    /// One trailing atomic carrying the write count.
    #[default]
    Fence,
    /// Every write carries its own +1.
    Piggyback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceOrder {
    /// Ascending expert rank (LL) or ascending node (HT): bit-reproducible.
    #[default]
    Canonical,
    /// Contributions summed in the order they were observed.
    Arrival,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub nodes: u32,
    pub gpus_per_node: u32,
    pub mode: Mode,
    pub topk: u32,
    /// Receive capacity per source rank.
    pub max_tokens_per_rank: u32,
    pub hidden_bytes: u32,
    pub num_threads: u32,
    pub channels_per_thread: u32,
    pub fifo_capacity: usize,
    pub enforcement: Enforcement,
    pub emulate_atomics: bool,
    pub ll_signal: LlSignal,
    pub expert: ExpertFn,
    pub reduce: ReduceOrder,
    pub chunk_tokens: u32,
    pub ring_slots: u32,
}

impl EngineConfig {
    pub fn new(nodes: u32, gpus_per_node: u32, mode: Mode) -> Self {
        EngineConfig {
            nodes,
            gpus_per_node,
            mode,
            topk: 8.min(nodes * gpus_per_node),
            max_tokens_per_rank: 128,
            hidden_bytes: 7168,
            num_threads: 4,
            channels_per_thread: 2,
            fifo_capacity: DEFAULT_MAX_INFLIGHT,
            enforcement: Enforcement::Receiver,
            emulate_atomics: false,
            ll_signal: LlSignal::Fence,
            expert: ExpertFn::Identity,
            reduce: ReduceOrder::Canonical,
            chunk_tokens: 32,
            ring_slots: 16,
        }
    }

    pub fn ep_size(&self) -> u32 {
        self.nodes * self.gpus_per_node
    }

    pub fn channels(&self) -> u32 {
        self.num_threads * self.channels_per_thread
    }

    pub fn validate(&self) -> Result<()> {
        if self.topk == 0 || self.topk > self.ep_size() {
            return Err(Error::Config(format!("topk {} must be in 1..={}", self.topk, self.ep_size())));
        }
        if self.hidden_bytes == 0 || !self.hidden_bytes.is_multiple_of(8) {
            return Err(Error::Config(format!("hidden_bytes {} must be a positive multiple of 8", self.hidden_bytes)));
        }
        for (name, v) in [
            ("max_tokens_per_rank", self.max_tokens_per_rank),
            ("chunk_tokens", self.chunk_tokens),
            ("ring_slots", self.ring_slots),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.max_tokens_per_rank > LL_MAX_OPERAND {
            return Err(Error::Config(format!(
                "max_tokens_per_rank {} exceeds the fence operand limit {LL_MAX_OPERAND}",
                self.max_tokens_per_rank
            )));
        }
        Ok(())
    }

    fn layout(&self) -> Result<Layout> {
        Layout::new(
            self.mode,
            self.ep_size(),
            self.nodes,
            self.channels(),
            self.max_tokens_per_rank,
            self.hidden_bytes,
            self.topk,
            self.chunk_tokens,
            self.ring_slots,
        )
    }

    fn proxy_config(&self, layout: &Layout) -> ProxyConfig {
        let mut p = ProxyConfig::new(self.nodes, self.gpus_per_node, self.mode);
        p.num_threads = self.num_threads;
        p.channels_per_thread = self.channels_per_thread;
        p.fifo_capacity = self.fifo_capacity;
        p.enforcement = self.enforcement;
        p.emulate_atomics = self.emulate_atomics;
        p.region_len = layout.region_len();
        p.ll_window_bytes = layout.window as u32;
        p.ll_keys = 2;
        p
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PhaseReport {
    /// Simulated time until the last payload landed.
    pub time_ns: u64,
    /// Payload bytes carried between nodes.
    pub inter_node_bytes: u64,
    /// Chunk and record headers carried between nodes.
    pub overhead_bytes: u64,
    pub writes: u64,
    pub atomics: u64,
    /// HT chunks written.
    pub chunks: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IterationMetrics {
    pub dispatch_time_ns: u64,
    pub combine_time_ns: u64,
    /// Dispatch payload bytes between nodes.
    pub inter_node_bytes: u64,
    pub combine_inter_node_bytes: u64,
    pub overhead_bytes: u64,
    /// Messages posted on the fabric, including atomics.
    pub messages: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutput {
    pub metrics: IterationMetrics,
    /// `num_tokens x hidden_bytes / 8` combined values.
    pub combined: Vec<f64>,
    /// Inter-node sends issued per token during dispatch.
    pub inter_node_sends: Vec<u32>,
}

pub struct Engine {
    cfg: EngineConfig,
    layout: Layout,
    counters: CounterLayout,
    cluster: Cluster,
    /// Cumulative chunks per directed ring `(src, dst, channel)`.
    rings: BTreeMap<(u32, u32, u32), u64>,
    /// Expected cumulative value per `(rank, LL counter slot)`.
    ll_expected: BTreeMap<(u32, usize), i64>,
    received: Vec<u64>,
    inter_node_sends: Vec<u32>,
    ll_arrivals: Vec<(u32, u32)>,
    ht_arrivals: Vec<Vec<u32>>,
}

impl Engine {
    pub fn new(cfg: EngineConfig, profile: TransportProfile, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout()?;
        let pcfg = cfg.proxy_config(&layout);
        let counters = pcfg.counter_layout();
        let cluster = Cluster::start(pcfg, profile, seed)?;
        let ep = cfg.ep_size() as usize;
        Ok(Engine {
            cfg,
            layout,
            counters,
            cluster,
            rings: BTreeMap::new(),
            ll_expected: BTreeMap::new(),
            received: vec![0; ep],
            inter_node_sends: Vec::new(),
            ll_arrivals: Vec::new(),
            ht_arrivals: Vec::new(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn cluster_mut(&mut self) -> &mut Cluster {
        &mut self.cluster
    }

    /// Tokens each expert received in the last dispatch.
    pub fn received_counts(&self) -> &[u64] {
        &self.received
    }

    /// Copy of `expert`'s dispatch receive window, `[src][idx]` cells.
    pub fn expert_buffer(&self, expert: u32) -> Vec<u8> {
        self.cluster.fabric().region(expert)[self.layout.dispatch_area()].to_vec()
    }

    fn node(&self, rank: u32) -> u32 {
        rank / self.cfg.gpus_per_node
    }

    fn rank_at(&self, node: u32, local: u32) -> u32 {
        node * self.cfg.gpus_per_node + local
    }

    fn check_inputs(&self, plan: &RoutingPlan, batch: &TokenBatch) -> Result<()> {
        if plan.ep() != self.cfg.ep_size() {
            return Err(Error::Config(format!("plan EP {} differs from engine EP {}", plan.ep(), self.cfg.ep_size())));
        }
        if plan.topk() > self.cfg.topk {
            return Err(Error::Config(format!("plan topk {} exceeds configured topk {}", plan.topk(), self.cfg.topk)));
        }
        if plan.tokens_per_rank() > self.cfg.max_tokens_per_rank {
            return Err(Error::Config(format!(
                "{} tokens per rank overflow the receive capacity of {}",
                plan.tokens_per_rank(),
                self.cfg.max_tokens_per_rank
            )));
        }
        if batch.num_tokens() != plan.num_tokens() || batch.hidden_bytes() != self.cfg.hidden_bytes {
            return Err(Error::Config(format!(
                "batch of {} x {} bytes does not match plan of {} tokens and hidden_bytes {}",
                batch.num_tokens(),
                batch.hidden_bytes(),
                plan.num_tokens(),
                self.cfg.hidden_bytes
            )));
        }
        Ok(())
    }

    fn messages(&self) -> (u64, u64) {
        let s = self.cluster.fabric().stats();
        (s.posted_writes, s.posted_atomics)
    }

    fn now(&self) -> u64 {
        self.cluster.fabric().now()
    }

    /// Scatters `batch` to the experts `plan` names and waits until every
    /// expert holds all its tokens.
    pub fn dispatch(&mut self, plan: &RoutingPlan, batch: &TokenBatch) -> Result<PhaseReport> {
        self.check_inputs(plan, batch)?;
        let l = self.layout;
        let h = l.hidden as usize;
        {
            let mut fabric = self.cluster.fabric();
            for r in 0..self.cfg.ep_size() {
                let region = fabric.region_mut(r);
                region[l.dispatch_area()].fill(POISON);
                region[l.combine_area()].fill(POISON);
                for i in 0..plan.tokens_per_rank() {
                    let at = l.send(i);
                    region[at..at + h].copy_from_slice(batch.token(plan.token_id(r, i)));
                }
            }
        }
        self.received = vec![0; self.cfg.ep_size() as usize];
        self.inter_node_sends = vec![0; plan.num_tokens() as usize];
        let (w0, a0) = self.messages();
        let start = self.now();
        let mut report = match self.cfg.mode {
            Mode::LowLatency => self.dispatch_ll(plan)?,
            Mode::HighThroughput => self.dispatch_ht(plan)?,
        };
        report.time_ns -= start;
        let (w1, a1) = self.messages();
        report.writes = w1 - w0;
        report.atomics = a1 - a0;
        Ok(report)
    }

    fn ll_cmd(&self, dst: u32, channel: u32, src_off: usize, dst_off: usize) -> Result<TransferCmd> {
        let cmd = TransferCmd::write(dst, channel, src_off as u32, dst_off as u32, self.layout.hidden)?;
        Ok(match self.cfg.ll_signal {
            LlSignal::Fence => cmd,
            LlSignal::Piggyback => cmd.with_flags(CmdFlags::PIGGYBACK_ATOMIC),
        })
    }

    /// Queues the per-pair signal (fence mode) and counter waits for LL
    /// traffic `counts[(src, dst)]` under `key`.
    fn ll_signal(
        &mut self,
        outbox: &mut Outbox,
        counts: &BTreeMap<(u32, u32), u32>,
        key: u32,
    ) -> Result<Vec<CounterWait>> {
        let channels = self.cfg.channels();
        let mut waits = Vec::new();
        for (&(src, dst), &n) in counts {
            let slot = self.counters.ll_slot(src, key);
            if self.cfg.ll_signal == LlSignal::Fence {
                outbox.push(src, TransferCmd::atomic(dst, dst % channels, CounterLayout::slot_offset(slot), n)?);
            }
            let expected = self.ll_expected.entry((dst, slot)).or_insert(0);
            *expected += n as i64;
            waits.push(CounterWait { rank: dst, peer: src, slot, target: *expected });
        }
        Ok(waits)
    }

    fn dispatch_ll(&mut self, plan: &RoutingPlan) -> Result<PhaseReport> {
        let l = self.layout;
        let h = l.hidden as usize;
        let channels = self.cfg.channels();
        let mut outbox = Outbox::new(self.cfg.ep_size(), channels);
        let mut counts: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        let mut report = PhaseReport::default();
        for t in 0..plan.num_tokens() {
            let (s, i) = plan.source(t);
            for &e in plan.experts(t) {
                if e == s {
                    let mut fabric = self.cluster.fabric();
                    fabric.region_mut(s).copy_within(l.send(i)..l.send(i) + h, l.dispatch_recv(s, i));
                    self.received[e as usize] += 1;
                    continue;
                }
                outbox.push(s, self.ll_cmd(e, e % channels, l.send(i), l.dispatch_recv(s, i))?);
                *counts.entry((s, e)).or_insert(0) += 1;
                if self.node(e) != self.node(s) {
                    self.inter_node_sends[t as usize] += 1;
                    report.inter_node_bytes += h as u64;
                }
            }
        }
        let waits = self.ll_signal(&mut outbox, &counts, DISPATCH_KEY)?;
        let mut prog = LlPhase::new(outbox, waits.clone());
        self.cluster.run(&mut prog)?;
        report.time_ns = prog.finished_at.expect("finished");
        let fabric = self.cluster.fabric();
        for (w, (_, &n)) in waits.iter().zip(&counts) {
            let arrived = fabric.counters(w.rank).get(w.slot) - (w.target - n as i64);
            self.received[w.rank as usize] += arrived as u64;
        }
        Ok(report)
    }

    /// Chunks each `(src, dst)` record list round-robin over channels and
    /// builds the ring lanes.
    fn lanes(&self, lists: BTreeMap<(u32, u32), Vec<RingRecord>>, report: &mut PhaseReport) -> Vec<Lane> {
        let channels = self.cfg.channels();
        let mut lanes: BTreeMap<(u32, u32, u32), Lane> = BTreeMap::new();
        for ((src, dst), records) in lists {
            for (j, chunk) in records.chunks(self.cfg.chunk_tokens as usize).enumerate() {
                let channel = j as u32 % channels;
                let at = self.rings.get(&(src, dst, channel)).copied().unwrap_or(0);
                let lane = lanes.entry((src, dst, channel)).or_insert_with(|| Lane {
                    src,
                    dst,
                    src_node: self.node(src),
                    dst_node: self.node(dst),
                    channel,
                    chunks: Default::default(),
                    sent: at,
                    consumed: at,
                    target: at,
                });
                lane.chunks.push_back(chunk.to_vec());
                lane.target += 1;
                report.chunks += 1;
                report.overhead_bytes += (CHUNK_HEADER_BYTES + chunk.len() * RECORD_HEADER_BYTES) as u64;
            }
        }
        lanes.into_values().collect()
    }

    fn run_ring(
        &mut self,
        lanes: Vec<Lane>,
        tag: u32,
        deliver: Box<programs::Deliver<'_>>,
    ) -> Result<(u64, Vec<Lane>)> {
        let mut prog = RingPhase {
            layout: self.layout,
            counters: self.counters,
            phase_tag: tag,
            lanes,
            outbox: Outbox::new(self.cfg.ep_size(), self.cfg.channels()),
            deliver,
            data_done_at: None,
            finished_at: None,
        };
        self.cluster.run(&mut prog)?;
        Ok((prog.data_done_at.expect("finished"), std::mem::take(&mut prog.lanes)))
    }

    fn dispatch_ht(&mut self, plan: &RoutingPlan) -> Result<PhaseReport> {
        let l = self.layout;
        let h = l.hidden as usize;
        let gpn = self.cfg.gpus_per_node;
        let routes = plan_dedup(plan, gpn);
        let mut lists: BTreeMap<(u32, u32), Vec<RingRecord>> = BTreeMap::new();
        let mut report = PhaseReport::default();
        for t in 0..plan.num_tokens() {
            let (s, i) = plan.source(t);
            let home = self.node(s);
            for route in &routes[t as usize] {
                if route.node == home {
                    let mut fabric = self.cluster.fabric();
                    let payload = fabric.region(s)[l.send(i)..l.send(i) + h].to_vec();
                    for &e in &route.experts {
                        fabric.region_mut(e)[l.dispatch_recv(s, i)..][..h].copy_from_slice(&payload);
                        self.received[e as usize] += 1;
                    }
                    continue;
                }
                let mask = route.experts.iter().fold(0u64, |m, e| m | 1 << (e % gpn));
                let peer = self.rank_at(route.node, s % gpn);
                lists.entry((s, peer)).or_default().push(RingRecord {
                    token: t,
                    idx: i,
                    tag: mask,
                    payload: Payload::At(l.send(i)),
                });
                self.inter_node_sends[t as usize] += 1;
                report.inter_node_bytes += h as u64;
            }
        }
        let lanes = self.lanes(lists, &mut report);
        let received = &mut self.received;
        let deliver = Box::new(
            move |dev: &mut crate::proxy::Device<'_>,
                  dst: u32,
                  src: u32,
                  hdr: programs::RecordHeader,
                  payload: std::ops::Range<usize>| {
                if plan.source(hdr.token) != (src, hdr.idx) {
                    return Err(Error::Invariant(format!(
                        "rank {dst} got token {} from rank {src} index {}, which that rank does not own",
                        hdr.token, hdr.idx
                    )));
                }
                let data = dev.region(dst)[payload].to_vec();
                let node = dst / gpn;
                for b in 0..gpn {
                    if hdr.tag & (1 << b) != 0 {
                        let e = node * gpn + b;
                        dev.region_mut(e)[l.dispatch_recv(src, hdr.idx)..][..h].copy_from_slice(&data);
                        received[e as usize] += 1;
                    }
                }
                Ok(())
            },
        );
        let (done, lanes) = {
            let mut prog = RingPhase {
                layout: self.layout,
                counters: self.counters,
                phase_tag: DISPATCH_TAG,
                lanes,
                outbox: Outbox::new(self.cfg.ep_size(), self.cfg.channels()),
                deliver,
                data_done_at: None,
                finished_at: None,
            };
            self.cluster.run(&mut prog)?;
            (prog.data_done_at.expect("finished"), std::mem::take(&mut prog.lanes))
        };
        for lane in lanes {
            self.rings.insert((lane.src, lane.dst, lane.channel), lane.target);
        }
        report.time_ns = done;
        Ok(report)
    }

    /// Runs every expert over the tokens it received.
    pub fn compute_experts(&mut self, plan: &RoutingPlan) {
        let l = self.layout;
        let h = l.hidden as usize;
        let f = self.cfg.expert;
        let mut fabric = self.cluster.fabric();
        for t in 0..plan.num_tokens() {
            let (s, i) = plan.source(t);
            for &e in plan.experts(t) {
                let region = fabric.region_mut(e);
                let (from, to) = (l.dispatch_recv(s, i), l.out(s, i));
                match f {
                    ExpertFn::Identity => region.copy_within(from..from + h, to),
                    ExpertFn::AddExpertId => {
                        for k in (0..h).step_by(8) {
                            let v = f64::from_le_bytes(region[from + k..from + k + 8].try_into().expect("8"));
                            region[to + k..to + k + 8].copy_from_slice(&f.apply(e, v).to_le_bytes());
                        }
                    }
                }
            }
        }
    }

    /// Returns expert outputs to their source ranks and reduces them.
    pub fn combine(&mut self, plan: &RoutingPlan) -> Result<(Vec<f64>, PhaseReport)> {
        let (w0, a0) = self.messages();
        let start = self.now();
        let mut report = match self.cfg.mode {
            Mode::LowLatency => self.combine_ll(plan)?,
            Mode::HighThroughput => self.combine_ht(plan)?,
        };
        report.time_ns -= start;
        let (w1, a1) = self.messages();
        report.writes = w1 - w0;
        report.atomics = a1 - a0;
        Ok((self.reduce(plan)?, report))
    }

    fn combine_ll(&mut self, plan: &RoutingPlan) -> Result<PhaseReport> {
        let l = self.layout;
        let h = l.hidden as usize;
        let channels = self.cfg.channels();
        let mut outbox = Outbox::new(self.cfg.ep_size(), channels);
        let mut counts: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        let mut report = PhaseReport::default();
        for t in 0..plan.num_tokens() {
            let (s, i) = plan.source(t);
            for (k, (&e, &w)) in plan.experts(t).iter().zip(plan.weights(t)).enumerate() {
                {
                    let mut fabric = self.cluster.fabric();
                    let region = fabric.region_mut(e);
                    let (from, to) = (l.out(s, i), l.wout(s, i));
                    for b in (0..h).step_by(8) {
                        let v = f64::from_le_bytes(region[from + b..from + b + 8].try_into().expect("8"));
                        region[to + b..to + b + 8].copy_from_slice(&(w * v).to_le_bytes());
                    }
                    if e == s {
                        region.copy_within(to..to + h, l.combine_recv(i, k as u32));
                        continue;
                    }
                }
                outbox.push(e, self.ll_cmd(s, s % channels, l.wout(s, i), l.combine_recv(i, k as u32))?);
                *counts.entry((e, s)).or_insert(0) += 1;
                if self.node(e) != self.node(s) {
                    report.inter_node_bytes += h as u64;
                }
            }
        }
        let waits = self.ll_signal(&mut outbox, &counts, COMBINE_KEY)?;
        let mut prog = LlPhase::new(outbox, waits);
        self.cluster.run(&mut prog)?;
        report.time_ns = prog.finished_at.expect("finished");
        self.ll_arrivals = std::mem::take(&mut prog.arrivals);
        Ok(report)
    }

    fn combine_ht(&mut self, plan: &RoutingPlan) -> Result<PhaseReport> {
        let l = self.layout;
        let h = l.hidden as usize;
        let gpn = self.cfg.gpus_per_node;
        let routes = plan_dedup(plan, gpn);
        let mut lists: BTreeMap<(u32, u32), Vec<RingRecord>> = BTreeMap::new();
        let mut report = PhaseReport::default();
        let mut arrivals: Vec<Vec<u32>> = vec![Vec::new(); plan.num_tokens() as usize];
        for t in 0..plan.num_tokens() {
            let (s, i) = plan.source(t);
            let home = self.node(s);
            for route in &routes[t as usize] {
                let mut partial = vec![0.0f64; h / 8];
                {
                    let fabric = self.cluster.fabric();
                    for &e in &route.experts {
                        let w = plan.weight_of(t, e).expect("routed");
                        let out = &fabric.region(e)[l.out(s, i)..][..h];
                        for (p, v) in partial.iter_mut().zip(oracle::f64s(out)) {
                            *p += w * v;
                        }
                    }
                }
                let bytes: Vec<u8> = partial.iter().flat_map(|v| v.to_le_bytes()).collect();
                if route.node == home {
                    self.cluster.fabric().region_mut(s)[l.combine_recv(i, route.node)..][..h].copy_from_slice(&bytes);
                    arrivals[t as usize].push(route.node);
                    continue;
                }
                let peer = self.rank_at(route.node, s % gpn);
                lists.entry((peer, s)).or_default().push(RingRecord {
                    token: t,
                    idx: i,
                    tag: route.node as u64,
                    payload: Payload::Inline(bytes),
                });
                report.inter_node_bytes += h as u64;
            }
        }
        let lanes = self.lanes(lists, &mut report);
        let arrivals_ref = &mut arrivals;
        let deliver = Box::new(
            move |dev: &mut crate::proxy::Device<'_>,
                  dst: u32,
                  src: u32,
                  hdr: programs::RecordHeader,
                  payload: std::ops::Range<usize>| {
                if plan.source(hdr.token) != (dst, hdr.idx) || hdr.tag != (src / gpn) as u64 {
                    return Err(Error::Invariant(format!(
                        "rank {dst} got a partial for token {} (index {}, node tag {}) from rank {src}",
                        hdr.token, hdr.idx, hdr.tag
                    )));
                }
                let region = dev.region_mut(dst);
                region.copy_within(payload, l.combine_recv(hdr.idx, hdr.tag as u32));
                arrivals_ref[hdr.token as usize].push(hdr.tag as u32);
                Ok(())
            },
        );
        let (done, lanes) = self.run_ring(lanes, COMBINE_TAG, deliver)?;
        for lane in lanes {
            self.rings.insert((lane.src, lane.dst, lane.channel), lane.target);
        }
        for (t, seen) in arrivals.iter().enumerate() {
            if seen.len() != routes[t].len() {
                return Err(Error::Invariant(format!(
                    "token {t} has {} of {} node partials at quiescence",
                    seen.len(),
                    routes[t].len()
                )));
            }
        }
        self.ht_arrivals = arrivals;
        report.time_ns = done;
        Ok(report)
    }

    fn reduce(&self, plan: &RoutingPlan) -> Result<Vec<f64>> {
        let l = self.layout;
        let h = l.hidden as usize;
        let width = h / 8;
        let gpn = self.cfg.gpus_per_node;
        let fabric = self.cluster.fabric();
        let mut out = Vec::with_capacity(plan.num_tokens() as usize * width);
        let mut ll_rank: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        for (n, &(rank, peer)) in self.ll_arrivals.iter().enumerate() {
            ll_rank.insert((rank, peer), n + 1);
        }
        for t in 0..plan.num_tokens() {
            let (s, i) = plan.source(t);
            let slots: Vec<u32> = match self.cfg.mode {
                Mode::LowLatency => {
                    let mut ks: Vec<(u32, u32)> =
                        plan.experts(t).iter().enumerate().map(|(k, &e)| (e, k as u32)).collect();
                    match self.cfg.reduce {
                        ReduceOrder::Canonical => ks.sort_unstable(),
                        ReduceOrder::Arrival => {
                            ks.sort_by_key(
                                |&(e, _)| if e == s { 0 } else { ll_rank.get(&(s, e)).copied().unwrap_or(usize::MAX) },
                            )
                        }
                    }
                    ks.into_iter().map(|(_, k)| k).collect()
                }
                Mode::HighThroughput => match self.cfg.reduce {
                    ReduceOrder::Canonical => {
                        let mut nodes: Vec<u32> = plan.experts(t).iter().map(|e| e / gpn).collect();
                        nodes.sort_unstable();
                        nodes.dedup();
                        nodes
                    }
                    ReduceOrder::Arrival => self.ht_arrivals[t as usize].clone(),
                },
            };
            let region = fabric.region(s);
            let mut acc = vec![0.0f64; width];
            for slot in slots {
                let cell = &region[l.combine_recv(i, slot)..][..h];
                if cell.iter().all(|&b| b == POISON) {
                    return Err(Error::Invariant(format!("token {t}: combine slot {slot} never written")));
                }
                for (a, v) in acc.iter_mut().zip(oracle::f64s(cell)) {
                    *a += v;
                }
            }
            out.extend(acc);
        }
        Ok(out)
    }

    /// Checks that every LL counter holds exactly its expected value and the
    /// proxies are quiescent.
    pub fn check_quiescence(&mut self) -> Result<()> {
        self.cluster.run_until_idle()?;
        self.cluster.check_quiescence()?;
        let fabric = self.cluster.fabric();
        for (&(rank, slot), &want) in &self.ll_expected {
            let got = fabric.counters(rank).get(slot);
            if got != want {
                return Err(Error::Invariant(format!("rank {rank} counter slot {slot} is {got}, expected {want}")));
            }
        }
        for (&(src, dst, channel), &n) in &self.rings {
            let tail =
                fabric.counters(dst).get(self.counters.ht_slot(src, channel, crate::delivery::RingCounter::Tail));
            let head =
                fabric.counters(src).get(self.counters.ht_slot(dst, channel, crate::delivery::RingCounter::Head));
            if tail as u64 != n || head as u64 != n {
                return Err(Error::Invariant(format!(
                    "ring {src}->{dst} channel {channel}: tail {tail}, head {head}, expected {n}"
                )));
            }
        }
        Ok(())
    }

    /// Dispatch, expert compute, combine and a quiescence check.
    pub fn run_iteration(&mut self, plan: &RoutingPlan, batch: &TokenBatch) -> Result<IterationOutput> {
        let (w0, a0) = self.messages();
        let d = self.dispatch(plan, batch)?;
        self.compute_experts(plan);
        let (combined, c) = self.combine(plan)?;
        self.check_quiescence()?;
        let (w1, a1) = self.messages();
        Ok(IterationOutput {
            metrics: IterationMetrics {
                dispatch_time_ns: d.time_ns,
                combine_time_ns: c.time_ns,
                inter_node_bytes: d.inter_node_bytes,
                combine_inter_node_bytes: c.inter_node_bytes,
                overhead_bytes: d.overhead_bytes + c.overhead_bytes,
                messages: (w1 - w0) + (a1 - a0),
            },
            combined,
            inter_node_sends: std::mem::take(&mut self.inter_node_sends),
        })
    }

    /// Inter-node sends per token issued by the last dispatch.
    pub fn last_inter_node_sends(&self) -> &[u32] {
        &self.inter_node_sends
    }

    /// Differences between the experts' receive windows and the oracle
    /// scatter, plus per-expert count mismatches.
    pub fn dispatch_violations(&self, plan: &RoutingPlan, batch: &TokenBatch) -> Vec<String> {
        let mut out = Vec::new();
        for e in 0..self.cfg.ep_size() {
            let want = oracle::scatter(plan, batch, self.cfg.max_tokens_per_rank, e);
            if self.expert_buffer(e) != want {
                out.push(format!("expert {e}: receive buffer differs from the oracle scatter"));
            }
            let expect: u64 = (0..self.cfg.ep_size()).map(|s| plan.count(s, e) as u64).sum();
            if self.received[e as usize] != expect {
                out.push(format!("expert {e}: received {} tokens, plan assigns {expect}", self.received[e as usize]));
            }
        }
        out
    }
}
