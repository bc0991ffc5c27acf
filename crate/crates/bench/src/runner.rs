//! Scenario execution. Everything in the report is simulated time or a
//! count, so a scenario and seed always produce the same report, except
//! for `fifo_stress`, which measures wall-clock throughput.

use std::fmt::Write as _;

use ep_proxy::command::{fifo_stress, TransferCmd};
use ep_proxy::delivery::{audit_fence, CounterLayout, Enforcement, HtOrderAudit, RingCounter};
use ep_proxy::engine::{oracle, Engine, ReduceOrder, RoutingPlan, TokenBatch};
use ep_proxy::proxy::{Cluster, CommandScript, Mode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scenario::{Kind, Scenario};
use crate::BenchError;

/// Relative tolerance for arrival-order reduction against the oracle.
pub const ARRIVAL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum TraceSel {
    #[default]
    None,
    Events,
    Effects,
    All,
}

impl TraceSel {
    fn events(self) -> bool {
        matches!(self, TraceSel::Events | TraceSel::All)
    }

    fn effects(self) -> bool {
        matches!(self, TraceSel::Effects | TraceSel::All)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replaces the scenario's seed.
    pub seed: Option<u64>,
    /// Which traces to keep as text in [`RunOutput`].
    pub trace: TraceSel,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    /// Header, per-point summaries and comparisons.
    pub report: String,
    /// One `key=value` line per iteration.
    pub metrics: String,
    pub events: String,
    pub effects: String,
    /// Audit failures, oracle mismatches and runtime errors.
    pub violations: Vec<String>,
}

impl RunOutput {
    fn violation(&mut self, msg: String) {
        self.violations.push(msg);
    }
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(values: &[u64], p: f64) -> u64 {
    if values.is_empty() {
        return 0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

pub fn run(s: &Scenario, opts: &RunOptions) -> Result<RunOutput, BenchError> {
    s.validate()?;
    let seed = opts.seed.unwrap_or(s.seed);
    let mut out = RunOutput::default();
    match s.kind {
        Kind::Moe => {
            header(&mut out, s, seed);
            let mut ll_bytes = Vec::new();
            let mut ht_bytes = Vec::new();
            for tokens in s.token_points()? {
                for mode in s.modes() {
                    let sum = moe_point(s, mode, tokens, s.enforcement_side, seed, opts.trace, &mut out)?;
                    match mode {
                        Mode::LowLatency => ll_bytes.push((tokens, sum.bytes_median)),
                        Mode::HighThroughput => ht_bytes.push((tokens, sum.bytes_median)),
                    }
                }
            }
            for (&(tokens, ll), &(_, ht)) in ll_bytes.iter().zip(&ht_bytes) {
                let _ =
                    writeln!(out.report, "compare tokens={tokens} ll_inter_node_bytes={ll} ht_inter_node_bytes={ht}");
                if ht > ll {
                    out.violation(format!("tokens {tokens}: HT sent {ht} inter-node bytes, more than LL ({ll})"));
                }
            }
        }
        Kind::Enforcement => {
            header(&mut out, s, seed);
            for tokens in s.token_points()? {
                for mode in s.modes() {
                    let recv = moe_point(s, mode, tokens, Enforcement::Receiver, seed, opts.trace, &mut out)?;
                    let send = moe_point(s, mode, tokens, Enforcement::Sender, seed, opts.trace, &mut out)?;
                    let _ = writeln!(
                        out.report,
                        "enforcement tokens={tokens} mode={} receiver_dispatch_ns={} sender_dispatch_ns={} \
                         receiver_combine_ns={} sender_combine_ns={}",
                        mode_name(mode),
                        recv.dispatch_median,
                        send.dispatch_median,
                        recv.combine_median,
                        send.combine_median
                    );
                }
            }
        }
        Kind::Fuzz => {
            header(&mut out, s, seed);
            fuzz(s, seed, opts.trace, &mut out)?;
        }
        Kind::FifoStress => {
            let f = s.fifo.as_ref().expect("validated");
            let rep = fifo_stress(f.channels, f.messages, f.capacity)?;
            let _ = writeln!(
                out.report,
                "fifo_stress channels={} messages={} capacity={}",
                f.channels, f.messages, f.capacity
            );
            for (ch, c) in rep.channels.iter().enumerate() {
                let _ = writeln!(
                    out.metrics,
                    "channel={ch} commands={} cmds_per_sec={:.0} violations={} polls={} producer_head_refreshes={} \
                     consumer_tail_refreshes={}",
                    c.commands,
                    c.cmds_per_sec(),
                    c.violations,
                    c.stats.polls,
                    c.stats.producer_head_refreshes,
                    c.stats.consumer_tail_refreshes
                );
            }
            let _ = writeln!(
                out.report,
                "summary commands={} elapsed_s={:.3} cmds_per_sec={:.0} violations={}",
                rep.total_commands(),
                rep.elapsed.as_secs_f64(),
                rep.aggregate_cmds_per_sec(),
                rep.violations()
            );
            if rep.violations() > 0 {
                out.violation(format!("{} commands lost, duplicated or reordered", rep.violations()));
            }
        }
    }
    let _ = writeln!(out.report, "violations={}", out.violations.len());
    Ok(out)
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::LowLatency => "ll",
        Mode::HighThroughput => "ht",
    }
}

fn header(out: &mut RunOutput, s: &Scenario, seed: u64) {
    let t = s.transport();
    let _ = writeln!(
        out.report,
        "scenario kind={:?} ep_size={} nodes={} gpus_per_node={} topk={} hidden_bytes={} iterations={} seed={seed} \
         ordering={:?} hw_atomics={} rtt_ns={}",
        s.kind,
        s.ep_size.unwrap_or(0),
        s.nodes.unwrap_or(0),
        s.gpus_per_node.unwrap_or(0),
        s.topk,
        s.hidden_bytes,
        s.iterations,
        t.ordering,
        t.hw_atomics,
        t.rtt_ns
    );
}

struct PointSummary {
    dispatch_median: u64,
    combine_median: u64,
    bytes_median: u64,
}

/// Plans for a point depend only on the seed and the token count, so every
/// mode and enforcement side sees the same workload.
fn point_rng(seed: u64, tokens: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (tokens as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn moe_point(
    s: &Scenario,
    mode: Mode,
    tokens: u32,
    enforcement: Enforcement,
    seed: u64,
    trace: TraceSel,
    out: &mut RunOutput,
) -> Result<PointSummary, BenchError> {
    let mut cfg = s.engine_config(mode, tokens);
    cfg.enforcement = enforcement;
    let ep = cfg.ep_size();
    let tpr = tokens / ep;
    let gpn = cfg.gpus_per_node;
    let (expert_fn, reduce) = (cfg.expert, cfg.reduce);
    let mut engine = Engine::new(cfg, s.transport(), seed)?;
    engine.cluster_mut().enable_trace();
    let mut rng = point_rng(seed, tokens);
    let mut ht_audit = HtOrderAudit::default();
    let tag = format!("tokens={tokens} mode={} enforcement={enforcement:?}", mode_name(mode)).to_lowercase();
    let (mut dispatch, mut combine, mut bytes, mut overhead, mut messages) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let before = out.violations.len();

    for it in 0..s.iterations {
        let plan = RoutingPlan::random(ep, tpr, s.topk, &mut rng)?;
        let batch = TokenBatch::random_f64(tokens, s.hidden_bytes, &mut rng)?;
        let first_event = engine.cluster().fabric().event_no() + 1;
        let res = match engine.run_iteration(&plan, &batch) {
            Ok(r) => r,
            Err(ep_proxy::Error::Config(msg)) => return Err(BenchError::Config(msg)),
            Err(e) => {
                out.violation(format!("{tag} iter={it}: {e}"));
                break;
            }
        };
        for v in engine.dispatch_violations(&plan, &batch) {
            out.violation(format!("{tag} iter={it}: {v}"));
        }
        let want = oracle::combine(&plan, &batch, expert_fn, mode, gpn);
        match reduce {
            ReduceOrder::Canonical => {
                if let Some(i) = res.combined.iter().zip(&want).position(|(a, b)| a.to_bits() != b.to_bits()) {
                    out.violation(format!(
                        "{tag} iter={it}: combined[{i}] = {} differs from oracle {}",
                        res.combined[i], want[i]
                    ));
                }
            }
            ReduceOrder::Arrival => {
                let err = oracle::max_rel_error(&res.combined, &want);
                if err > ARRIVAL_TOLERANCE {
                    out.violation(format!(
                        "{tag} iter={it}: combine relative error {err:e} over {ARRIVAL_TOLERANCE:e}"
                    ));
                }
            }
        }

        let records = engine.cluster().fabric().take_trace();
        let effects = engine.cluster_mut().take_effects();
        let rep = match mode {
            Mode::LowLatency => {
                let fabric = engine.cluster().fabric();
                audit_fence(
                    &records,
                    first_event,
                    |qp| fabric.qp_info(qp).map(|i| (i.src.rank, i.dst.rank)).expect("traced qp is known"),
                    &effects,
                )
            }
            // Sender-side enforcement applies HT effects on arrival, unsequenced;
            // the oracle checks above still cover it.
            Mode::HighThroughput if enforcement == Enforcement::Sender => Default::default(),
            Mode::HighThroughput => ht_audit.feed(&effects),
        };
        for v in rep.violations {
            out.violation(format!("{tag} iter={it}: {v}"));
        }
        if trace.events() {
            for r in &records {
                let _ = writeln!(out.events, "{tag} {r}");
            }
        }
        if trace.effects() {
            for e in &effects {
                let _ = writeln!(out.effects, "{tag} {e}");
            }
        }

        let m = res.metrics;
        let _ = writeln!(
            out.metrics,
            "{tag} iter={it} dispatch_ns={} combine_ns={} inter_node_bytes={} combine_inter_node_bytes={} \
             overhead_bytes={} messages={}",
            m.dispatch_time_ns,
            m.combine_time_ns,
            m.inter_node_bytes,
            m.combine_inter_node_bytes,
            m.overhead_bytes,
            m.messages
        );
        dispatch.push(m.dispatch_time_ns);
        combine.push(m.combine_time_ns);
        bytes.push(m.inter_node_bytes);
        overhead.push(m.overhead_bytes);
        messages.push(m.messages);
    }
    if let Err(e) = engine.check_quiescence() {
        out.violation(format!("{tag}: {e}"));
    }

    let sum = PointSummary {
        dispatch_median: percentile(&dispatch, 50.0),
        combine_median: percentile(&combine, 50.0),
        bytes_median: percentile(&bytes, 50.0),
    };
    let _ = writeln!(
        out.report,
        "summary {tag} iterations={} dispatch_ns_median={} dispatch_ns_p99={} combine_ns_median={} combine_ns_p99={} \
         inter_node_bytes_median={} overhead_bytes_median={} messages_median={} violations={}",
        dispatch.len(),
        sum.dispatch_median,
        percentile(&dispatch, 99.0),
        sum.combine_median,
        percentile(&combine, 99.0),
        sum.bytes_median,
        percentile(&overhead, 50.0),
        percentile(&messages, 50.0),
        out.violations.len() - before
    );
    Ok(sum)
}

/// Random writes and counter atomics pushed straight into the proxies:
/// LL atomics fence on the writes sharing their key, HT messages are
/// sequenced per channel.
fn fuzz(s: &Scenario, seed: u64, trace: TraceSel, out: &mut RunOutput) -> Result<(), BenchError> {
    let f = s.fuzz.as_ref().expect("validated");
    let mode = s.modes()[0];
    let cfg = s.proxy_config(mode);
    let ep = cfg.ep_size();
    let layout = cfg.counter_layout();
    let (mut checked, mut msgs) = (0u64, 0u64);
    for round in 0..f.rounds {
        let round_seed = seed.wrapping_add(round as u64);
        let mut c = Cluster::start(cfg.clone(), s.transport(), round_seed)?;
        c.enable_trace();
        let mut rng = ChaCha8Rng::seed_from_u64(round_seed);
        let mut script = CommandScript::new();
        let mut expected = std::collections::BTreeMap::new();
        let window = cfg.ll_window_bytes;
        for rank in 0..ep {
            for ch in 0..cfg.channels() {
                let mut pushed = 0;
                while pushed < f.messages_per_channel {
                    match mode {
                        Mode::LowLatency => {
                            let dst = rng.gen_range(0..ep);
                            if dst == rank {
                                continue;
                            }
                            let key = rng.gen_range(0..cfg.ll_keys);
                            let x = rng.gen_range(1..=4u32);
                            for _ in 0..x {
                                let off = key * window + rng.gen_range(0..window - 256);
                                script.push(rank, ch, TransferCmd::write(dst, ch, 0, off, rng.gen_range(1..256))?);
                            }
                            let slot = layout.ll_slot(rank, key);
                            script.push(rank, ch, TransferCmd::atomic(dst, ch, CounterLayout::slot_offset(slot), x)?);
                            *expected.entry((dst, slot)).or_insert(0i64) += x as i64;
                            pushed += x + 1;
                        }
                        Mode::HighThroughput => {
                            let dst = cfg.rank_at(rng.gen_range(0..cfg.nodes), cfg.local_of(rank));
                            let cmd = if rng.gen_bool(0.2) {
                                let slot = layout.ht_slot(rank, ch, RingCounter::Tail);
                                *expected.entry((dst, slot)).or_insert(0i64) += 1;
                                TransferCmd::atomic(dst, ch, CounterLayout::slot_offset(slot), 1)?
                            } else {
                                TransferCmd::write(dst, ch, 0, rng.gen_range(0..60_000), rng.gen_range(1..1024))?
                            };
                            script.push(rank, ch, cmd);
                            pushed += 1;
                        }
                    }
                }
                msgs += pushed as u64;
            }
        }
        if let Err(e) = c.run(&mut script).and_then(|_| c.run_until_idle()).and_then(|_| c.check_quiescence()) {
            out.violation(format!("round={round}: {e}"));
            continue;
        }
        let records = c.fabric().take_trace();
        let effects = c.take_effects();
        let rep = match mode {
            Mode::LowLatency => {
                let fabric = c.fabric();
                audit_fence(
                    &records,
                    1,
                    |qp| fabric.qp_info(qp).map(|i| (i.src.rank, i.dst.rank)).expect("qp"),
                    &effects,
                )
            }
            Mode::HighThroughput if s.enforcement_side == Enforcement::Sender => Default::default(),
            Mode::HighThroughput => HtOrderAudit::default().feed(&effects),
        };
        checked += rep.checked;
        for v in rep.violations {
            out.violation(format!("round={round}: {v}"));
        }
        {
            let fabric = c.fabric();
            for (&(rank, slot), &want) in &expected {
                let got = fabric.counters(rank).get(slot);
                if got != want {
                    out.violation(format!("round={round}: rank {rank} counter slot {slot} = {got}, expected {want}"));
                }
            }
        }
        if trace.events() {
            for r in &records {
                let _ = writeln!(out.events, "round={round} {r}");
            }
        }
        if trace.effects() {
            for e in &effects {
                let _ = writeln!(out.effects, "round={round} {e}");
            }
        }
        let _ = writeln!(out.metrics, "round={round} effects={} audited={}", effects.len(), rep.checked);
    }
    let _ =
        writeln!(out.report, "summary mode={} rounds={} messages={msgs} audited={checked}", mode_name(mode), f.rounds);
    Ok(())
}
