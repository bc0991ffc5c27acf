//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- <substring>`.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ep_proxy::command::{fifo_stress, BarrierScope, TransferCmd};
use ep_proxy::delivery::{audit_fence, audit_ht_order, CounterLayout, Enforcement, RingCounter};
use ep_proxy::engine::{oracle, Engine, EngineConfig, ExpertFn, RoutingPlan, TokenBatch, POISON};
use ep_proxy::proxy::{Cluster, CommandScript, Mode, ProxyConfig};
use ep_proxy::transport::{ImmKind, ImmLayout, ImmWord, TraceEvent, TransportProfile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RTT: u64 = 10_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn unordered() -> TransportProfile {
    TransportProfile::srd(RTT, 0.5, 2_000)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Brute-force references

fn scatter_ref(plan: &RoutingPlan, batch: &TokenBatch, cap: u32, expert: u32) -> Vec<u8> {
    let h = batch.hidden_bytes() as usize;
    let mut img = vec![POISON; (plan.ep() * cap) as usize * h];
    for t in 0..plan.num_tokens() {
        if plan.experts(t).contains(&expert) {
            let (src, idx) = (t / plan.tokens_per_rank(), t % plan.tokens_per_rank());
            let cell = (src * cap + idx) as usize * h;
            img[cell..cell + h].copy_from_slice(batch.token(t));
        }
    }
    img
}

/// Weighted sum with contributions grouped as `group(expert)` (ascending
/// group, ascending expert inside each group).
fn combine_ref(plan: &RoutingPlan, batch: &TokenBatch, group: impl Fn(u32) -> u32) -> Vec<f64> {
    let mut out = Vec::new();
    for t in 0..plan.num_tokens() {
        let x: Vec<f64> = oracle::f64s(batch.token(t)).collect();
        let mut groups: BTreeMap<u32, Vec<(u32, f64)>> = BTreeMap::new();
        for (&e, &w) in plan.experts(t).iter().zip(plan.weights(t)) {
            groups.entry(group(e)).or_default().push((e, w));
        }
        let mut acc = vec![0.0f64; x.len()];
        for mut members in groups.into_values() {
            members.sort_by_key(|m| m.0);
            let mut part = vec![0.0f64; x.len()];
            for (e, w) in members {
                for (p, v) in part.iter_mut().zip(&x) {
                    *p += w * (v + e as f64);
                }
            }
            for (a, p) in acc.iter_mut().zip(&part) {
                *a += p;
            }
        }
        out.extend(acc);
    }
    out
}

// ---------------------------------------------------------------------------
// 1

fn oracle_equivalence() -> Outcome {
    const SEEDS: u64 = 20;
    const ITERS_PER_MODE: u32 = 25;
    let started = Instant::now();
    let (mut iterations, mut mismatches, mut fence_checked, mut ht_checked) = (0u32, Vec::new(), 0u64, 0u64);
    let mut violations = 0usize;
    for seed in 0..SEEDS {
        for mode in [Mode::LowLatency, Mode::HighThroughput] {
            let mut cfg = EngineConfig::new(2, 4, mode);
            cfg.topk = 4;
            cfg.max_tokens_per_rank = 512;
            cfg.hidden_bytes = 128;
            cfg.expert = ExpertFn::AddExpertId;
            let mut engine = match Engine::new(cfg, unordered(), seed) {
                Ok(e) => e,
                Err(e) => return outcome(false, format!("engine start: {e}")),
            };
            engine.cluster_mut().enable_trace();
            let mut ht_effects = Vec::new();
            let mut r = rng(seed * 2 + mode as u64);
            for it in 0..ITERS_PER_MODE {
                let plan = RoutingPlan::random(8, 512, 4, &mut r).expect("plan");
                let batch = TokenBatch::random_f64(4096, 128, &mut r).expect("batch");
                let first_event = engine.cluster().fabric().event_no() + 1;
                let out = match engine.run_iteration(&plan, &batch) {
                    Ok(o) => o,
                    Err(e) => {
                        mismatches.push(format!("seed {seed} {mode:?} iter {it}: {e}"));
                        continue;
                    }
                };
                iterations += 1;
                for e in 0..8 {
                    if engine.expert_buffer(e) != scatter_ref(&plan, &batch, 512, e) {
                        mismatches.push(format!("seed {seed} {mode:?} iter {it}: expert {e} buffer"));
                    }
                }
                let want = match mode {
                    Mode::LowLatency => combine_ref(&plan, &batch, |e| e),
                    Mode::HighThroughput => combine_ref(&plan, &batch, |e| e / 4),
                };
                if out.combined.iter().zip(&want).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    mismatches.push(format!("seed {seed} {mode:?} iter {it}: combine output"));
                }
                let trace = engine.cluster().fabric().take_trace();
                let effects = engine.cluster_mut().take_effects();
                match mode {
                    Mode::LowLatency => {
                        let fabric = engine.cluster().fabric();
                        let ranks = |qp| fabric.qp_info(qp).map(|i| (i.src.rank, i.dst.rank)).expect("known qp");
                        let rep = audit_fence(&trace, first_event, ranks, &effects);
                        fence_checked += rep.checked;
                        violations += rep.violations.len();
                    }
                    // Sequences run on across iterations; audit the whole run.
                    Mode::HighThroughput => ht_effects.extend(effects),
                }
            }
            let rep = audit_ht_order(&ht_effects);
            ht_checked += rep.checked;
            violations += rep.violations.len();
        }
    }
    let elapsed = started.elapsed();
    let within_budget = elapsed <= Duration::from_secs(300);
    let pass = mismatches.is_empty() && violations == 0 && iterations == 1000 && within_budget;
    let mut detail = format!(
        "{iterations} iterations over {SEEDS} seeds, {} oracle mismatches, {violations} fence/order violations \
         ({fence_checked} fenced atomics, {ht_checked} sequenced effects audited), {:.1}s (budget 300s)",
        mismatches.len(),
        elapsed.as_secs_f64()
    );
    if let Some(first) = mismatches.first() {
        detail += &format!("; first: {first}");
    }
    outcome(pass, detail)
}

// ---------------------------------------------------------------------------
// 2

fn proxy_cfg(nodes: u32, gpus: u32, mode: Mode) -> ProxyConfig {
    ProxyConfig { num_threads: 2, channels_per_thread: 2, region_len: 1 << 16, ..ProxyConfig::new(nodes, gpus, mode) }
}

fn fence_safety() -> Outcome {
    const TARGET: u64 = 100_000;
    let (mut checked, mut violations, mut counter_errors, mut round) = (0u64, Vec::new(), 0u32, 0u64);
    while checked < TARGET {
        let mut cfg = proxy_cfg(2, 2, Mode::LowLatency);
        cfg.ll_keys = 4;
        cfg.ll_window_bytes = (cfg.region_len / 4) as u32;
        let mut profile = unordered();
        profile.nics_per_rank = 2;
        let mut c = Cluster::start(cfg.clone(), profile, round).expect("cluster");
        c.enable_trace();
        let layout = cfg.counter_layout();
        let mut r = rng(1000 + round);
        let mut s = CommandScript::new();
        let mut expected: BTreeMap<(u32, usize), i64> = BTreeMap::new();
        for rank in 0..4 {
            for ch in 0..cfg.channels() {
                for _ in 0..250 {
                    let dst = (rank + r.gen_range(1..4)) % 4;
                    let key = r.gen_range(0..4u32);
                    let x = r.gen_range(1..=4u32);
                    for _ in 0..x {
                        let off = key * cfg.ll_window_bytes + r.gen_range(0..cfg.ll_window_bytes - 256);
                        s.push(rank, ch, TransferCmd::write(dst, ch, 0, off, r.gen_range(1..256)).expect("cmd"));
                    }
                    let slot = layout.ll_slot(rank, key);
                    s.push(rank, ch, TransferCmd::atomic(dst, ch, CounterLayout::slot_offset(slot), x).expect("cmd"));
                    *expected.entry((dst, slot)).or_default() += x as i64;
                }
            }
        }
        if let Err(e) = c.run(&mut s).and_then(|_| c.run_until_idle()).and_then(|_| c.check_quiescence()) {
            return outcome(false, format!("round {round}: {e}"));
        }
        let trace = c.fabric().take_trace();
        let effects = c.take_effects();
        let fabric = c.fabric();
        let rep =
            audit_fence(&trace, 1, |qp| fabric.qp_info(qp).map(|i| (i.src.rank, i.dst.rank)).expect("qp"), &effects);
        checked += rep.checked;
        violations.extend(rep.violations);
        for (&(rank, slot), &want) in &expected {
            if fabric.counters(rank).get(slot) != want {
                counter_errors += 1;
            }
        }
        round += 1;
    }
    outcome(
        violations.is_empty() && counter_errors == 0,
        format!(
            "{checked} applied atomics audited over {round} rounds, {} early applications, {counter_errors} counter mismatches{}",
            violations.len(),
            violations.first().map(|v| format!("; first: {v}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// 3

fn ht_partial_order() -> Outcome {
    const TARGET: u64 = 100_000;
    let (mut checked, mut violations, mut round) = (0u64, Vec::new(), 0u64);
    while checked < TARGET {
        let cfg = proxy_cfg(2, 2, Mode::HighThroughput);
        let mut c = Cluster::start(cfg.clone(), unordered(), round).expect("cluster");
        c.enable_trace();
        let layout = cfg.counter_layout();
        let mut r = rng(2000 + round);
        let mut s = CommandScript::new();
        for rank in 0..4 {
            for ch in 0..cfg.channels() {
                for _ in 0..1000 {
                    let dst = cfg.rank_at(r.gen_range(0..cfg.nodes), cfg.local_of(rank));
                    let cmd = if r.gen_bool(0.2) {
                        let slot = layout.ht_slot(rank, ch, RingCounter::Tail);
                        TransferCmd::atomic(dst, ch, CounterLayout::slot_offset(slot), 1)
                    } else {
                        TransferCmd::write(dst, ch, 0, r.gen_range(0..60_000), r.gen_range(1..1024))
                    };
                    s.push(rank, ch, cmd.expect("cmd"));
                }
            }
        }
        if let Err(e) = c.run(&mut s).and_then(|_| c.run_until_idle()).and_then(|_| c.check_quiescence()) {
            return outcome(false, format!("round {round}: {e}"));
        }
        let rep = audit_ht_order(&c.take_effects());
        checked += rep.checked;
        violations.extend(rep.violations);
        round += 1;
    }
    outcome(
        violations.is_empty(),
        format!(
            "{checked} sequenced messages over {round} rounds, {} gaps or regressions{}",
            violations.len(),
            violations.first().map(|v| format!("; first: {v}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// 4

fn qp_formula() -> Outcome {
    let cfg = |nodes| ProxyConfig {
        num_threads: 4,
        channels_per_thread: 2,
        region_len: 1 << 12,
        ..ProxyConfig::new(nodes, 8, Mode::HighThroughput)
    };
    let profile = TransportProfile { max_qps: 256, nics_per_rank: 1, ..TransportProfile::rc(RTT) };
    let four = match Cluster::start(cfg(4), profile.clone(), 1) {
        Ok(c) => (0..4).map(|n| c.qps_on_node(n)).collect::<Vec<_>>(),
        Err(e) => return outcome(false, format!("4 nodes rejected: {e}")),
    };
    let eight = Cluster::start(cfg(8), profile, 1).err();
    let rejected = matches!(eight, Some(ep_proxy::Error::Config(_)));
    outcome(
        four.iter().all(|&q| q == 256) && rejected,
        format!(
            "4 nodes: {four:?} QPs per node (want 256); 8 nodes: {}",
            eight.map(|e| e.to_string()).unwrap_or_else(|| "accepted".into())
        ),
    )
}

// ---------------------------------------------------------------------------
// 5

fn dedup_accounting() -> Outcome {
    const GPUS: u32 = 4;
    let sweep = [8u32, 16, 32, 64, 128];
    let engine = |mode| {
        let mut cfg = EngineConfig::new(4, GPUS, mode);
        cfg.topk = 4;
        cfg.max_tokens_per_rank = 128;
        cfg.hidden_bytes = 64;
        cfg.num_threads = 2;
        Engine::new(cfg, unordered(), 5).expect("engine")
    };
    let (mut ll, mut ht) = (engine(Mode::LowLatency), engine(Mode::HighThroughput));
    let mut r = rng(5);
    let (mut send_mismatches, mut byte_failures, mut tokens) = (0u32, Vec::new(), 0u64);
    for p in 0..100 {
        let tpr = sweep[p % sweep.len()];
        let plan = RoutingPlan::random(16, tpr, 4, &mut r).expect("plan");
        let batch = TokenBatch::random_f64(16 * tpr, 64, &mut r).expect("batch");
        let (l, h) = match (ll.dispatch(&plan, &batch), ht.dispatch(&plan, &batch)) {
            (Ok(l), Ok(h)) => (l, h),
            (Err(e), _) | (_, Err(e)) => return outcome(false, format!("plan {p}: {e}")),
        };
        for (t, &sent) in ht.last_inter_node_sends().iter().enumerate() {
            let home = t as u32 / tpr / GPUS;
            let remote: BTreeSet<u32> =
                plan.experts(t as u32).iter().map(|e| e / GPUS).filter(|&n| n != home).collect();
            tokens += 1;
            if sent as usize != remote.len() {
                send_mismatches += 1;
            }
        }
        if h.inter_node_bytes > l.inter_node_bytes {
            byte_failures.push(format!("plan {p} ({tpr}/rank): HT {} > LL {}", h.inter_node_bytes, l.inter_node_bytes));
        }
    }
    outcome(
        send_mismatches == 0 && byte_failures.is_empty(),
        format!(
            "100 plans, {tokens} tokens: {send_mismatches} send-count mismatches vs set oracle, {} sweep points with HT bytes > LL{}",
            byte_failures.len(),
            byte_failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// 6

fn chained_chunks(enforcement: Enforcement, seed: u64, n: u32) -> Result<u64, ep_proxy::Error> {
    let mut cfg = proxy_cfg(2, 1, Mode::HighThroughput);
    cfg.enforcement = enforcement;
    let layout = cfg.counter_layout();
    let mut c = Cluster::start(cfg, unordered(), seed)?;
    let tail = CounterLayout::slot_offset(layout.ht_slot(0, 0, RingCounter::Tail));
    let mut s = CommandScript::new();
    for k in 0..n {
        s.push(0, 0, TransferCmd::write(1, 0, 0, (k % 16) * 2048, 2048)?);
        s.push(0, 0, TransferCmd::atomic(1, 0, tail, 1)?);
    }
    s.wait_counter(1, layout.ht_slot(0, 0, RingCounter::Tail), n as i64);
    c.run(&mut s)?;
    Ok(s.finished_at().expect("finished"))
}

fn enforcement_gap() -> Outcome {
    const N: u32 = 64;
    let bound = (N as u64 * RTT) as f64 * 0.9;
    let mut worst = f64::INFINITY;
    let mut failures = Vec::new();
    for seed in 0..20 {
        let (sender, receiver) =
            match (chained_chunks(Enforcement::Sender, seed, N), chained_chunks(Enforcement::Receiver, seed, N)) {
                (Ok(s), Ok(r)) => (s, r),
                (Err(e), _) | (_, Err(e)) => return outcome(false, format!("seed {seed}: {e}")),
            };
        let gap = sender as f64 - receiver as f64;
        worst = worst.min(gap);
        if !(sender > receiver && gap >= bound) {
            failures.push(format!("seed {seed}: sender {sender} ns, receiver {receiver} ns"));
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "20 seeds, N={N}, rtt={RTT} ns: smallest sender-receiver gap {worst:.0} ns vs bound {bound:.0} ns (N*rtt = {} ns){}",
            N as u64 * RTT,
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7

fn final_counters(mode: Mode, emulate: bool, seed: u64) -> Result<(Vec<Vec<i64>>, Vec<f64>), ep_proxy::Error> {
    let mut cfg = EngineConfig::new(2, 2, mode);
    cfg.topk = 3;
    cfg.max_tokens_per_rank = 48;
    cfg.hidden_bytes = 32;
    cfg.num_threads = 2;
    cfg.emulate_atomics = emulate;
    let mut engine = Engine::new(cfg, TransportProfile::rc(RTT), seed)?;
    let mut r = rng(seed);
    let mut combined = Vec::new();
    for _ in 0..2 {
        let plan = RoutingPlan::random(4, 48, 3, &mut r)?;
        let batch = TokenBatch::random_f64(192, 32, &mut r)?;
        combined.extend(engine.run_iteration(&plan, &batch)?.combined);
    }
    let fabric = engine.cluster().fabric();
    Ok(((0..4).map(|rank| fabric.counters(rank).snapshot()).collect(), combined))
}

fn emulated_atomics() -> Outcome {
    let mut diffs = Vec::new();
    for seed in 0..50 {
        for mode in [Mode::LowLatency, Mode::HighThroughput] {
            match (final_counters(mode, false, seed), final_counters(mode, true, seed)) {
                (Ok(hw), Ok(emu)) if hw == emu => {}
                (Ok(_), Ok(_)) => diffs.push(format!("seed {seed} {mode:?}: final state differs")),
                (Err(e), _) | (_, Err(e)) => diffs.push(format!("seed {seed} {mode:?}: {e}")),
            }
        }
    }
    outcome(
        diffs.is_empty(),
        format!(
            "50 seeds x LL/HT: {} runs with differing counters{}",
            diffs.len(),
            diffs.first().map(|d| format!("; first: {d}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// 8

fn permutations(n: u32) -> Vec<Vec<u32>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Runs one barrier epoch in `order`; returns an error description on an
/// early or missing release, else the REQ/ACK count.
fn barrier_epoch(
    c: &mut Cluster,
    order: &[u32],
    scope: BarrierScope,
    group: &dyn Fn(u32) -> u32,
) -> Result<u32, String> {
    let mut entered: Vec<(u32, u64)> = Vec::new();
    c.fabric().take_trace();
    for &rank in order {
        let idx = c
            .producer(rank, 0)
            .push(TransferCmd::barrier(0, scope).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        entered.push((rank, idx));
        c.settle().map_err(|e| e.to_string())?;
        for &(r, idx) in &entered {
            let members_in = order.iter().filter(|&&m| group(m) == group(r)).all(|m| entered.iter().any(|e| e.0 == *m));
            let done = c.producer(r, 0).check_completion(idx);
            if done != members_in {
                return Err(format!("order {order:?}: rank {r} done={done} with group complete={members_in}"));
            }
        }
    }
    let trace = c.fabric().take_trace();
    Ok(trace
        .iter()
        .filter(|t| t.event == TraceEvent::Post)
        .filter_map(|t| t.imm)
        .filter(|&imm| {
            matches!(
                ImmWord::decode(imm, ImmLayout::LowLatency).map(|w| w.kind()),
                Ok(ImmKind::BarrierReq | ImmKind::BarrierAck)
            )
        })
        .count() as u32)
}

fn barrier_correctness() -> Outcome {
    let mut cases = 0;
    let mut failures = Vec::new();
    for n in [3u32, 4] {
        let mut shapes: Vec<(u32, u32, BarrierScope)> =
            vec![(1, n, BarrierScope::AllPeers), (n, 1, BarrierScope::AllPeers), (n, 1, BarrierScope::SameRail)];
        if n == 4 {
            shapes.push((2, 2, BarrierScope::AllPeers));
            shapes.push((2, 2, BarrierScope::SameRail));
        }
        for (nodes, gpus, scope) in shapes {
            let group = move |r: u32| match scope {
                BarrierScope::AllPeers => 0,
                BarrierScope::SameRail => r % gpus,
            };
            let want = match scope {
                // One REQ and one ACK per non-leader node.
                BarrierScope::AllPeers => 2 * (nodes - 1),
                BarrierScope::SameRail => gpus * 2 * (nodes - 1),
            };
            for order in permutations(n) {
                let cfg = ProxyConfig {
                    num_threads: 1,
                    channels_per_thread: 1,
                    region_len: 1 << 12,
                    ..ProxyConfig::new(nodes, gpus, Mode::LowLatency)
                };
                let mut c = Cluster::start(cfg, unordered(), cases).expect("cluster");
                c.enable_trace();
                for epoch in 0..2 {
                    cases += 1;
                    match barrier_epoch(&mut c, &order, scope, &group) {
                        Ok(msgs) if msgs == want => {}
                        Ok(msgs) => failures.push(format!(
                            "{nodes}x{gpus} {scope:?} {order:?} epoch {epoch}: {msgs} REQ/ACK, want {want}"
                        )),
                        Err(e) => failures.push(format!("{nodes}x{gpus} {scope:?} epoch {epoch}: {e}")),
                    }
                }
                if let Err(e) = c.run_until_idle() {
                    failures.push(format!("{nodes}x{gpus} {scope:?} {order:?}: {e}"));
                }
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{cases} epoch runs over all arrival orders of 3 and 4 ranks: {} failures{}",
            failures.len(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// 9

fn fifo_throughput() -> Outcome {
    const THRESHOLD: f64 = 1e6;
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match fifo_stress(8, 1_000_000, 64) {
        Ok(r) => {
            let rate = r.aggregate_cmds_per_sec();
            outcome(
                rate >= THRESHOLD && r.violations() == 0 && r.total_commands() == 8_000_000,
                format!(
                    "8 channels x 1e6 commands on {cores} core(s): {:.3e} cmds/s aggregate (threshold {THRESHOLD:.0e}), {} violations",
                    rate,
                    r.violations()
                ),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 9] = [
        (1, "oracle equivalence under reordering", oracle_equivalence),
        (2, "LL fence safety", fence_safety),
        (3, "HT per-channel order", ht_partial_order),
        (4, "HT QP budget formula", qp_formula),
        (5, "dedup accounting", dedup_accounting),
        (6, "sender vs receiver enforcement", enforcement_gap),
        (7, "emulated atomics equivalence", emulated_atomics),
        (8, "barrier correctness", barrier_correctness),
        (9, "FIFO throughput", fifo_throughput),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || f == &n.to_string()) {
            continue;
        }
        let t0 = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            outcome(
                false,
                format!(
                    "panicked: {:?}",
                    p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                ),
            )
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "acceptance {n} {name}: {} [{:.1}s] {}",
            if result.pass { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64(),
            result.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
