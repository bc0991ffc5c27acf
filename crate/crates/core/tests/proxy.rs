use std::collections::{BTreeMap, BTreeSet, HashMap};

use ep_proxy::command::{BarrierScope, CmdFlags, TransferCmd};
use ep_proxy::delivery::{CounterLayout, RingCounter};
use ep_proxy::proxy::{Cluster, CommandScript, CompletionPoint, Mode, ProxyConfig};
use ep_proxy::transport::{ImmKind, ImmLayout, ImmWord, TraceEvent, TraceRecord, TransportProfile};
use ep_proxy::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RTT: u64 = 10_000;

fn small(nodes: u32, gpus: u32, mode: Mode) -> ProxyConfig {
    ProxyConfig { num_threads: 1, channels_per_thread: 1, region_len: 1 << 16, ..ProxyConfig::new(nodes, gpus, mode) }
}

fn posts(trace: &[TraceRecord]) -> Vec<TraceRecord> {
    trace.iter().filter(|r| r.event == TraceEvent::Post).copied().collect()
}

fn run(cluster: &mut Cluster, script: &mut CommandScript) {
    cluster.run(script).unwrap();
    cluster.run_until_idle().unwrap();
    cluster.check_quiescence().unwrap();
}

#[test]
fn token_write_is_one_post_and_one_completion() {
    let mut c = Cluster::start(small(2, 1, Mode::LowLatency), TransportProfile::rc(RTT), 1).unwrap();
    let payload: Vec<u8> = (0..7168u32).map(|i| (i * 31 % 251) as u8).collect();
    c.fabric().region_mut(0)[..7168].copy_from_slice(&payload);
    let mut s = CommandScript::new();
    s.push(0, 0, TransferCmd::write(1, 0, 0, 4096, 7168).unwrap());
    run(&mut c, &mut s);
    let stats = c.fabric().stats();
    assert_eq!((stats.posted_writes, stats.sent_events), (1, 1));
    assert_eq!(&c.fabric().region(1)[4096..4096 + 7168], &payload[..]);
}

#[test]
fn emulated_atomic_is_a_zero_length_write_with_immediate() {
    let mut c = Cluster::start(small(2, 1, Mode::LowLatency), TransportProfile::srd(RTT, 0.0, 0), 1).unwrap();
    c.enable_trace();
    let layout = c.config().counter_layout();
    let slot = layout.ll_slot(0, 0);
    let mut s = CommandScript::new();
    s.push(0, 0, TransferCmd::write(1, 0, 0, 0, 64).unwrap())
        .push(0, 0, TransferCmd::write(1, 0, 0, 64, 64).unwrap())
        .push(0, 0, TransferCmd::atomic(1, 0, CounterLayout::slot_offset(slot), 2).unwrap())
        .wait_counter(1, slot, 2);
    run(&mut c, &mut s);
    let p = posts(c.fabric().trace());
    assert_eq!(p.len(), 3);
    assert_eq!(p[2].length, 0);
    let word = ImmWord::decode(p[2].imm.unwrap(), ImmLayout::LowLatency).unwrap();
    assert_eq!(word, ImmWord::Ll { kind: ImmKind::Atomic, expert: 0, operand: 2 });
    assert_eq!(c.fabric().counters(1).get(slot), 2);
}

#[test]
fn piggybacked_atomic_travels_in_the_data_write() {
    for mode in [Mode::LowLatency, Mode::HighThroughput] {
        let mut c = Cluster::start(small(2, 1, mode), TransportProfile::srd(RTT, 0.0, 0), 1).unwrap();
        c.enable_trace();
        let layout = c.config().counter_layout();
        let slot = match mode {
            Mode::LowLatency => layout.ll_slot(0, 0),
            Mode::HighThroughput => layout.ht_slot(0, 0, RingCounter::Tail),
        };
        let mut s = CommandScript::new();
        s.push(0, 0, TransferCmd::write(1, 0, 0, 0, 256).unwrap().with_flags(CmdFlags::PIGGYBACK_ATOMIC))
            .wait_counter(1, slot, 1);
        run(&mut c, &mut s);
        let p = posts(c.fabric().trace());
        assert_eq!(p.len(), 1, "{mode:?}");
        assert_eq!(ImmWord::decode(p[0].imm.unwrap(), mode.into()).unwrap().kind(), ImmKind::Atomic);
        assert_eq!(c.fabric().counters(1).get(slot), 1);
    }
}

#[test]
fn drain_with_nothing_in_flight_returns_at_once() {
    let mut c = Cluster::start(small(2, 1, Mode::LowLatency), TransportProfile::rc(RTT), 1).unwrap();
    let mut s = CommandScript::new();
    s.push(0, 0, TransferCmd::drain(0, None).unwrap());
    c.run(&mut s).unwrap();
    assert_eq!(s.finished_at(), Some(0));
}

#[test]
fn drain_waits_for_sender_completions() {
    let mut c = Cluster::start(small(2, 1, Mode::LowLatency), TransportProfile::rc(RTT), 1).unwrap();
    let mut s = CommandScript::new();
    for i in 0..10 {
        s.push(0, 0, TransferCmd::write(1, 0, 0, i * 128, 128).unwrap());
    }
    s.push(0, 0, TransferCmd::drain(0, None).unwrap());
    c.run(&mut s).unwrap();
    assert!(s.finished_at().unwrap() >= RTT);
    assert_eq!(c.fabric().in_flight(), 0);
}

#[test]
fn drain_upto_ignores_later_sends() {
    let mut profile = TransportProfile::rc(RTT);
    // 7168 bytes serialize in 1 us, staggering the ten completions.
    profile.nic_bytes_per_sec = Some(7_168_000_000);
    let mut cfg = small(2, 1, Mode::LowLatency);
    cfg.region_len = 10 * 7168;
    let mut c = Cluster::start(cfg, profile, 1).unwrap();
    let mut s = CommandScript::new();
    for i in 0..10 {
        s.push(0, 0, TransferCmd::write(1, 0, 0, i * 7168, 7168).unwrap());
    }
    s.push(0, 0, TransferCmd::drain(0, Some(5)).unwrap());
    c.run(&mut s).unwrap();
    // Write i completes at (i + 1) us of serialization plus one RTT.
    assert_eq!(s.finished_at(), Some(6_000 + RTT));
    assert_eq!(c.fabric().in_flight(), 4);
    c.run_until_idle().unwrap();
}

#[test]
fn transport_completion_policy_defers_check_completion() {
    let mut cfg = small(2, 1, Mode::LowLatency);
    cfg.completion.write = CompletionPoint::AtTransportCompletion;
    let mut c = Cluster::start(cfg, TransportProfile::rc(RTT), 1).unwrap();
    let mut s = CommandScript::new();
    s.push(0, 0, TransferCmd::write(1, 0, 0, 0, 64).unwrap());
    c.run(&mut s).unwrap();
    assert_eq!(s.finished_at(), Some(RTT));

    let mut c = Cluster::start(small(2, 1, Mode::LowLatency), TransportProfile::rc(RTT), 1).unwrap();
    let mut s = CommandScript::new();
    s.push(0, 0, TransferCmd::write(1, 0, 0, 0, 64).unwrap());
    c.run(&mut s).unwrap();
    assert_eq!(s.finished_at(), Some(0));
}

#[test]
fn out_of_bounds_offset_faults_with_rank_and_offset() {
    let mut c = Cluster::start(small(2, 1, Mode::LowLatency), TransportProfile::rc(RTT), 1).unwrap();
    let mut s = CommandScript::new();
    s.push(0, 0, TransferCmd::write(1, 0, 0, (1 << 16) - 8, 64).unwrap());
    let err = c.run(&mut s).unwrap_err();
    assert!(matches!(err, Error::Fault { rank: 1, offset: 65528, length: 64, .. }), "{err}");
}

#[test]
fn qp_counts_follow_the_mode() {
    let mut ht = ProxyConfig::new(4, 8, Mode::HighThroughput);
    ht.region_len = 4096;
    assert_eq!(ht.channels(), 8);
    let c = Cluster::start(ht.clone(), TransportProfile::srd(RTT, 0.0, 0), 1).unwrap();
    assert_eq!(c.qps_on_node(0), 256);
    assert_eq!(c.qps_on_node(3), 256);

    ht.nodes = 8;
    let err = Cluster::start(ht, TransportProfile::srd(RTT, 0.0, 0), 1).err().unwrap();
    assert!(matches!(err, Error::Config(_)), "{err}");

    let ll = Cluster::start(small(2, 1, Mode::LowLatency), TransportProfile::rc(RTT), 1).unwrap();
    let f = ll.fabric();
    assert_eq!((f.qps_on_rank(0), f.qps_on_rank(1)), (1, 1));
}

#[test]
fn handshake_publishes_sixteen_byte_records() {
    let c = Cluster::start(small(2, 2, Mode::LowLatency), TransportProfile::rc(RTT), 1).unwrap();
    assert_eq!(c.handshake_records().len(), 4 * 2);
    for r in c.handshake_records() {
        assert_eq!(r.to_bytes().len(), 16);
    }
    assert_eq!(c.peers().get(3).unwrap().region_base, c.fabric().region_base(3).unwrap());
}

#[test]
fn ht_channel_maps_to_one_qp_and_ll_round_robins() {
    let mut cfg = small(2, 1, Mode::HighThroughput);
    cfg.channels_per_thread = 4;
    let mut c = Cluster::start(cfg, TransportProfile::rc(RTT), 1).unwrap();
    c.enable_trace();
    let mut s = CommandScript::new();
    s.push(0, 3, TransferCmd::write(1, 3, 0, 0, 64).unwrap()).push(0, 3, TransferCmd::write(1, 3, 0, 64, 64).unwrap());
    run(&mut c, &mut s);
    let p = posts(c.fabric().trace());
    assert_eq!(p[0].qp, p[1].qp);

    let mut profile = TransportProfile::rc(RTT);
    profile.nics_per_rank = 2;
    let mut c = Cluster::start(small(2, 1, Mode::LowLatency), profile, 1).unwrap();
    c.enable_trace();
    let mut s = CommandScript::new();
    for i in 0..4 {
        s.push(0, 0, TransferCmd::write(1, 0, 0, i * 64, 64).unwrap());
    }
    run(&mut c, &mut s);
    let qps: Vec<_> = posts(c.fabric().trace()).iter().map(|r| r.qp).collect();
    assert_ne!(qps[0], qps[1]);
    assert_eq!(qps, vec![qps[0], qps[1], qps[0], qps[1]]);
}

#[test]
fn two_nics_share_ll_traffic_evenly() {
    let mut profile = TransportProfile::rc(RTT);
    profile.nics_per_rank = 2;
    profile.nic_bytes_per_sec = Some(10_000_000_000);
    let mut c = Cluster::start(small(2, 1, Mode::LowLatency), profile, 1).unwrap();
    let mut s = CommandScript::new();
    for i in 0..1000 {
        s.push(0, 0, TransferCmd::write(1, 0, 0, (i % 64) * 1024, 1024).unwrap());
    }
    run(&mut c, &mut s);
    let per_qp: Vec<u64> = c.worker(0, 0).stats().posts_per_qp.values().copied().collect();
    assert_eq!(per_qp.len(), 2);
    assert!(per_qp.iter().all(|&n| n.abs_diff(500) <= 1), "{per_qp:?}");
    let nics: BTreeSet<u32> =
        c.worker(0, 0).stats().posts_per_qp.keys().map(|&q| c.fabric().qp_info(q).unwrap().nic).collect();
    assert_eq!(nics.len(), 2);
}

/// Random writes and fenced atomics on every channel of every rank.
fn random_traffic(c: &Cluster, rng: &mut ChaCha8Rng, per_channel: usize) -> CommandScript {
    let cfg = c.config().clone();
    let layout = cfg.counter_layout();
    let mut s = CommandScript::new();
    for rank in 0..cfg.ep_size() {
        for ch in 0..cfg.channels() {
            let mut writes: BTreeMap<u32, u32> = BTreeMap::new();
            for _ in 0..per_channel {
                let dst = match cfg.mode {
                    Mode::LowLatency => (rank + rng.gen_range(1..cfg.ep_size())) % cfg.ep_size(),
                    Mode::HighThroughput => cfg.rank_at(rng.gen_range(0..cfg.nodes), cfg.local_of(rank)),
                };
                let len = rng.gen_range(1..512);
                let off = rng.gen_range(0..(cfg.region_len as u32 - len));
                s.push(rank, ch, TransferCmd::write(dst, ch, 0, off, len).unwrap());
                *writes.entry(dst).or_default() += 1;
            }
            for (dst, n) in writes {
                let slot = match cfg.mode {
                    Mode::LowLatency => layout.ll_slot(rank, 0),
                    Mode::HighThroughput => layout.ht_slot(rank, ch, RingCounter::Tail),
                };
                let value = match cfg.mode {
                    Mode::LowLatency => n,
                    Mode::HighThroughput => 1,
                };
                s.push(rank, ch, TransferCmd::atomic(dst, ch, CounterLayout::slot_offset(slot), value).unwrap());
            }
        }
    }
    s
}

#[test]
fn threads_share_no_counters() {
    let mut cfg = ProxyConfig::new(2, 2, Mode::LowLatency);
    cfg.region_len = 1 << 14;
    let mut c = Cluster::start(cfg, TransportProfile::srd(RTT, 0.3, 2_000), 5).unwrap();
    let mut s = random_traffic(&c, &mut ChaCha8Rng::seed_from_u64(5), 20);
    run(&mut c, &mut s);
    let f = c.fabric().stats();
    let sum = |g: fn(&ep_proxy::proxy::ThreadStats) -> u64| c.workers().iter().map(|w| g(w.stats())).sum::<u64>();
    assert_eq!(sum(|s| s.writes + s.emulated_atomics + s.barrier_messages), f.posted_writes);
    assert_eq!(sum(|s| s.sent_cqes), f.sent_events);
    assert_eq!(sum(|s| s.received), f.received_events);
    for w in c.workers() {
        for qp in w.stats().posts_per_qp.keys() {
            let info = c.fabric().qp_info(*qp).unwrap();
            assert_eq!(info.src, w.endpoint());
            assert_eq!(info.dst.thread, w.endpoint().thread);
        }
    }
}

#[test]
fn ht_channel_traffic_uses_a_single_qp_per_pair() {
    let mut cfg = ProxyConfig::new(3, 2, Mode::HighThroughput);
    cfg.region_len = 1 << 14;
    let mut c = Cluster::start(cfg, TransportProfile::srd(RTT, 0.5, 3_000), 9).unwrap();
    c.enable_trace();
    let mut s = random_traffic(&c, &mut ChaCha8Rng::seed_from_u64(9), 30);
    run(&mut c, &mut s);
    let f = c.fabric();
    let mut qps: HashMap<(u32, u32, u8), BTreeSet<u32>> = HashMap::new();
    for r in posts(f.trace()) {
        let info = f.qp_info(r.qp).unwrap();
        if let Ok(ImmWord::Ht { channel, .. }) = ImmWord::decode(r.imm.unwrap(), ImmLayout::HighThroughput) {
            qps.entry((info.src.rank, info.dst.rank, channel)).or_default().insert(r.qp.0);
        }
    }
    assert!(!qps.is_empty());
    assert!(qps.values().all(|s| s.len() == 1));
}

#[test]
fn threaded_mode_matches_cooperative_mode() {
    let mut results = Vec::new();
    for threaded in [false, true] {
        let mut cfg = ProxyConfig::new(2, 2, Mode::LowLatency);
        cfg.region_len = 1 << 14;
        let mut c = Cluster::start(cfg, TransportProfile::srd(RTT, 0.4, 1_000), 3).unwrap();
        for r in 0..4 {
            let fill: Vec<u8> = (0..1 << 14).map(|i| (i as u32 * 7 + r) as u8).collect();
            c.fabric().region_mut(r).copy_from_slice(&fill);
        }
        // Disjoint destinations so the final memory image is order independent.
        let mut s = CommandScript::new();
        let layout = c.config().counter_layout();
        for rank in 0..4u32 {
            for ch in 0..8u32 {
                let dst = (rank + 1 + ch % 3) % 4;
                for k in 0..6u32 {
                    let off = ((rank * 8 + ch) * 6 + k) * 64;
                    s.push(rank, ch, TransferCmd::write(dst, ch, off, off, 64).unwrap());
                }
                s.push(
                    rank,
                    ch,
                    TransferCmd::atomic(dst, ch, CounterLayout::slot_offset(layout.ll_slot(rank, 0)), 6).unwrap(),
                );
            }
        }
        if threaded {
            c.run_threaded(&mut s).unwrap();
        } else {
            c.run(&mut s).unwrap();
        }
        c.run_until_idle().unwrap();
        c.check_quiescence().unwrap();
        let f = c.fabric();
        let image: Vec<(Vec<u8>, Vec<i64>)> =
            (0..4).map(|r| (f.region(r).to_vec(), f.counters(r).snapshot())).collect();
        results.push(image);
    }
    assert!(results[0] == results[1]);
}

/// Pushes one barrier per rank in `order`, settling after each, and checks
/// that nobody leaves before the last rank entered.
fn barrier_in_order(c: &mut Cluster, order: &[u32], scope: BarrierScope) {
    let mut pushed = Vec::new();
    for (i, &rank) in order.iter().enumerate() {
        let idx = c.producer(rank, 0).push(TransferCmd::barrier(0, scope).unwrap()).unwrap();
        pushed.push((rank, idx));
        c.settle().unwrap();
        let last = i + 1 == order.len();
        for &(r, idx) in &pushed {
            assert_eq!(c.producer(r, 0).check_completion(idx), last, "order {order:?}, rank {r} after {i}");
        }
    }
}

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

#[test]
fn barrier_holds_until_last_arrival() {
    for (nodes, gpus, scope) in
        [(1, 3, BarrierScope::AllPeers), (3, 1, BarrierScope::AllPeers), (3, 1, BarrierScope::SameRail)]
    {
        for order in permutations(3) {
            let mut c =
                Cluster::start(small(nodes, gpus, Mode::LowLatency), TransportProfile::srd(RTT, 0.5, 500), 2).unwrap();
            barrier_in_order(&mut c, &order, scope);
            barrier_in_order(&mut c, &order, scope);
            c.run_until_idle().unwrap();
        }
    }
}

#[test]
fn single_rank_barrier_is_immediate() {
    let mut c = Cluster::start(small(1, 1, Mode::LowLatency), TransportProfile::rc(RTT), 1).unwrap();
    let mut s = CommandScript::new();
    s.push(0, 0, TransferCmd::barrier(0, BarrierScope::AllPeers).unwrap());
    c.run(&mut s).unwrap();
    assert_eq!(s.finished_at(), Some(0));
}

#[test]
fn same_rail_barrier_exchanges_one_req_and_ack_per_member() {
    let mut c = Cluster::start(small(4, 1, Mode::HighThroughput), TransportProfile::srd(RTT, 0.0, 0), 1).unwrap();
    c.enable_trace();
    let mut s = CommandScript::new();
    for r in 0..4 {
        s.push(r, 0, TransferCmd::barrier(0, BarrierScope::SameRail).unwrap());
    }
    run(&mut c, &mut s);
    let mut kinds: BTreeMap<ImmKind, u32> = BTreeMap::new();
    for p in posts(c.fabric().trace()) {
        *kinds.entry(ImmWord::decode(p.imm.unwrap(), ImmLayout::HighThroughput).unwrap().kind()).or_default() += 1;
    }
    assert_eq!(kinds.get(&ImmKind::BarrierReq), Some(&3));
    assert_eq!(kinds.get(&ImmKind::BarrierAck), Some(&3));
    assert_eq!(kinds.len(), 2);
}

#[test]
fn barrier_scope_must_match_flag() {
    let mut c = Cluster::start(small(2, 1, Mode::LowLatency), TransportProfile::rc(RTT), 1).unwrap();
    let bad = TransferCmd::barrier(0, BarrierScope::SameRail).unwrap().with_flags(CmdFlags::NONE);
    let mut s = CommandScript::new();
    s.push(0, 0, bad);
    assert!(matches!(c.run(&mut s), Err(Error::Protocol(_))));
}
