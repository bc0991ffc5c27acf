//! Direct in-memory reference results, computed without any transport.

use super::layout::POISON;
use super::plan::{RoutingPlan, TokenBatch};
use super::ExpertFn;
use crate::proxy::Mode;

pub fn f64s(bytes: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
}

/// The dispatch receive window of `expert` as it must look after dispatch:
/// `[src][idx]` cells of `capacity` tokens per source, poison elsewhere.
pub fn scatter(plan: &RoutingPlan, batch: &TokenBatch, capacity: u32, expert: u32) -> Vec<u8> {
    let h = batch.hidden_bytes() as usize;
    let mut img = vec![POISON; plan.ep() as usize * capacity as usize * h];
    for t in 0..plan.num_tokens() {
        if plan.experts(t).contains(&expert) {
            let (src, idx) = plan.source(t);
            let at = (src as usize * capacity as usize + idx as usize) * h;
            img[at..at + h].copy_from_slice(batch.token(t));
        }
    }
    img
}

/// Combined outputs in the engine's canonical reduce order: ascending
/// expert rank for LL; per-node partials (ascending rank within the node),
/// then ascending node for HT.
pub fn combine(plan: &RoutingPlan, batch: &TokenBatch, f: ExpertFn, mode: Mode, gpus_per_node: u32) -> Vec<f64> {
    let width = batch.hidden_bytes() as usize / 8;
    let mut result = Vec::with_capacity(plan.num_tokens() as usize * width);
    for t in 0..plan.num_tokens() {
        let x: Vec<f64> = f64s(batch.token(t)).collect();
        let mut pairs: Vec<(u32, f64)> = plan.experts(t).iter().copied().zip(plan.weights(t).iter().copied()).collect();
        pairs.sort_by_key(|p| p.0);
        let mut acc = vec![0.0f64; width];
        match mode {
            Mode::LowLatency => {
                for &(e, w) in &pairs {
                    for (a, v) in acc.iter_mut().zip(&x) {
                        *a += w * f.apply(e, *v);
                    }
                }
            }
            Mode::HighThroughput => {
                let mut i = 0;
                while i < pairs.len() {
                    let node = pairs[i].0 / gpus_per_node;
                    let mut partial = vec![0.0f64; width];
                    while i < pairs.len() && pairs[i].0 / gpus_per_node == node {
                        let (e, w) = pairs[i];
                        for (p, v) in partial.iter_mut().zip(&x) {
                            *p += w * f.apply(e, *v);
                        }
                        i += 1;
                    }
                    for (a, p) in acc.iter_mut().zip(&partial) {
                        *a += p;
                    }
                }
            }
        }
        result.extend(acc);
    }
    result
}

/// Largest `|a - b| / max(1, |b|)` over the two vectors.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}
