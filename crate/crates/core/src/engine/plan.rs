//! Routing plans, token batches and their binary corpus format.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// Tolerance on the per-token weight sum.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Token `t` belongs to source rank `t / tokens_per_rank`, at source-local
/// index `t % tokens_per_rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingPlan {
    ep: u32,
    tokens_per_rank: u32,
    topk: u32,
    experts: Vec<u32>,
    weights: Vec<f64>,
}

impl RoutingPlan {
    /// `experts` and `weights` are row-major `num_tokens x topk`.
    pub fn new(ep: u32, tokens_per_rank: u32, topk: u32, experts: Vec<u32>, weights: Vec<f64>) -> Result<Self> {
        if ep == 0 || topk == 0 || topk > ep {
            return Err(Error::Config(format!("topk {topk} must be in 1..={ep}")));
        }
        let n = (ep * tokens_per_rank * topk) as usize;
        if experts.len() != n || weights.len() != n {
            return Err(Error::Config(format!(
                "plan has {} experts and {} weights, expected {n}",
                experts.len(),
                weights.len()
            )));
        }
        for (t, (row, w)) in experts.chunks(topk as usize).zip(weights.chunks(topk as usize)).enumerate() {
            if let Some(e) = row.iter().find(|&&e| e >= ep) {
                return Err(Error::Config(format!("token {t} routed to rank {e}, EP size is {ep}")));
            }
            let mut sorted = row.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != row.len() {
                return Err(Error::Config(format!("token {t} lists an expert rank twice")));
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::Config(format!("token {t} has a negative or non-finite weight")));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return Err(Error::Config(format!("token {t} weights sum to {sum}")));
            }
        }
        Ok(RoutingPlan { ep, tokens_per_rank, topk, experts, weights })
    }

    /// Uniformly random distinct experts per token with random normalized
    /// weights.
    pub fn random<R: Rng>(ep: u32, tokens_per_rank: u32, topk: u32, rng: &mut R) -> Result<Self> {
        if topk == 0 || topk > ep {
            return Err(Error::Config(format!("topk {topk} must be in 1..={ep}")));
        }
        let n = (ep * tokens_per_rank) as usize;
        let mut experts = Vec::with_capacity(n * topk as usize);
        let mut weights = Vec::with_capacity(n * topk as usize);
        for _ in 0..n {
            experts.extend(sample(rng, ep as usize, topk as usize).into_iter().map(|e| e as u32));
            let raw: Vec<f64> = (0..topk).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            weights.extend(raw.iter().map(|w| w / sum));
        }
        Self::new(ep, tokens_per_rank, topk, experts, weights)
    }

    pub fn ep(&self) -> u32 {
        self.ep
    }

    pub fn topk(&self) -> u32 {
        self.topk
    }

    pub fn tokens_per_rank(&self) -> u32 {
        self.tokens_per_rank
    }

    pub fn num_tokens(&self) -> u32 {
        self.ep * self.tokens_per_rank
    }

    pub fn source(&self, token: u32) -> (u32, u32) {
        (token / self.tokens_per_rank, token % self.tokens_per_rank)
    }

    pub fn token_id(&self, src: u32, idx: u32) -> u32 {
        src * self.tokens_per_rank + idx
    }

    pub fn experts(&self, token: u32) -> &[u32] {
        let k = self.topk as usize;
        &self.experts[token as usize * k..(token as usize + 1) * k]
    }

    pub fn weights(&self, token: u32) -> &[f64] {
        let k = self.topk as usize;
        &self.weights[token as usize * k..(token as usize + 1) * k]
    }

    /// Weight of `expert` for `token`, if routed.
    pub fn weight_of(&self, token: u32, expert: u32) -> Option<f64> {
        self.experts(token).iter().position(|&e| e == expert).map(|k| self.weights(token)[k])
    }

    /// Tokens from `src` routed to `expert`.
    pub fn count(&self, src: u32, expert: u32) -> u32 {
        (0..self.tokens_per_rank).filter(|&i| self.experts(self.token_id(src, i)).contains(&expert)).count() as u32
    }
}

/// Experts of one token grouped by destination node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRoute {
    pub node: u32,
    /// Global expert ranks on `node`, ascending.
    pub experts: Vec<u32>,
}

/// Per token, the distinct destination nodes (ascending) with the local
/// experts each must forward to.
pub fn plan_dedup(plan: &RoutingPlan, gpus_per_node: u32) -> Vec<Vec<NodeRoute>> {
    (0..plan.num_tokens())
        .map(|t| {
            let mut by_node: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
            for &e in plan.experts(t) {
                by_node.entry(e / gpus_per_node).or_default().push(e);
            }
            by_node
                .into_iter()
                .map(|(node, mut experts)| {
                    experts.sort_unstable();
                    NodeRoute { node, experts }
                })
                .collect()
        })
        .collect()
}

/// Inter-node sends the dedup route implies for each token.
pub fn inter_node_sends(plan: &RoutingPlan, routes: &[Vec<NodeRoute>], gpus_per_node: u32) -> Vec<u32> {
    routes
        .iter()
        .enumerate()
        .map(|(t, r)| {
            let home = plan.source(t as u32).0 / gpus_per_node;
            r.iter().filter(|nr| nr.node != home).count() as u32
        })
        .collect()
}

/// Token activations, `num_tokens x hidden_bytes`, in token order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    hidden_bytes: u32,
    data: Vec<u8>,
}

impl TokenBatch {
    pub fn new(hidden_bytes: u32, data: Vec<u8>) -> Result<Self> {
        if hidden_bytes == 0 || !data.len().is_multiple_of(hidden_bytes as usize) {
            return Err(Error::Config(format!(
                "batch of {} bytes is not a whole number of {hidden_bytes}-byte tokens",
                data.len()
            )));
        }
        Ok(TokenBatch { hidden_bytes, data })
    }

    /// Random fp64 activations in [-1, 1). `hidden_bytes` must be a multiple
    /// of 8.
    pub fn random_f64<R: Rng>(num_tokens: u32, hidden_bytes: u32, rng: &mut R) -> Result<Self> {
        if !hidden_bytes.is_multiple_of(8) {
            return Err(Error::Config(format!("hidden_bytes {hidden_bytes} is not a multiple of 8")));
        }
        let values = num_tokens as usize * hidden_bytes as usize / 8;
        let data = (0..values).flat_map(|_| rng.gen_range(-1.0f64..1.0).to_le_bytes()).collect();
        Self::new(hidden_bytes, data)
    }

    pub fn hidden_bytes(&self) -> u32 {
        self.hidden_bytes
    }

    pub fn num_tokens(&self) -> u32 {
        (self.data.len() / self.hidden_bytes as usize) as u32
    }

    pub fn token(&self, t: u32) -> &[u8] {
        let h = self.hidden_bytes as usize;
        &self.data[t as usize * h..(t as usize + 1) * h]
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }
}

pub const CORPUS_MAGIC: [u8; 4] = *b"EPPB";
pub const CORPUS_VERSION: u16 = 1;
const HEADER_BYTES: usize = 24;

/// Serializes a plan and batch:
///
/// ```text
/// magic[4] | version u16 | reserved u16 | ep u32 | topk u32 | hidden_bytes u32
/// | tokens_per_rank u32 | experts u32[] | weights f64[] | payload
/// ```
pub fn encode_corpus(plan: &RoutingPlan, batch: &TokenBatch) -> Result<Vec<u8>> {
    if batch.num_tokens() != plan.num_tokens() {
        return Err(Error::Config(format!("batch has {} tokens, plan has {}", batch.num_tokens(), plan.num_tokens())));
    }
    let mut out = Vec::with_capacity(HEADER_BYTES + plan.experts.len() * 12 + batch.data.len());
    out.extend_from_slice(&CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for v in [plan.ep, plan.topk, batch.hidden_bytes, plan.tokens_per_rank] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(plan.experts.iter().flat_map(|e| e.to_le_bytes()));
    out.extend(plan.weights.iter().flat_map(|w| w.to_le_bytes()));
    out.extend_from_slice(&batch.data);
    Ok(out)
}

pub fn decode_corpus(bytes: &[u8]) -> Result<(RoutingPlan, TokenBatch)> {
    let short = || Error::Decode(format!("corpus truncated at {} bytes", bytes.len()));
    if bytes.len() < HEADER_BYTES {
        return Err(short());
    }
    if bytes[0..4] != CORPUS_MAGIC {
        return Err(Error::Decode("bad corpus magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CORPUS_VERSION {
        return Err(Error::Decode(format!("unsupported corpus version {version}")));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes"));
    let (ep, topk, hidden, tpr) = (word(0), word(1), word(2), word(3));
    let n = ep as usize * tpr as usize * topk as usize;
    let payload = ep as usize * tpr as usize * hidden as usize;
    let need = HEADER_BYTES + n * 12 + payload;
    if bytes.len() != need {
        return Err(Error::Decode(format!("corpus is {} bytes, header implies {need}", bytes.len())));
    }
    let mut at = HEADER_BYTES;
    let experts = bytes[at..at + n * 4].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4"))).collect();
    at += n * 4;
    let weights = bytes[at..at + n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
    at += n * 8;
    let plan = RoutingPlan::new(ep, tpr, topk, experts, weights)?;
    let batch = TokenBatch::new(hidden, bytes[at..].to_vec())?;
    Ok((plan, batch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn same_route(ep: u32, experts: Vec<u32>) -> RoutingPlan {
        let k = experts.len();
        // One token per rank, all routed alike.
        let rows: Vec<u32> = (0..ep).flat_map(|_| experts.clone()).collect();
        let weights = vec![1.0 / k as f64; rows.len()];
        RoutingPlan::new(ep, 1, k as u32, rows, weights).unwrap()
    }

    #[test]
    fn dedup_collapses_experts_on_one_node() {
        let plan = same_route(16, vec![9, 10, 11]);
        let routes = plan_dedup(&plan, 8);
        assert_eq!(routes[0], vec![NodeRoute { node: 1, experts: vec![9, 10, 11] }]);
        let sends = inter_node_sends(&plan, &routes, 8);
        assert_eq!(sends[0], 1);
        // Token of rank 9 already lives on node 1.
        assert_eq!(sends[9], 0);
    }

    #[test]
    fn plan_validation() {
        assert!(RoutingPlan::new(4, 1, 2, vec![0, 0, 1, 2, 0, 1, 2, 3], vec![0.5; 8]).is_err());
        assert!(RoutingPlan::new(4, 1, 1, vec![0, 1, 2, 4], vec![1.0; 4]).is_err());
        assert!(RoutingPlan::new(2, 1, 1, vec![0, 1], vec![1.0, 0.9]).is_err());
        assert!(RoutingPlan::new(2, 1, 1, vec![0, 1], vec![1.0, 1.0 + 1e-12]).is_ok());
    }

    #[test]
    fn random_plans_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = RoutingPlan::random(32, 16, 8, &mut rng).unwrap();
        assert_eq!(plan.num_tokens(), 512);
        assert_eq!(plan.source(17), (1, 1));
        assert_eq!(plan.token_id(1, 1), 17);
    }

    #[test]
    fn corpus_round_trip_and_rejects_damage() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let plan = RoutingPlan::random(8, 4, 3, &mut rng).unwrap();
        let batch = TokenBatch::random_f64(32, 64, &mut rng).unwrap();
        let bytes = encode_corpus(&plan, &batch).unwrap();
        assert_eq!(decode_corpus(&bytes).unwrap(), (plan, batch));
        assert!(decode_corpus(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_corpus(&bad).is_err());
    }
}
