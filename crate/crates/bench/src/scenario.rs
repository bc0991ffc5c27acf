//! Scenario files: TOML, unknown keys rejected.

use std::path::Path;

use ep_proxy::delivery::Enforcement;
use ep_proxy::engine::{EngineConfig, ExpertFn, LlSignal, ReduceOrder};
use ep_proxy::proxy::{Mode, ProxyConfig};
use ep_proxy::transport::TransportProfile;
use serde::Deserialize;

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    /// Dispatch/combine iterations, optionally swept over token counts.
    #[default]
    Moe,
    /// The MoE workload under receiver- then sender-side enforcement.
    Enforcement,
    /// Random writes and atomics straight through the proxy, audited.
    Fuzz,
    FifoStress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSel {
    #[serde(alias = "LL")]
    Ll,
    #[serde(alias = "HT")]
    Ht,
    /// LL and HT on identical plans.
    Both,
}

impl ModeSel {
    pub fn modes(self) -> Vec<Mode> {
        match self {
            ModeSel::Ll => vec![Mode::LowLatency],
            ModeSel::Ht => vec![Mode::HighThroughput],
            ModeSel::Both => vec![Mode::LowLatency, Mode::HighThroughput],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineKnobs {
    pub num_threads: u32,
    pub channels_per_thread: u32,
    pub fifo_capacity: usize,
    pub emulate_atomics: bool,
    pub ll_signal: LlSignal,
    pub expert: ExpertFn,
    pub reduce: ReduceOrder,
    pub chunk_tokens: u32,
    pub ring_slots: u32,
}

impl Default for EngineKnobs {
    fn default() -> Self {
        let d = EngineConfig::new(1, 1, Mode::LowLatency);
        EngineKnobs {
            num_threads: d.num_threads,
            channels_per_thread: d.channels_per_thread,
            fifo_capacity: d.fifo_capacity,
            emulate_atomics: d.emulate_atomics,
            ll_signal: d.ll_signal,
            expert: d.expert,
            reduce: d.reduce,
            chunk_tokens: d.chunk_tokens,
            ring_slots: d.ring_slots,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FifoSection {
    pub channels: usize,
    pub messages: u64,
    pub capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuzzSection {
    pub rounds: u32,
    pub messages_per_channel: u32,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub kind: Kind,
    pub ep_size: Option<u32>,
    pub nodes: Option<u32>,
    pub gpus_per_node: Option<u32>,
    #[serde(default = "default_topk")]
    pub topk: u32,
    /// Tokens per iteration across all source ranks.
    pub num_tokens: Option<u32>,
    /// Token counts to sweep instead of `num_tokens`.
    #[serde(default)]
    pub sweep_tokens: Vec<u32>,
    #[serde(default = "default_hidden")]
    pub hidden_bytes: u32,
    pub mode: Option<ModeSel>,
    #[serde(default)]
    pub enforcement_side: Enforcement,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_iterations")]
    pub iterations: u32,
    #[serde(default)]
    pub engine: EngineKnobs,
    pub transport: Option<TransportProfile>,
    pub fifo: Option<FifoSection>,
    pub fuzz: Option<FuzzSection>,
}

fn default_topk() -> u32 {
    8
}

fn default_hidden() -> u32 {
    7168
}

fn default_iterations() -> u32 {
    1
}

fn field(name: &str, msg: impl std::fmt::Display) -> BenchError {
    BenchError::Config(format!("{name}: {msg}"))
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let s: Scenario = toml::from_str(text).map_err(|e| BenchError::Config(e.message().to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn require<T: Copy>(&self, name: &str, v: Option<T>) -> Result<T, BenchError> {
        v.ok_or_else(|| field(name, format!("required for kind = {:?}", self.kind)))
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.kind == Kind::FifoStress {
            let f = self.fifo.as_ref().ok_or_else(|| field("fifo", "section required for kind = fifo_stress"))?;
            for (name, v) in [
                ("fifo.channels", f.channels as u64),
                ("fifo.messages", f.messages),
                ("fifo.capacity", f.capacity as u64),
            ] {
                if v == 0 {
                    return Err(field(name, "must be positive"));
                }
            }
            if f.channels > 64 {
                return Err(field("fifo.channels", format!("{} exceeds 64", f.channels)));
            }
            if !f.capacity.is_power_of_two() {
                return Err(field("fifo.capacity", format!("{} is not a power of two", f.capacity)));
            }
            return Ok(());
        }
        let ep = self.require("ep_size", self.ep_size)?;
        let nodes = self.require("nodes", self.nodes)?;
        let gpus = self.require("gpus_per_node", self.gpus_per_node)?;
        self.require("mode", self.mode)?;
        let transport = self.transport.as_ref().ok_or_else(|| field("transport", "section required"))?;
        for (name, v) in [
            ("ep_size", ep),
            ("nodes", nodes),
            ("gpus_per_node", gpus),
            ("topk", self.topk),
            ("hidden_bytes", self.hidden_bytes),
            ("iterations", self.iterations),
        ] {
            if v == 0 {
                return Err(field(name, "must be positive"));
            }
        }
        if ep != nodes * gpus {
            return Err(field("ep_size", format!("{ep} does not equal nodes ({nodes}) x gpus_per_node ({gpus})")));
        }
        transport.validate().map_err(|e| field("transport", e))?;
        match self.kind {
            Kind::Fuzz => {
                let f = self.fuzz.as_ref().ok_or_else(|| field("fuzz", "section required for kind = fuzz"))?;
                if f.rounds == 0 || f.messages_per_channel == 0 {
                    return Err(field("fuzz", "rounds and messages_per_channel must be positive"));
                }
                if self.mode == Some(ModeSel::Both) {
                    return Err(field("mode", "fuzz runs one mode; use ll or ht"));
                }
                self.proxy_config(self.modes()[0]).validate().map_err(|e| field("engine", e))?;
            }
            Kind::Moe | Kind::Enforcement => {
                if !self.hidden_bytes.is_multiple_of(8) {
                    return Err(field("hidden_bytes", format!("{} is not a multiple of 8", self.hidden_bytes)));
                }
                if self.topk > ep {
                    return Err(field("topk", format!("{} exceeds ep_size {ep}", self.topk)));
                }
                for tokens in self.token_points()? {
                    if tokens == 0 || tokens % ep != 0 {
                        return Err(field(
                            if self.sweep_tokens.is_empty() { "num_tokens" } else { "sweep_tokens" },
                            format!("{tokens} is not a positive multiple of ep_size {ep}"),
                        ));
                    }
                }
                for mode in self.modes() {
                    self.engine_config(mode, self.max_tokens()).validate().map_err(|e| field("engine", e))?;
                }
            }
            Kind::FifoStress => unreachable!(),
        }
        Ok(())
    }

    pub fn modes(&self) -> Vec<Mode> {
        self.mode.map(ModeSel::modes).unwrap_or_default()
    }

    pub fn token_points(&self) -> Result<Vec<u32>, BenchError> {
        if !self.sweep_tokens.is_empty() {
            return Ok(self.sweep_tokens.clone());
        }
        Ok(vec![self.require("num_tokens", self.num_tokens)?])
    }

    fn max_tokens(&self) -> u32 {
        self.token_points().unwrap_or_default().into_iter().max().unwrap_or(0)
    }

    pub fn engine_config(&self, mode: Mode, tokens: u32) -> EngineConfig {
        let (nodes, gpus) = (self.nodes.unwrap_or(1), self.gpus_per_node.unwrap_or(1));
        let k = &self.engine;
        EngineConfig {
            topk: self.topk,
            max_tokens_per_rank: tokens / (nodes * gpus).max(1),
            hidden_bytes: self.hidden_bytes,
            num_threads: k.num_threads,
            channels_per_thread: k.channels_per_thread,
            fifo_capacity: k.fifo_capacity,
            enforcement: self.enforcement_side,
            emulate_atomics: k.emulate_atomics,
            ll_signal: k.ll_signal,
            expert: k.expert,
            reduce: k.reduce,
            chunk_tokens: k.chunk_tokens,
            ring_slots: k.ring_slots,
            ..EngineConfig::new(nodes, gpus, mode)
        }
    }

    pub fn proxy_config(&self, mode: Mode) -> ProxyConfig {
        let k = &self.engine;
        ProxyConfig {
            num_threads: k.num_threads,
            channels_per_thread: k.channels_per_thread,
            fifo_capacity: k.fifo_capacity,
            enforcement: self.enforcement_side,
            emulate_atomics: k.emulate_atomics,
            region_len: 1 << 16,
            ll_keys: 4,
            ll_window_bytes: 1 << 14,
            ..ProxyConfig::new(self.nodes.unwrap_or(1), self.gpus_per_node.unwrap_or(1), mode)
        }
    }

    pub fn transport(&self) -> TransportProfile {
        self.transport.clone().expect("validated")
    }
}
