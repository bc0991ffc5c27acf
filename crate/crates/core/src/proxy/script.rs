//! A scripted GPU program: pushes fixed command lists and waits for them.

use std::collections::{BTreeMap, VecDeque};

use super::{Device, GpuProgram};
use crate::command::{CmdIndex, TransferCmd};
use crate::error::Result;

/// Pushes each channel's commands in order (as fast as the FIFO allows) and
/// finishes once every command is complete and every awaited counter
/// reached its target.
#[derive(Debug, Default, Clone)]
pub struct CommandScript {
    queues: BTreeMap<(u32, u32), VecDeque<TransferCmd>>,
    last: BTreeMap<(u32, u32), CmdIndex>,
    counters: Vec<(u32, usize, i64)>,
    pushed: Vec<(u32, u32, CmdIndex, TransferCmd)>,
    finished_at: Option<u64>,
}

impl CommandScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rank: u32, channel: u32, cmd: TransferCmd) -> &mut Self {
        self.queues.entry((rank, channel)).or_default().push_back(cmd);
        self
    }

    /// Also wait until `rank`'s host counter `slot` is at least `value`.
    pub fn wait_counter(&mut self, rank: u32, slot: usize, value: i64) -> &mut Self {
        self.counters.push((rank, slot, value));
        self
    }

    /// Simulated time at which the script observed completion.
    pub fn finished_at(&self) -> Option<u64> {
        self.finished_at
    }

    /// Every pushed command as `(rank, channel, index, cmd)`, in push order.
    pub fn pushed(&self) -> &[(u32, u32, CmdIndex, TransferCmd)] {
        &self.pushed
    }
}

impl GpuProgram for CommandScript {
    fn step(&mut self, dev: &mut Device<'_>) -> Result<bool> {
        if self.finished_at.is_some() {
            return Ok(false);
        }
        let mut progress = false;
        for (&(rank, channel), queue) in &mut self.queues {
            while let Some(&cmd) = queue.front() {
                let Some(idx) = dev.try_push(rank, channel, cmd)? else { break };
                queue.pop_front();
                self.last.insert((rank, channel), idx);
                self.pushed.push((rank, channel, idx, cmd));
                progress = true;
            }
        }
        let all_pushed = self.queues.values().all(VecDeque::is_empty);
        let all_complete = self.last.iter().all(|(&(r, c), &idx)| dev.producer(r, c).check_completion(idx));
        let counters_reached = self.counters.iter().all(|&(r, slot, v)| dev.counter(r, slot) >= v);
        if all_pushed && all_complete && counters_reached {
            self.finished_at = Some(dev.now());
            progress = true;
        }
        Ok(progress)
    }

    fn is_done(&self) -> bool {
        self.finished_at.is_some()
    }
}
