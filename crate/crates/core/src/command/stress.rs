//! Wall-clock FIFO stress: one producer and one consumer thread per channel.

use std::sync::Barrier;
use std::thread;
use std::time::{Duration, Instant};

use super::fifo::{channel, Backoff, ChannelStats};
use super::TransferCmd;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelThroughput {
    pub commands: u64,
    pub elapsed: Duration,
    /// Commands that arrived out of order, twice, or not at all.
    pub violations: u64,
    pub stats: ChannelStats,
}

impl ChannelThroughput {
    pub fn cmds_per_sec(&self) -> f64 {
        self.commands as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StressReport {
    pub capacity: usize,
    pub channels: Vec<ChannelThroughput>,
    pub elapsed: Duration,
}

impl StressReport {
    pub fn total_commands(&self) -> u64 {
        self.channels.iter().map(|c| c.commands).sum()
    }

    pub fn aggregate_cmds_per_sec(&self) -> f64 {
        self.total_commands() as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }

    pub fn violations(&self) -> u64 {
        self.channels.iter().map(|c| c.violations).sum()
    }
}

fn encode(seq: u64, channel: u32) -> TransferCmd {
    TransferCmd::write(0, channel, seq as u32, (seq >> 32) as u32, 1).expect("valid stress command")
}

fn decode(cmd: &TransferCmd) -> u64 {
    cmd.src_offset() as u64 | (cmd.dst_offset() as u64) << 32
}

/// Pushes `msgs` sequence-numbered commands through each of `num_channels`
/// channels concurrently and checks every consumer sees exactly 0..msgs.
pub fn fifo_stress(num_channels: usize, msgs: u64, capacity: usize) -> Result<StressReport> {
    if num_channels == 0 || msgs == 0 || num_channels > super::MAX_CHANNELS as usize {
        return Err(Error::Config(format!(
            "fifo stress needs 1..={} channels and a positive message count",
            super::MAX_CHANNELS
        )));
    }
    let start = Barrier::new(2 * num_channels + 1);
    let (began, channels) = thread::scope(|s| -> Result<(Instant, Vec<ChannelThroughput>)> {
        let mut consumers = Vec::with_capacity(num_channels);
        for ch in 0..num_channels as u32 {
            let (mut tx, mut rx) = channel(capacity)?;
            let start = &start;
            s.spawn(move || -> Result<()> {
                start.wait();
                for seq in 0..msgs {
                    tx.push(encode(seq, ch))?;
                }
                Ok(())
            });
            consumers.push(s.spawn(move || {
                start.wait();
                let t0 = Instant::now();
                let (mut expected, mut violations) = (0u64, 0u64);
                let mut backoff = Backoff::default();
                while expected < msgs {
                    if rx.poll().is_none() {
                        backoff.snooze();
                        continue;
                    }
                    backoff = Backoff::default();
                    let cmd = rx.pop().expect("polled");
                    let seq = decode(&cmd);
                    if seq != expected || cmd.channel_id() != ch {
                        violations += 1;
                    }
                    expected = expected.max(seq) + 1;
                    if expected % 16 == 0 {
                        rx.mark_completed(rx.head_index() - 1).expect("head advanced");
                    }
                }
                rx.mark_completed(rx.head_index() - 1).expect("head advanced");
                let tail = rx.channel().tail();
                ChannelThroughput {
                    commands: rx.head_index(),
                    elapsed: t0.elapsed(),
                    violations: violations + tail.saturating_sub(rx.head_index()),
                    stats: rx.stats(),
                }
            }));
        }
        start.wait();
        let began = Instant::now();
        let results = consumers.into_iter().map(|h| h.join().expect("consumer thread panicked")).collect();
        Ok((began, results))
    })?;
    Ok(StressReport { capacity, channels, elapsed: began.elapsed() })
}
