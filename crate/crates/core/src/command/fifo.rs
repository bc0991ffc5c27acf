//! Bounded single-producer/single-consumer command FIFO.
//!
//! The producer owns `tail`, the consumer owns `head` and `completed`. Each
//! side keeps a private cached copy of the other side's counter and only
//! re-reads the shared value when the cache says the ring is full (producer)
//! or empty (consumer). Those refreshes are the accesses that would cross
//! PCIe in a split host/device placement; they are counted in
//! [`ChannelStats`].

use std::cell::UnsafeCell;
use std::fmt;
use std::hint;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use super::cmd::TransferCmd;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_INFLIGHT: usize = 64;

/// Global position of a command in its channel, starting at 0.
pub type CmdIndex = u64;

#[repr(align(64))]
struct Padded<T>(T);

impl<T> std::ops::Deref for Padded<T> {
    type Target = T;

    fn deref(&self) -> &T {
        &self.0
    }
}

/// Shared state of one channel. Obtain handles through [`channel`].
pub struct FifoChannel {
    slots: Box<[UnsafeCell<TransferCmd>]>,
    mask: u64,
    tail: Padded<AtomicU64>,
    head: Padded<AtomicU64>,
    /// Number of leading commands (indices `0..completed`) marked complete.
    completed: Padded<AtomicU64>,
    shutdown: AtomicBool,
}

// SAFETY: a slot is written only by the producer while `tail - head < capacity`
// guarantees the consumer is not reading it, and read only by the consumer
// after an acquire load of `tail` that covers it. Handles are not Clone, so
// there is exactly one of each side.
unsafe impl Sync for FifoChannel {}
unsafe impl Send for FifoChannel {}

impl FifoChannel {
    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn head(&self) -> u64 {
        self.head.load(Ordering::Acquire)
    }

    pub fn tail(&self) -> u64 {
        self.tail.load(Ordering::Acquire)
    }

    /// Highest index reported complete, if any.
    pub fn completed_upto(&self) -> Option<CmdIndex> {
        self.completed.load(Ordering::Acquire).checked_sub(1)
    }

    pub fn occupancy(&self) -> u64 {
        // Read head first: tail can only grow, so tail - head never underflows.
        let head = self.head();
        self.tail() - head
    }

    pub fn is_shut_down(&self) -> bool {
        self.shutdown.load(Ordering::Acquire)
    }
}

impl fmt::Debug for FifoChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FifoChannel")
            .field("capacity", &self.capacity())
            .field("head", &self.head())
            .field("tail", &self.tail())
            .field("completed_upto", &self.completed_upto())
            .finish()
    }
}

/// Access counters used by the placement latency model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub pushes: u64,
    pub pops: u64,
    pub polls: u64,
    /// Producer re-read the consumer-owned head because its cache said "full".
    pub producer_head_refreshes: u64,
    /// Consumer re-read the producer-owned tail because its cache said "empty".
    pub consumer_tail_refreshes: u64,
}

impl ChannelStats {
    pub fn merge(&self, other: &ChannelStats) -> ChannelStats {
        ChannelStats {
            pushes: self.pushes + other.pushes,
            pops: self.pops + other.pops,
            polls: self.polls + other.polls,
            producer_head_refreshes: self.producer_head_refreshes + other.producer_head_refreshes,
            consumer_tail_refreshes: self.consumer_tail_refreshes + other.consumer_tail_refreshes,
        }
    }
}

/// Creates a channel with `capacity` slots (`kMaxInflight`, a power of two).
pub fn channel(capacity: usize) -> Result<(FifoProducer, FifoConsumer)> {
    if capacity == 0 || !capacity.is_power_of_two() {
        return Err(Error::config(format!("FIFO capacity {capacity} is not a power of two")));
    }
    let slots = (0..capacity).map(|_| UnsafeCell::new(TransferCmd::default())).collect();
    let shared = Arc::new(FifoChannel {
        slots,
        mask: capacity as u64 - 1,
        tail: Padded(AtomicU64::new(0)),
        head: Padded(AtomicU64::new(0)),
        completed: Padded(AtomicU64::new(0)),
        shutdown: AtomicBool::new(false),
    });
    let producer = FifoProducer { chan: Arc::clone(&shared), tail: 0, cached_head: 0, stats: ChannelStats::default() };
    let consumer = FifoConsumer { chan: shared, head: 0, cached_tail: 0, stats: ChannelStats::default() };
    Ok((producer, consumer))
}

/// Result of a non-blocking push.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TryPush {
    Pushed(CmdIndex),
    Full,
}

/// Producer half; the emulated GPU thread.
pub struct FifoProducer {
    chan: Arc<FifoChannel>,
    tail: u64,
    cached_head: u64,
    stats: ChannelStats,
}

impl FifoProducer {
    pub fn channel(&self) -> &FifoChannel {
        &self.chan
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    fn has_space(&mut self) -> bool {
        let cap = self.chan.capacity() as u64;
        if self.tail - self.cached_head < cap {
            return true;
        }
        self.stats.producer_head_refreshes += 1;
        self.cached_head = self.chan.head.load(Ordering::Acquire);
        self.tail - self.cached_head < cap
    }

    fn publish(&mut self, cmd: TransferCmd) -> CmdIndex {
        let idx = self.tail;
        // SAFETY: has_space() observed head > idx - capacity with acquire
        // ordering, so the consumer finished reading this slot.
        unsafe {
            *self.chan.slots[(idx & self.chan.mask) as usize].get() = cmd;
        }
        self.tail = idx + 1;
        self.chan.tail.store(self.tail, Ordering::Release);
        self.stats.pushes += 1;
        idx
    }

    /// Enqueues without blocking.
    pub fn try_push(&mut self, cmd: TransferCmd) -> Result<TryPush> {
        if self.chan.is_shut_down() {
            return Err(Error::Shutdown);
        }
        if !self.has_space() {
            return Ok(TryPush::Full);
        }
        Ok(TryPush::Pushed(self.publish(cmd)))
    }

    /// Enqueues, spinning while the channel holds `capacity` commands.
    pub fn push(&mut self, cmd: TransferCmd) -> Result<CmdIndex> {
        let mut backoff = Backoff::default();
        loop {
            if self.chan.is_shut_down() {
                return Err(Error::Shutdown);
            }
            if self.has_space() {
                return Ok(self.publish(cmd));
            }
            backoff.snooze();
        }
    }

    /// True once the consumer marked `idx` (and every earlier index) complete.
    pub fn check_completion(&self, idx: CmdIndex) -> bool {
        self.chan.completed.load(Ordering::Acquire) > idx
    }

    /// Index the next push will receive.
    pub fn next_index(&self) -> CmdIndex {
        self.tail
    }
}

impl fmt::Debug for FifoProducer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FifoProducer").field("tail", &self.tail).field("chan", &*self.chan).finish()
    }
}

/// Consumer half; owned by one proxy thread.
pub struct FifoConsumer {
    chan: Arc<FifoChannel>,
    head: u64,
    cached_tail: u64,
    stats: ChannelStats,
}

impl FifoConsumer {
    pub fn channel(&self) -> &FifoChannel {
        &self.chan
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    /// Index of the command `poll` would return.
    pub fn head_index(&self) -> CmdIndex {
        self.head
    }

    fn available(&mut self) -> bool {
        if self.head < self.cached_tail {
            return true;
        }
        self.stats.consumer_tail_refreshes += 1;
        self.cached_tail = self.chan.tail.load(Ordering::Acquire);
        self.head < self.cached_tail
    }

    /// Reads the head command without removing it.
    pub fn poll(&mut self) -> Option<TransferCmd> {
        self.stats.polls += 1;
        if !self.available() {
            return None;
        }
        // SAFETY: head < tail (acquire), so the producer published this slot and
        // cannot rewrite it until head advances past it.
        Some(unsafe { *self.chan.slots[(self.head & self.chan.mask) as usize].get() })
    }

    /// Removes the head command. Popping an empty channel is a consumer bug.
    pub fn pop(&mut self) -> Result<TransferCmd> {
        if !self.available() {
            return Err(Error::protocol("pop on empty FIFO channel"));
        }
        // SAFETY: as in poll().
        let cmd = unsafe { *self.chan.slots[(self.head & self.chan.mask) as usize].get() };
        self.head += 1;
        self.chan.head.store(self.head, Ordering::Release);
        self.stats.pops += 1;
        Ok(cmd)
    }

    /// Publishes that every command up to and including `upto` completed.
    pub fn mark_completed(&mut self, upto: CmdIndex) -> Result<()> {
        if upto > self.head {
            return Err(Error::protocol(format!("mark_completed({upto}) beyond head {}", self.head)));
        }
        self.chan.completed.fetch_max(upto + 1, Ordering::AcqRel);
        Ok(())
    }

    /// Refuses all further pushes; a producer blocked in `push` returns `Shutdown`.
    pub fn shutdown(&self) {
        self.chan.shutdown.store(true, Ordering::Release);
    }
}

impl fmt::Debug for FifoConsumer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FifoConsumer").field("head", &self.head).field("chan", &*self.chan).finish()
    }
}

#[derive(Default)]
pub(crate) struct Backoff {
    step: u32,
}

impl Backoff {
    const SPIN_LIMIT: u32 = 6;

    pub(crate) fn snooze(&mut self) {
        if self.step <= Self::SPIN_LIMIT {
            for _ in 0..(1u32 << self.step) {
                hint::spin_loop();
            }
            self.step += 1;
        } else {
            thread::yield_now();
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;
    use std::sync::atomic::AtomicUsize;
    use std::time::Duration;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::command::cmd::CmdKind;

    fn cmd(n: u32) -> TransferCmd {
        TransferCmd::write(n % 4096, n % 64, n, n.wrapping_mul(7), n.wrapping_add(1)).unwrap()
    }

    #[test]
    fn capacity_must_be_power_of_two() {
        assert!(channel(0).is_err());
        assert!(channel(3).is_err());
        assert!(channel(1).is_ok());
        assert_eq!(channel(DEFAULT_MAX_INFLIGHT).unwrap().0.channel().capacity(), 64);
    }

    #[test]
    fn poll_on_empty_returns_none() {
        let (_p, mut c) = channel(4).unwrap();
        assert_eq!(c.poll(), None);
    }

    #[test]
    fn poll_is_idempotent_until_pop() {
        let (mut p, mut c) = channel(4).unwrap();
        p.push(cmd(1)).unwrap();
        assert_eq!(c.poll(), Some(cmd(1)));
        assert_eq!(c.poll(), Some(cmd(1)));
        assert_eq!(c.pop().unwrap(), cmd(1));
        assert_eq!(c.poll(), None);
    }

    #[test]
    fn fifo_order_and_pop_on_empty() {
        let (mut p, mut c) = channel(4).unwrap();
        assert_eq!(p.push(cmd(10)).unwrap(), 0);
        assert_eq!(p.push(cmd(11)).unwrap(), 1);
        assert_eq!(c.pop().unwrap(), cmd(10));
        assert_eq!(c.pop().unwrap(), cmd(11));
        assert!(matches!(c.pop(), Err(Error::Protocol(_))));
    }

    #[test]
    fn token_sized_write_observed_verbatim() {
        let (mut p, mut c) = channel(DEFAULT_MAX_INFLIGHT).unwrap();
        let w = TransferCmd::write(3, 0, 0, 0x4000, 7168).unwrap();
        let idx = p.push(w).unwrap();
        assert_eq!(idx, 0);
        let seen = c.poll().unwrap();
        assert_eq!(seen, w);
        assert_eq!(seen.kind(), CmdKind::Write);
        assert_eq!(seen.dst_rank(), 3);
        assert_eq!(seen.length_or_value(), 7168);
    }

    #[test]
    fn try_push_reports_full_at_capacity() {
        let (mut p, mut c) = channel(2).unwrap();
        assert_eq!(p.try_push(cmd(0)).unwrap(), TryPush::Pushed(0));
        assert_eq!(p.try_push(cmd(1)).unwrap(), TryPush::Pushed(1));
        assert_eq!(p.try_push(cmd(2)).unwrap(), TryPush::Full);
        assert_eq!(p.channel().occupancy(), 2);
        c.pop().unwrap();
        assert_eq!(p.try_push(cmd(2)).unwrap(), TryPush::Pushed(2));
    }

    #[test]
    fn blocked_push_unblocks_after_one_pop() {
        // capacity 1: the second push must wait for exactly one pop.
        let (mut p, mut c) = channel(1).unwrap();
        p.push(cmd(0)).unwrap();
        let pushed = Arc::new(AtomicUsize::new(0));
        let flag = Arc::clone(&pushed);
        let h = thread::spawn(move || {
            let idx = p.push(cmd(1)).unwrap();
            flag.store(1, Ordering::SeqCst);
            (p, idx)
        });
        thread::sleep(Duration::from_millis(50));
        assert_eq!(pushed.load(Ordering::SeqCst), 0, "push must block while full");
        assert_eq!(c.pop().unwrap(), cmd(0));
        let (p, idx) = h.join().unwrap();
        assert_eq!(idx, 1);
        assert_eq!(pushed.load(Ordering::SeqCst), 1);
        assert_eq!(p.channel().occupancy(), 1);
        assert_eq!(c.pop().unwrap(), cmd(1));
    }

    #[test]
    fn shutdown_releases_blocked_producer() {
        let (mut p, c) = channel(1).unwrap();
        p.push(cmd(0)).unwrap();
        let h = thread::spawn(move || p.push(cmd(1)));
        thread::sleep(Duration::from_millis(20));
        c.shutdown();
        assert_eq!(h.join().unwrap(), Err(Error::Shutdown));
    }

    #[test]
    fn completion_is_monotone() {
        let (mut p, mut c) = channel(8).unwrap();
        for i in 0..6 {
            p.push(cmd(i)).unwrap();
        }
        let i0 = 0;
        assert!(!p.check_completion(i0));
        c.pop().unwrap();
        c.mark_completed(0).unwrap();
        assert!(p.check_completion(0));
        for _ in 0..5 {
            c.pop().unwrap();
        }
        c.mark_completed(5).unwrap();
        c.mark_completed(3).unwrap();
        assert_eq!(c.channel().completed_upto(), Some(5));
        assert!(p.check_completion(5));
        assert!(!p.check_completion(6));
    }

    #[test]
    fn mark_completed_beyond_head_is_rejected() {
        let (mut p, mut c) = channel(4).unwrap();
        p.push(cmd(0)).unwrap();
        assert!(c.mark_completed(1).is_err());
        // head itself is allowed: a polled-but-unpopped barrier completes first.
        assert!(c.mark_completed(0).is_ok());
    }

    #[test]
    fn million_commands_exactly_once_in_order() {
        const N: u32 = 1_000_000;
        let (mut p, mut c) = channel(DEFAULT_MAX_INFLIGHT).unwrap();
        let prod = thread::spawn(move || {
            for i in 0..N {
                p.push(cmd(i)).unwrap();
            }
            p
        });
        let mut expected = 0u32;
        while expected < N {
            if c.poll().is_some() {
                let got = c.pop().unwrap();
                assert_eq!(got, cmd(expected));
                expected += 1;
            } else {
                thread::yield_now();
            }
        }
        let p = prod.join().unwrap();
        assert_eq!(p.channel().tail(), N as u64);
        assert_eq!(c.channel().head(), N as u64);
        assert!(c.poll().is_none());
    }

    #[test]
    fn random_interleaving_matches_queue_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut p, mut c) = channel(8).unwrap();
        let mut oracle = VecDeque::new();
        let mut next = 0u32;
        for _ in 0..10_000 {
            match rng.gen_range(0..3) {
                0 => {
                    let r = p.try_push(cmd(next)).unwrap();
                    if oracle.len() < 8 {
                        assert_eq!(r, TryPush::Pushed(next as u64));
                        oracle.push_back(cmd(next));
                        next += 1;
                    } else {
                        assert_eq!(r, TryPush::Full);
                    }
                }
                1 => assert_eq!(c.poll(), oracle.front().copied()),
                _ => match oracle.pop_front() {
                    Some(want) => assert_eq!(c.pop().unwrap(), want),
                    None => assert!(c.pop().is_err()),
                },
            }
            let occ = p.channel().occupancy();
            assert!(occ <= 8);
            assert_eq!(occ as usize, oracle.len());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn concurrent_fifo_linearizable(cap_log in 0u32..5, n in 1u32..4000) {
            let cap = 1usize << cap_log;
            let (mut p, mut c) = channel(cap).unwrap();
            let prod = thread::spawn(move || {
                for i in 0..n {
                    p.push(cmd(i)).unwrap();
                    assert!(p.channel().occupancy() <= cap as u64);
                }
            });
            let mut got = Vec::with_capacity(n as usize);
            while got.len() < n as usize {
                if c.poll().is_some() {
                    got.push(c.pop().unwrap());
                    let last = got.len() as u64 - 1;
                    c.mark_completed(last).unwrap();
                } else {
                    thread::yield_now();
                }
            }
            prod.join().unwrap();
            prop_assert!(got.iter().enumerate().all(|(i, g)| *g == cmd(i as u32)));
        }
    }
}
