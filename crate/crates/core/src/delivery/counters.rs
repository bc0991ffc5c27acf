//! Layout of the host counter array each rank exposes to atomics.
//!
//! ```text
//! [ LL: ranks * ll_keys ][ HT: ranks * channels * 2 ]
//! ```
//!
//! An LL slot is indexed by (source rank, fence key); an HT slot by
//! (source rank, channel, ring counter). The same layout is used on every
//! rank, so a sender can name the remote slot by offset and the receiver can
//! recover it from the immediate word plus the connection's source rank.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RingCounter {
    /// Producer-advanced: chunks written.
    Tail = 0,
    /// Consumer-advanced: chunks consumed.
    Head = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CounterSlot {
    Ll { src: u32, key: u32 },
    Ht { src: u32, channel: u32, counter: RingCounter },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CounterLayout {
    pub ranks: u32,
    pub ll_keys: u32,
    pub channels: u32,
}

impl CounterLayout {
    pub fn new(ranks: u32, ll_keys: u32, channels: u32) -> Self {
        CounterLayout { ranks, ll_keys, channels }
    }

    fn ll_len(&self) -> usize {
        self.ranks as usize * self.ll_keys as usize
    }

    pub fn len(&self) -> usize {
        self.ll_len() + self.ranks as usize * self.channels as usize * 2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ll_slot(&self, src: u32, key: u32) -> usize {
        debug_assert!(src < self.ranks && key < self.ll_keys);
        src as usize * self.ll_keys as usize + key as usize
    }

    pub fn ht_slot(&self, src: u32, channel: u32, counter: RingCounter) -> usize {
        debug_assert!(src < self.ranks && channel < self.channels);
        self.ll_len() + (src as usize * self.channels as usize + channel as usize) * 2 + counter as usize
    }

    pub fn slot_offset(slot: usize) -> u32 {
        (slot * 8) as u32
    }

    pub fn decode_offset(&self, offset: u32) -> Result<CounterSlot> {
        if !offset.is_multiple_of(8) || offset as usize / 8 >= self.len() {
            return Err(Error::protocol(format!("counter offset {offset:#x} is not a counter slot")));
        }
        let slot = offset as usize / 8;
        if slot < self.ll_len() {
            let keys = self.ll_keys as usize;
            return Ok(CounterSlot::Ll { src: (slot / keys) as u32, key: (slot % keys) as u32 });
        }
        let rest = slot - self.ll_len();
        let counter = if rest.is_multiple_of(2) { RingCounter::Tail } else { RingCounter::Head };
        let pair = rest / 2;
        let channels = self.channels as usize;
        Ok(CounterSlot::Ht { src: (pair / channels) as u32, channel: (pair % channels) as u32, counter })
    }
}
