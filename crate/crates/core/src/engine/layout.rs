//! Byte layout of the symmetric region every rank registers.
//!
//! ```text
//! window 0: dispatch receive  [src rank][src index]           hidden bytes each
//! window 1: combine receive   [src index][row slot or node]   hidden bytes each
//! then      send              [src index]
//!           expert out        [src rank][src index]
//!           weighted out      [src rank][src index]           (LL)
//!           ring              [src node][channel][slot]       (HT)
//!           staging           [dst node][channel][slot]       (HT)
//! ```
//!
//! Both windows are `window` bytes so an LL write's fence key is its window
//! number.

use crate::error::{Error, Result};
use crate::proxy::Mode;

/// Header at the start of every ring slot: sequence canary, record count,
/// phase tag.
pub const CHUNK_HEADER_BYTES: usize = 16;
/// Per-record header: token id, source index, expert mask or node tag.
pub const RECORD_HEADER_BYTES: usize = 16;
/// Fill byte for receive buffers before every phase.
pub const POISON: u8 = 0xA5;
/// Canary a consumed slot is reset to.
pub const CONSUMED_SLOT: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub ep: u32,
    pub nodes: u32,
    pub channels: u32,
    pub tokens: u32,
    pub hidden: u32,
    pub combine_slots: u32,
    pub chunk_tokens: u32,
    pub ring_slots: u32,
    pub window: usize,
    send: usize,
    out: usize,
    wout: usize,
    ring: usize,
    staging: usize,
    len: usize,
}

impl Layout {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mode: Mode,
        ep: u32,
        nodes: u32,
        channels: u32,
        tokens: u32,
        hidden: u32,
        topk: u32,
        chunk_tokens: u32,
        ring_slots: u32,
    ) -> Result<Self> {
        let h = hidden as usize;
        let per_src = tokens as usize * h;
        let combine_slots = topk.max(nodes);
        let window = (ep as usize * per_src).max(per_src * combine_slots as usize).next_multiple_of(64);
        let send = 2 * window;
        let out = send + per_src;
        let wout = out + ep as usize * per_src;
        let (ring, staging, len) = match mode {
            Mode::LowLatency => {
                (wout + ep as usize * per_src, wout + ep as usize * per_src, wout + ep as usize * per_src)
            }
            Mode::HighThroughput => {
                let rings = (nodes * channels * ring_slots) as usize
                    * (CHUNK_HEADER_BYTES + chunk_tokens as usize * (RECORD_HEADER_BYTES + h));
                (wout, wout + rings, wout + 2 * rings)
            }
        };
        if len as u64 > u32::MAX as u64 {
            return Err(Error::Config(format!(
                "symmetric region of {len} bytes exceeds the 32-bit offset space; reduce tokens, hidden_bytes or ring slots"
            )));
        }
        Ok(Layout {
            ep,
            nodes,
            channels,
            tokens,
            hidden,
            combine_slots,
            chunk_tokens,
            ring_slots,
            window,
            send,
            out,
            wout,
            ring,
            staging,
            len: len.max(64),
        })
    }

    pub fn region_len(&self) -> usize {
        self.len
    }

    fn cell(&self, src: u32, idx: u32) -> usize {
        (src as usize * self.tokens as usize + idx as usize) * self.hidden as usize
    }

    pub fn dispatch_recv(&self, src: u32, idx: u32) -> usize {
        self.cell(src, idx)
    }

    pub fn dispatch_area(&self) -> std::ops::Range<usize> {
        0..self.ep as usize * self.tokens as usize * self.hidden as usize
    }

    pub fn combine_recv(&self, idx: u32, slot: u32) -> usize {
        self.window + (idx as usize * self.combine_slots as usize + slot as usize) * self.hidden as usize
    }

    pub fn combine_area(&self) -> std::ops::Range<usize> {
        self.window..self.window + self.tokens as usize * self.combine_slots as usize * self.hidden as usize
    }

    pub fn send(&self, idx: u32) -> usize {
        self.send + idx as usize * self.hidden as usize
    }

    pub fn out(&self, src: u32, idx: u32) -> usize {
        self.out + self.cell(src, idx)
    }

    pub fn wout(&self, src: u32, idx: u32) -> usize {
        self.wout + self.cell(src, idx)
    }

    pub fn slot_bytes(&self) -> usize {
        CHUNK_HEADER_BYTES + self.chunk_tokens as usize * (RECORD_HEADER_BYTES + self.hidden as usize)
    }

    fn ring_index(&self, node: u32, channel: u32, seq: u64) -> usize {
        ((node * self.channels + channel) as usize * self.ring_slots as usize + (seq % self.ring_slots as u64) as usize)
            * self.slot_bytes()
    }

    /// Slot for chunk `seq` arriving from `src_node` on `channel`.
    pub fn ring(&self, src_node: u32, channel: u32, seq: u64) -> usize {
        self.ring + self.ring_index(src_node, channel, seq)
    }

    /// Staging slot for chunk `seq` bound for `dst_node` on `channel`.
    pub fn staging(&self, dst_node: u32, channel: u32, seq: u64) -> usize {
        self.staging + self.ring_index(dst_node, channel, seq)
    }

    pub fn ring_area(&self) -> std::ops::Range<usize> {
        self.ring..self.staging
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn areas_do_not_overlap() {
        let l = Layout::new(Mode::HighThroughput, 8, 2, 4, 16, 64, 4, 32, 16).unwrap();
        let last_dispatch = l.dispatch_recv(7, 15) + 64;
        assert!(last_dispatch <= l.window);
        assert!(l.combine_recv(15, l.combine_slots - 1) + 64 <= 2 * l.window);
        assert_eq!(l.combine_recv(0, 0) / l.window, 1);
        assert!(l.send(15) + 64 <= l.out(0, 0));
        assert!(l.out(7, 15) + 64 <= l.ring(0, 0, 0));
        assert_eq!(l.ring(1, 3, 31) + l.slot_bytes(), l.staging(0, 0, 0));
        assert_eq!(l.staging(1, 3, 15) + l.slot_bytes(), l.region_len());
        assert_eq!(l.ring(0, 1, 16), l.ring(0, 1, 0));
    }

    #[test]
    fn oversized_region_rejected() {
        assert!(Layout::new(Mode::LowLatency, 64, 8, 8, 4096, 7168, 8, 32, 16).is_err());
    }
}
