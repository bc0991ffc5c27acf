//! The 16-byte command descriptor handed from the producer (GPU side) to a
//! proxy thread.
//!
//! Wire layout, little-endian `u128`, fields packed from bit 0 upward:
//!
//! | bits     | field             |
//! |----------|-------------------|
//! | 0..2     | kind              |
//! | 2..14    | dst_rank          |
//! | 14..20   | channel_id        |
//! | 20..52   | src_offset        |
//! | 52..84   | dst_offset        |
//! | 84..116  | length_or_value   |
//! | 116..118 | flags             |
//! | 118..128 | reserved (zero)   |

use std::fmt;

use crate::error::{Error, Result};

pub const CMD_BYTES: usize = 16;
pub const MAX_RANKS: u32 = 1 << 12;
pub const MAX_CHANNELS: u32 = 1 << 6;

const KIND_SHIFT: u32 = 0;
const RANK_SHIFT: u32 = 2;
const CHANNEL_SHIFT: u32 = 14;
const SRC_SHIFT: u32 = 20;
const DST_SHIFT: u32 = 52;
const LEN_SHIFT: u32 = 84;
const FLAGS_SHIFT: u32 = 116;
const RESERVED_SHIFT: u32 = 118;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum CmdKind {
    Write = 0,
    Atomic = 1,
    Drain = 2,
    Barrier = 3,
}

impl CmdKind {
    pub const ALL: [CmdKind; 4] = [CmdKind::Write, CmdKind::Atomic, CmdKind::Drain, CmdKind::Barrier];

    fn from_bits(bits: u8) -> Self {
        match bits & 0b11 {
            0 => CmdKind::Write,
            1 => CmdKind::Atomic,
            2 => CmdKind::Drain,
            _ => CmdKind::Barrier,
        }
    }
}

/// Two-bit flag set carried in every command.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct CmdFlags(u8);

impl CmdFlags {
    pub const NONE: CmdFlags = CmdFlags(0);
    /// The write's immediate data also carries a +1 counter update.
    pub const PIGGYBACK_ATOMIC: CmdFlags = CmdFlags(0b01);
    pub const SAME_RAIL_BARRIER: CmdFlags = CmdFlags(0b10);

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits <= 0b11).then_some(CmdFlags(bits))
    }

    pub fn contains(self, other: CmdFlags) -> bool {
        self.0 & other.0 == other.0
    }
}

impl std::ops::BitOr for CmdFlags {
    type Output = CmdFlags;

    fn bitor(self, rhs: Self) -> Self {
        CmdFlags(self.0 | rhs.0)
    }
}

/// Scope of a `Barrier` command, stored in `length_or_value`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BarrierScope {
    AllPeers,
    SameRail,
}

impl BarrierScope {
    pub fn as_u32(self) -> u32 {
        match self {
            BarrierScope::AllPeers => 0,
            BarrierScope::SameRail => 1,
        }
    }

    pub fn from_u32(v: u32) -> Option<Self> {
        match v {
            0 => Some(BarrierScope::AllPeers),
            1 => Some(BarrierScope::SameRail),
            _ => None,
        }
    }
}

/// A validated transfer command.
///
/// Field meaning depends on [`CmdKind`]: `length_or_value` is the byte count
/// of a write, the operand of an atomic, the `upto` index of a drain
/// (`u32::MAX` = drain everything) and the scope of a barrier.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct TransferCmd {
    kind: CmdKind,
    dst_rank: u16,
    channel_id: u8,
    src_offset: u32,
    dst_offset: u32,
    length_or_value: u32,
    flags: CmdFlags,
}

/// `Drain` without an index bound.
pub const DRAIN_ALL: u32 = u32::MAX;

impl TransferCmd {
    pub fn new(
        kind: CmdKind,
        dst_rank: u32,
        channel_id: u32,
        src_offset: u32,
        dst_offset: u32,
        length_or_value: u32,
        flags: CmdFlags,
    ) -> Result<Self> {
        if dst_rank >= MAX_RANKS {
            return Err(Error::protocol(format!("dst_rank {dst_rank} does not fit 12 bits")));
        }
        if channel_id >= MAX_CHANNELS {
            return Err(Error::protocol(format!("channel_id {channel_id} does not fit 6 bits")));
        }
        Ok(TransferCmd {
            kind,
            dst_rank: dst_rank as u16,
            channel_id: channel_id as u8,
            src_offset,
            dst_offset,
            length_or_value,
            flags,
        })
    }

    pub fn write(dst_rank: u32, channel_id: u32, src_offset: u32, dst_offset: u32, length: u32) -> Result<Self> {
        Self::new(CmdKind::Write, dst_rank, channel_id, src_offset, dst_offset, length, CmdFlags::NONE)
    }

    pub fn atomic(dst_rank: u32, channel_id: u32, dst_offset: u32, value: u32) -> Result<Self> {
        Self::new(CmdKind::Atomic, dst_rank, channel_id, 0, dst_offset, value, CmdFlags::NONE)
    }

    pub fn drain(channel_id: u32, upto: Option<u32>) -> Result<Self> {
        Self::new(CmdKind::Drain, 0, channel_id, 0, 0, upto.unwrap_or(DRAIN_ALL), CmdFlags::NONE)
    }

    pub fn barrier(channel_id: u32, scope: BarrierScope) -> Result<Self> {
        let flags = match scope {
            BarrierScope::AllPeers => CmdFlags::NONE,
            BarrierScope::SameRail => CmdFlags::SAME_RAIL_BARRIER,
        };
        Self::new(CmdKind::Barrier, 0, channel_id, 0, 0, scope.as_u32(), flags)
    }

    pub fn with_flags(mut self, flags: CmdFlags) -> Self {
        self.flags = flags;
        self
    }

    pub fn kind(&self) -> CmdKind {
        self.kind
    }

    pub fn dst_rank(&self) -> u32 {
        self.dst_rank as u32
    }

    pub fn channel_id(&self) -> u32 {
        self.channel_id as u32
    }

    pub fn src_offset(&self) -> u32 {
        self.src_offset
    }

    pub fn dst_offset(&self) -> u32 {
        self.dst_offset
    }

    pub fn length_or_value(&self) -> u32 {
        self.length_or_value
    }

    pub fn flags(&self) -> CmdFlags {
        self.flags
    }

    pub fn to_u128(&self) -> u128 {
        ((self.kind as u128) << KIND_SHIFT)
            | ((self.dst_rank as u128) << RANK_SHIFT)
            | ((self.channel_id as u128) << CHANNEL_SHIFT)
            | ((self.src_offset as u128) << SRC_SHIFT)
            | ((self.dst_offset as u128) << DST_SHIFT)
            | ((self.length_or_value as u128) << LEN_SHIFT)
            | ((self.flags.bits() as u128) << FLAGS_SHIFT)
    }

    pub fn to_bytes(&self) -> [u8; CMD_BYTES] {
        self.to_u128().to_le_bytes()
    }

    pub fn from_u128(word: u128) -> Result<Self> {
        if word >> RESERVED_SHIFT != 0 {
            return Err(Error::Decode(format!("reserved bits set in command word {word:#034x}")));
        }
        let field = |shift: u32, width: u32| ((word >> shift) & ((1u128 << width) - 1)) as u32;
        Ok(TransferCmd {
            kind: CmdKind::from_bits(field(KIND_SHIFT, 2) as u8),
            dst_rank: field(RANK_SHIFT, 12) as u16,
            channel_id: field(CHANNEL_SHIFT, 6) as u8,
            src_offset: field(SRC_SHIFT, 32),
            dst_offset: field(DST_SHIFT, 32),
            length_or_value: field(LEN_SHIFT, 32),
            flags: CmdFlags(field(FLAGS_SHIFT, 2) as u8),
        })
    }

    pub fn from_bytes(bytes: &[u8; CMD_BYTES]) -> Result<Self> {
        Self::from_u128(u128::from_le_bytes(*bytes))
    }
}

impl Default for TransferCmd {
    fn default() -> Self {
        TransferCmd {
            kind: CmdKind::Write,
            dst_rank: 0,
            channel_id: 0,
            src_offset: 0,
            dst_offset: 0,
            length_or_value: 0,
            flags: CmdFlags::NONE,
        }
    }
}

impl fmt::Debug for TransferCmd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransferCmd")
            .field("kind", &self.kind)
            .field("dst_rank", &self.dst_rank)
            .field("channel", &self.channel_id)
            .field("src_off", &format_args!("{:#x}", self.src_offset))
            .field("dst_off", &format_args!("{:#x}", self.dst_offset))
            .field("len_or_val", &self.length_or_value)
            .field("flags", &self.flags.bits())
            .finish()
    }
}
