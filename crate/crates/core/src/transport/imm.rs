//! 32-bit immediate-data word carried by every simulated write.
//!
//! The top two bits hold the kind. The remaining 30 bits are interpreted
//! per mode:
//!
//! ```text
//! LL  DATA/ATOMIC : kind(2) | expert(10) | operand(20)
//! HT  DATA/ATOMIC : kind(2) | channel(6) | seq(16) | operand(8)
//! BARRIER_REQ/ACK : kind(2) | scope(1)   | epoch(29)
//! ```
//!
//! DATA words carry a zero operand.

use crate::command::BarrierScope;
use crate::error::{Error, Result};

pub const LL_EXPERT_BITS: u32 = 10;
pub const LL_OPERAND_BITS: u32 = 20;
pub const HT_CHANNEL_BITS: u32 = 6;
pub const HT_SEQ_BITS: u32 = 16;
pub const HT_OPERAND_BITS: u32 = 8;
pub const EPOCH_BITS: u32 = 29;

pub const LL_MAX_EXPERTS: u32 = 1 << LL_EXPERT_BITS;
pub const LL_MAX_OPERAND: u32 = (1 << LL_OPERAND_BITS) - 1;
pub const HT_MAX_OPERAND: u32 = (1 << HT_OPERAND_BITS) - 1;
pub const EPOCH_MASK: u32 = (1 << EPOCH_BITS) - 1;

/// Half of the 16-bit sequence space; a sequence is "ahead" of the cursor if
/// it is less than this far in front of it.
pub const SEQ_WINDOW: u32 = 1 << 15;

const KIND_SHIFT: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ImmKind {
    Data = 0,
    Atomic = 1,
    BarrierReq = 2,
    BarrierAck = 3,
}

/// Which field layout DATA/ATOMIC words use; fixed per proxy mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ImmLayout {
    LowLatency,
    HighThroughput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ImmWord {
    Ll { kind: ImmKind, expert: u16, operand: u32 },
    Ht { kind: ImmKind, channel: u8, seq: u16, operand: u8 },
    Barrier { kind: ImmKind, scope: BarrierScope, epoch: u32 },
}

impl ImmWord {
    pub fn ll_data(expert: u32) -> Result<Self> {
        Self::ll(ImmKind::Data, expert, 0)
    }

    pub fn ll_atomic(expert: u32, operand: u32) -> Result<Self> {
        Self::ll(ImmKind::Atomic, expert, operand)
    }

    fn ll(kind: ImmKind, expert: u32, operand: u32) -> Result<Self> {
        if expert >= LL_MAX_EXPERTS {
            return Err(Error::protocol(format!("expert index {expert} does not fit {LL_EXPERT_BITS} bits")));
        }
        if operand > LL_MAX_OPERAND {
            return Err(Error::protocol(format!("LL operand {operand} does not fit {LL_OPERAND_BITS} bits")));
        }
        Ok(ImmWord::Ll { kind, expert: expert as u16, operand })
    }

    pub fn ht_data(channel: u32, seq: u16) -> Result<Self> {
        Self::ht(ImmKind::Data, channel, seq, 0)
    }

    pub fn ht_atomic(channel: u32, seq: u16, operand: u32) -> Result<Self> {
        Self::ht(ImmKind::Atomic, channel, seq, operand)
    }

    fn ht(kind: ImmKind, channel: u32, seq: u16, operand: u32) -> Result<Self> {
        if channel >= 1 << HT_CHANNEL_BITS {
            return Err(Error::protocol(format!("channel {channel} does not fit {HT_CHANNEL_BITS} bits")));
        }
        if operand > HT_MAX_OPERAND {
            return Err(Error::protocol(format!("HT operand {operand} does not fit {HT_OPERAND_BITS} bits")));
        }
        Ok(ImmWord::Ht { kind, channel: channel as u8, seq, operand: operand as u8 })
    }

    pub fn barrier_req(scope: BarrierScope, epoch: u32) -> Self {
        ImmWord::Barrier { kind: ImmKind::BarrierReq, scope, epoch: epoch & EPOCH_MASK }
    }

    pub fn barrier_ack(scope: BarrierScope, epoch: u32) -> Self {
        ImmWord::Barrier { kind: ImmKind::BarrierAck, scope, epoch: epoch & EPOCH_MASK }
    }

    pub fn kind(&self) -> ImmKind {
        match *self {
            ImmWord::Ll { kind, .. } | ImmWord::Ht { kind, .. } | ImmWord::Barrier { kind, .. } => kind,
        }
    }

    pub fn encode(&self) -> u32 {
        let kind = (self.kind() as u32) << KIND_SHIFT;
        match *self {
            ImmWord::Ll { expert, operand, .. } => kind | ((expert as u32) << LL_OPERAND_BITS) | operand,
            ImmWord::Ht { channel, seq, operand, .. } => {
                kind | ((channel as u32) << (HT_SEQ_BITS + HT_OPERAND_BITS))
                    | ((seq as u32) << HT_OPERAND_BITS)
                    | operand as u32
            }
            ImmWord::Barrier { scope, epoch, .. } => kind | (scope.as_u32() << EPOCH_BITS) | (epoch & EPOCH_MASK),
        }
    }

    pub fn decode(raw: u32, layout: ImmLayout) -> Result<Self> {
        let kind = match raw >> KIND_SHIFT {
            0 => ImmKind::Data,
            1 => ImmKind::Atomic,
            2 => ImmKind::BarrierReq,
            _ => ImmKind::BarrierAck,
        };
        let word = match kind {
            ImmKind::BarrierReq | ImmKind::BarrierAck => {
                let scope = BarrierScope::from_u32((raw >> EPOCH_BITS) & 1).expect("one bit");
                ImmWord::Barrier { kind, scope, epoch: raw & EPOCH_MASK }
            }
            ImmKind::Data | ImmKind::Atomic => match layout {
                ImmLayout::LowLatency => ImmWord::Ll {
                    kind,
                    expert: ((raw >> LL_OPERAND_BITS) & (LL_MAX_EXPERTS - 1)) as u16,
                    operand: raw & LL_MAX_OPERAND,
                },
                ImmLayout::HighThroughput => ImmWord::Ht {
                    kind,
                    channel: ((raw >> (HT_SEQ_BITS + HT_OPERAND_BITS)) & 0x3f) as u8,
                    seq: (raw >> HT_OPERAND_BITS) as u16,
                    operand: (raw & HT_MAX_OPERAND) as u8,
                },
            },
        };
        let nonzero_data_operand = match word {
            ImmWord::Ll { kind: ImmKind::Data, operand, .. } => operand != 0,
            ImmWord::Ht { kind: ImmKind::Data, operand, .. } => operand != 0,
            _ => false,
        };
        if nonzero_data_operand {
            return Err(Error::Decode(format!("DATA immediate {raw:#010x} carries a non-zero operand")));
        }
        Ok(word)
    }
}

/// Signed distance `a - b` in 16-bit sequence space.
pub fn seq_distance(a: u16, b: u16) -> i32 {
    a.wrapping_sub(b) as i16 as i32
}

/// Maps a wrapped 16-bit sequence to the absolute sequence closest to `cursor`.
pub fn unwrap_seq(cursor: u64, seq: u16) -> Option<u64> {
    let d = seq_distance(seq, cursor as u16) as i64;
    let abs = cursor as i64 + d;
    (abs >= 0).then_some(abs as u64)
}
