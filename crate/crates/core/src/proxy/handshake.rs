//! Connection-time exchange of region base addresses.
//!
//! Every proxy thread publishes one record for its data region and one for
//! its host counters. Records are 16 bytes, little-endian:
//!
//! ```text
//! rank u16 | thread u8 | kind u8 | len u32 | base u64
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const RECORD_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RecordKind {
    Region = 0,
    Counters = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HandshakeRecord {
    pub rank: u16,
    pub thread: u8,
    pub kind: RecordKind,
    pub len: u32,
    pub base: u64,
}

impl HandshakeRecord {
    pub fn to_bytes(&self) -> [u8; RECORD_BYTES] {
        let mut b = [0u8; RECORD_BYTES];
        b[0..2].copy_from_slice(&self.rank.to_le_bytes());
        b[2] = self.thread;
        b[3] = self.kind as u8;
        b[4..8].copy_from_slice(&self.len.to_le_bytes());
        b[8..16].copy_from_slice(&self.base.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8; RECORD_BYTES]) -> Result<Self> {
        let kind = match b[3] {
            0 => RecordKind::Region,
            1 => RecordKind::Counters,
            k => return Err(Error::Handshake(format!("unknown record kind {k}"))),
        };
        Ok(HandshakeRecord {
            rank: u16::from_le_bytes([b[0], b[1]]),
            thread: b[2],
            kind,
            len: u32::from_le_bytes(b[4..8].try_into().expect("4 bytes")),
            base: u64::from_le_bytes(b[8..16].try_into().expect("8 bytes")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RemoteRegion {
    pub region_base: u64,
    pub region_len: u64,
    pub counter_base: u64,
    pub counter_len: u64,
}

/// Remote base table learned at handshake, indexed by rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerTable {
    peers: Vec<RemoteRegion>,
}

impl PeerTable {
    /// Builds the table from every thread's records. All ranks must register
    /// regions of identical length, and the threads of one rank must agree.
    pub fn from_records(ranks: u32, records: &[HandshakeRecord]) -> Result<Self> {
        let mut seen: BTreeMap<(u16, RecordKind), (u32, u64)> = BTreeMap::new();
        for r in records {
            if r.rank as u32 >= ranks {
                return Err(Error::Handshake(format!("record from unknown rank {}", r.rank)));
            }
            match seen.insert((r.rank, r.kind), (r.len, r.base)) {
                Some(prev) if prev != (r.len, r.base) => {
                    return Err(Error::Handshake(format!(
                        "rank {} thread {} disagrees on its {:?} registration",
                        r.rank, r.thread, r.kind
                    )));
                }
                _ => {}
            }
        }
        let mut peers = Vec::with_capacity(ranks as usize);
        let mut region_len = None;
        for rank in 0..ranks as u16 {
            let get = |kind| {
                seen.get(&(rank, kind))
                    .copied()
                    .ok_or_else(|| Error::Handshake(format!("rank {rank} sent no {kind:?} record")))
            };
            let (len, base) = get(RecordKind::Region)?;
            let (clen, cbase) = get(RecordKind::Counters)?;
            match region_len {
                None => region_len = Some(len),
                Some(l) if l != len => {
                    return Err(Error::Handshake(format!(
                        "rank {rank} registered a {len}-byte region, rank 0 registered {l} bytes"
                    )));
                }
                _ => {}
            }
            peers.push(RemoteRegion {
                region_base: base,
                region_len: len as u64,
                counter_base: cbase,
                counter_len: clen as u64,
            });
        }
        Ok(PeerTable { peers })
    }

    pub fn get(&self, rank: u32) -> Result<&RemoteRegion> {
        self.peers.get(rank as usize).ok_or_else(|| Error::Connection(format!("no peer entry for rank {rank}")))
    }

    pub fn len(&self) -> usize {
        self.peers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(lens: &[u32]) -> Vec<HandshakeRecord> {
        lens.iter()
            .enumerate()
            .flat_map(|(r, &len)| {
                [RecordKind::Region, RecordKind::Counters].map(|kind| HandshakeRecord {
                    rank: r as u16,
                    thread: 0,
                    kind,
                    len,
                    base: (r as u64 + 1) << 32 | (kind as u64) << 20,
                })
            })
            .collect()
    }

    #[test]
    fn record_round_trip() {
        for r in records(&[4096, 4096]) {
            assert_eq!(HandshakeRecord::from_bytes(&r.to_bytes()).unwrap(), r);
        }
        let mut bad = records(&[1])[0].to_bytes();
        bad[3] = 9;
        assert!(HandshakeRecord::from_bytes(&bad).is_err());
    }

    #[test]
    fn table_maps_ranks_to_bases() {
        let t = PeerTable::from_records(2, &records(&[4096, 4096])).unwrap();
        assert_eq!(t.get(1).unwrap().region_base, 2 << 32);
        assert_eq!(t.get(1).unwrap().region_len, 4096);
        assert!(t.get(2).is_err());
    }

    #[test]
    fn inconsistent_lengths_fail_handshake() {
        let err = PeerTable::from_records(3, &records(&[4096, 4096, 2048])).unwrap_err();
        assert!(matches!(err, Error::Handshake(_)));
        let missing = PeerTable::from_records(3, &records(&[4096, 4096])).unwrap_err();
        assert!(matches!(missing, Error::Handshake(_)));
    }
}
