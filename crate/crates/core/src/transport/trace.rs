//! Event-trace records emitted by the fabric, one text line per record:
//!
//! ```text
//! t_ns=5000 event=deliver qp=3 work=17 imm=0x40000003 len=7168
//! ```
//!
//! `imm=-` marks operations without immediate data (hardware atomics).

use std::fmt;
use std::str::FromStr;

use super::{QpId, WorkId};
use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceEvent {
    Post,
    Deliver,
    Cqe,
}

impl TraceEvent {
    fn as_str(self) -> &'static str {
        match self {
            TraceEvent::Post => "post",
            TraceEvent::Deliver => "deliver",
            TraceEvent::Cqe => "cqe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TraceRecord {
    pub t_ns: u64,
    pub event: TraceEvent,
    pub qp: QpId,
    pub work: WorkId,
    pub imm: Option<u32>,
    pub length: u32,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t_ns={} event={} qp={} work={} imm=", self.t_ns, self.event.as_str(), self.qp.0, self.work.0)?;
        match self.imm {
            Some(imm) => write!(f, "{imm:#010x}")?,
            None => f.write_str("-")?,
        }
        write!(f, " len={}", self.length)
    }
}

impl FromStr for TraceRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self, Error> {
        let bad = || Error::Decode(format!("malformed trace line: {line:?}"));
        let mut fields = [None; 6];
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(bad)?;
            let slot = match k {
                "t_ns" => 0,
                "event" => 1,
                "qp" => 2,
                "work" => 3,
                "imm" => 4,
                "len" => 5,
                _ => return Err(bad()),
            };
            fields[slot] = Some(v);
        }
        let [Some(t), Some(ev), Some(qp), Some(work), Some(imm), Some(len)] = fields else {
            return Err(bad());
        };
        let event = match ev {
            "post" => TraceEvent::Post,
            "deliver" => TraceEvent::Deliver,
            "cqe" => TraceEvent::Cqe,
            _ => return Err(bad()),
        };
        let imm = match imm {
            "-" => None,
            hex => Some(u32::from_str_radix(hex.trim_start_matches("0x"), 16).map_err(|_| bad())?),
        };
        Ok(TraceRecord {
            t_ns: t.parse().map_err(|_| bad())?,
            event,
            qp: QpId(qp.parse().map_err(|_| bad())?),
            work: WorkId(work.parse().map_err(|_| bad())?),
            imm,
            length: len.parse().map_err(|_| bad())?,
        })
    }
}
