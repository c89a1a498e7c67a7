//! Wire framing.
//!
//! ```text
//! +------+------+------+--------+---------+
//! | 0xDE | 0xA7 | type | len BE | payload |
//! +------+------+------+--------+---------+
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::crseq::{CellReplyTable, CrseqError};
use crate::endpoints::{AbortReason, Verdict};

pub const MAGIC: [u8; 2] = [0xDE, 0xA7];
pub const HEADER_LEN: usize = 5;
pub const MAX_PAYLOAD: usize = u16::MAX as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    EnrollCrt = 0x01,
    Challenge = 0x02,
    Reply = 0x03,
    Verdict = 0x04,
    Abort = 0x05,
}

impl MsgType {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0x01 => Self::EnrollCrt,
            0x02 => Self::Challenge,
            0x03 => Self::Reply,
            0x04 => Self::Verdict,
            0x05 => Self::Abort,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::EnrollCrt => "ENROLL_CRT",
            Self::Challenge => "CHALLENGE",
            Self::Reply => "REPLY",
            Self::Verdict => "VERDICT",
            Self::Abort => "ABORT",
        }
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("header declares {declared} payload bytes, {actual} present")]
    Length { declared: usize, actual: usize },
    #[error("{msg_type:?} payload must be {expected}, got {got} bytes")]
    PayloadSize {
        msg_type: MsgType,
        expected: &'static str,
        got: usize,
    },
    #[error("payload of {0} bytes does not fit the length field")]
    TooLong(usize),
    #[error("unknown abort reason {0}")]
    AbortReason(u8),
    #[error("invalid verdict byte {0}")]
    VerdictByte(u8),
    #[error("enrollment table: {0}")]
    Table(#[from] CrseqError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, payload: Vec<u8>) -> Result<Self, FrameError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(FrameError::TooLong(payload.len()));
        }
        let frame = Self { msg_type, payload };
        frame.check_payload()?;
        Ok(frame)
    }

    fn check_payload(&self) -> Result<(), FrameError> {
        let n = self.payload.len();
        let expected = match self.msg_type {
            MsgType::Challenge | MsgType::Reply if n != 8 => "8 bytes",
            MsgType::Verdict if n < 5 => "at least 5 bytes",
            MsgType::Abort if n != 5 => "5 bytes",
            MsgType::EnrollCrt if !n.is_multiple_of(2) => "an even length",
            _ => return Ok(()),
        };
        Err(FrameError::PayloadSize {
            msg_type: self.msg_type,
            expected,
            got: n,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&(self.payload.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decode exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() < HEADER_LEN {
            return Err(FrameError::Length {
                declared: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let (len, msg_type) = parse_header(bytes[..HEADER_LEN].try_into().expect("header slice"))?;
        let actual = bytes.len() - HEADER_LEN;
        if actual != len {
            return Err(FrameError::Length { declared: len, actual });
        }
        Self::new(msg_type, bytes[HEADER_LEN..].to_vec())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, FrameError> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)?;
        let (len, msg_type) = parse_header(header)?;
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload)?;
        Self::new(msg_type, payload)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.encode())?;
        w.flush()
    }

    pub fn enroll_request() -> Self {
        Self {
            msg_type: MsgType::EnrollCrt,
            payload: Vec::new(),
        }
    }

    pub fn enroll_table(crt: &CellReplyTable) -> Self {
        Self {
            msg_type: MsgType::EnrollCrt,
            payload: crt.entries().iter().flat_map(|&(c, r)| [c, r]).collect(),
        }
    }

    pub fn challenge(word: u64) -> Self {
        Self {
            msg_type: MsgType::Challenge,
            payload: word.to_be_bytes().to_vec(),
        }
    }

    pub fn reply(word: u64) -> Self {
        Self {
            msg_type: MsgType::Reply,
            payload: word.to_be_bytes().to_vec(),
        }
    }

    /// Round as u32 BE, 1 for accept or 0 for reject, then the command bytes.
    pub fn verdict(v: &Verdict) -> Self {
        let mut payload = (v.round() as u32).to_be_bytes().to_vec();
        match v {
            Verdict::Accept { command, .. } => {
                payload.push(1);
                payload.extend_from_slice(command);
            }
            Verdict::Reject { .. } => payload.push(0),
        }
        Self {
            msg_type: MsgType::Verdict,
            payload,
        }
    }

    pub fn abort(reason: AbortReason, round: u64) -> Self {
        let mut payload = vec![reason as u8];
        payload.extend_from_slice(&(round as u32).to_be_bytes());
        Self {
            msg_type: MsgType::Abort,
            payload,
        }
    }

    pub fn word(&self) -> Option<u64> {
        match self.msg_type {
            MsgType::Challenge | MsgType::Reply => Some(u64::from_be_bytes(self.payload[..8].try_into().ok()?)),
            _ => None,
        }
    }
}

fn parse_header(h: [u8; HEADER_LEN]) -> Result<(usize, MsgType), FrameError> {
    if h[..2] != MAGIC {
        return Err(FrameError::BadMagic([h[0], h[1]]));
    }
    let msg_type = MsgType::from_code(h[2]).ok_or(FrameError::UnknownType(h[2]))?;
    Ok((u16::from_be_bytes([h[3], h[4]]) as usize, msg_type))
}

/// A frame's payload interpreted by type.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    EnrollRequest,
    EnrollTable(CellReplyTable),
    Challenge(u64),
    Reply(u64),
    Verdict(Verdict),
    Abort { reason: AbortReason, round: u64 },
}

impl TryFrom<&Frame> for Message {
    type Error = FrameError;

    fn try_from(f: &Frame) -> Result<Self, FrameError> {
        f.check_payload()?;
        let p = &f.payload;
        Ok(match f.msg_type {
            MsgType::EnrollCrt if p.is_empty() => Message::EnrollRequest,
            MsgType::EnrollCrt => {
                let entries = p.chunks_exact(2).map(|c| (c[0], c[1])).collect();
                Message::EnrollTable(CellReplyTable::from_entries(entries, 0)?)
            }
            MsgType::Challenge => Message::Challenge(f.word().expect("checked length")),
            MsgType::Reply => Message::Reply(f.word().expect("checked length")),
            MsgType::Verdict => {
                let round = u32::from_be_bytes([p[0], p[1], p[2], p[3]]) as u64;
                match p[4] {
                    1 => Message::Verdict(Verdict::Accept {
                        round,
                        command: p[5..].to_vec(),
                    }),
                    0 if p.len() == 5 => Message::Verdict(Verdict::Reject { round }),
                    b => return Err(FrameError::VerdictByte(b)),
                }
            }
            MsgType::Abort => Message::Abort {
                reason: AbortReason::from_code(p[0]).ok_or(FrameError::AbortReason(p[0]))?,
                round: u32::from_be_bytes([p[1], p[2], p[3], p[4]]) as u64,
            },
        })
    }
}

impl From<&Message> for Frame {
    fn from(m: &Message) -> Self {
        match m {
            Message::EnrollRequest => Frame::enroll_request(),
            Message::EnrollTable(crt) => Frame::enroll_table(crt),
            Message::Challenge(w) => Frame::challenge(*w),
            Message::Reply(w) => Frame::reply(*w),
            Message::Verdict(v) => Frame::verdict(v),
            Message::Abort { reason, round } => Frame::abort(*reason, *round),
        }
    }
}
