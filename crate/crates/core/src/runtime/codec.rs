//! Length-prefixed binary encoding of protocol messages.
//!
//! Every message is a 24-byte header followed by the payload, all little-endian:
//!
//! | bytes | field                         |
//! |-------|-------------------------------|
//! | 0..4  | magic `DPCM`                  |
//! | 4..8  | version (u32)                 |
//! | 8..12 | kind (u32)                    |
//! | 12..16| machine index (u32)           |
//! | 16..24| payload length in bytes (u64) |
//!
//! Payloads:
//! - `RequestTopK`: rank u32
//! - `Frames`: d u32, rank u32, n u64, `d * rank` f64 column-major, `rank` f64 eigenvalues
//! - `BroadcastFrame`: d u32, k u32, `d * k` f64 column-major
//! - `RayleighValues`: count u32, `count` f64
//! - `Error`: code u32, UTF-8 text

use std::io::Read;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::estimator::SubspaceEstimate;
use crate::linalg::{Frame, Spectrum};

pub const MAGIC: &[u8; 4] = b"DPCM";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

/// Upper bound on a payload the decoder will accept (1 GiB).
const MAX_PAYLOAD: u64 = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum ErrorCode {
    InvalidK = 1,
    Malformed = 2,
    DimensionMismatch = 3,
    Internal = 4,
}

impl ErrorCode {
    fn from_u32(v: u32) -> Option<Self> {
        Some(match v {
            1 => ErrorCode::InvalidK,
            2 => ErrorCode::Malformed,
            3 => ErrorCode::DimensionMismatch,
            4 => ErrorCode::Internal,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorCode::InvalidK => "invalid-K",
            ErrorCode::Malformed => "malformed",
            ErrorCode::DimensionMismatch => "dimension-mismatch",
            ErrorCode::Internal => "internal",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    RequestTopK { rank: usize },
    Frames(SubspaceEstimate),
    BroadcastFrame(Frame),
    RayleighValues(Vec<f64>),
    Error { code: ErrorCode, text: String },
}

impl Message {
    fn kind(&self) -> u32 {
        match self {
            Message::RequestTopK { .. } => 1,
            Message::Frames(_) => 2,
            Message::BroadcastFrame(_) => 3,
            Message::RayleighValues(_) => 4,
            Message::Error { .. } => 5,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Message::RequestTopK { .. } => "RequestTopK",
            Message::Frames(_) => "Frames",
            Message::BroadcastFrame(_) => "BroadcastFrame",
            Message::RayleighValues(_) => "RayleighValues",
            Message::Error { .. } => "Error",
        }
    }
}

/// A message addressed to or sent from one machine.
#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub machine: usize,
    pub message: Message,
}

impl Envelope {
    pub fn new(machine: usize, message: Message) -> Self {
        Envelope { machine, message }
    }
}

pub fn request_len() -> usize {
    HEADER_LEN + 4
}

pub fn frames_len(rank: usize, d: usize) -> usize {
    HEADER_LEN + 16 + 8 * rank * d + 8 * rank
}

pub fn broadcast_len(k: usize, d: usize) -> usize {
    HEADER_LEN + 8 + 8 * k * d
}

pub fn rayleigh_len(k: usize) -> usize {
    HEADER_LEN + 4 + 8 * k
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} = {v} does not fit in u32")))
}

fn put_matrix(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    // nalgebra storage is column-major.
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(env: &Envelope) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    match &env.message {
        Message::RequestTopK { rank } => {
            payload.extend_from_slice(&u32_field(*rank, "rank")?.to_le_bytes());
        }
        Message::Frames(est) => {
            payload.extend_from_slice(&u32_field(est.dim(), "d")?.to_le_bytes());
            payload.extend_from_slice(&u32_field(est.rank(), "rank")?.to_le_bytes());
            payload.extend_from_slice(&(est.n as u64).to_le_bytes());
            put_matrix(&mut payload, est.frame.as_matrix());
            for v in est.eigenvalues.values() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        Message::BroadcastFrame(frame) => {
            payload.extend_from_slice(&u32_field(frame.dim(), "d")?.to_le_bytes());
            payload.extend_from_slice(&u32_field(frame.rank(), "k")?.to_le_bytes());
            put_matrix(&mut payload, frame.as_matrix());
        }
        Message::RayleighValues(values) => {
            if values.is_empty() {
                return Err(Error::invalid("RayleighValues must carry at least one value"));
            }
            payload.extend_from_slice(&u32_field(values.len(), "count")?.to_le_bytes());
            for v in values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        Message::Error { code, text } => {
            payload.extend_from_slice(&(*code as u32).to_le_bytes());
            payload.extend_from_slice(text.as_bytes());
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&env.message.kind().to_le_bytes());
    out.extend_from_slice(&u32_field(env.machine, "machine")?.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Decode {
            offset: self.pos,
            reason: reason.into(),
        })
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if left < len {
            return self.fail(format!("truncated: need {len} bytes, {left} left"));
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let bytes = self.take(count.checked_mul(8).ok_or_else(|| Error::Decode {
            offset: self.pos,
            reason: "length overflow".into(),
        })?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn matrix(&mut self, d: usize, k: usize) -> Result<DMatrix<f64>> {
        let values = self.f64s(d.saturating_mul(k))?;
        Ok(DMatrix::from_vec(d, k, values))
    }
}

/// Parses the header; returns `(kind, machine, payload_len)`.
pub fn decode_header(buf: &[u8]) -> Result<(u32, usize, u64)> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Decode {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Decode {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let kind = c.u32()?;
    if !(1..=5).contains(&kind) {
        return Err(Error::Decode {
            offset: 8,
            reason: format!("unknown message kind {kind}"),
        });
    }
    let machine = c.u32()? as usize;
    let len = c.u64()?;
    if len > MAX_PAYLOAD {
        return Err(Error::Decode {
            offset: 16,
            reason: format!("payload length {len} exceeds limit"),
        });
    }
    Ok((kind, machine, len))
}

pub fn decode(buf: &[u8]) -> Result<Envelope> {
    let (kind, machine, len) = decode_header(buf)?;
    let mut c = Cursor { buf, pos: HEADER_LEN };
    if (buf.len() - HEADER_LEN) as u64 != len {
        return c.fail(format!(
            "payload is {} bytes, header says {len}",
            buf.len() - HEADER_LEN
        ));
    }
    let message = match kind {
        1 => Message::RequestTopK { rank: c.u32()? as usize },
        2 => {
            let d = c.u32()? as usize;
            let rank = c.u32()? as usize;
            let n = c.u64()? as usize;
            let at = c.pos;
            let frame = c.matrix(d, rank)?;
            let values = c.f64s(rank)?;
            let frame = Frame::new(frame).map_err(|e| decode_err(at, e))?;
            let values = Spectrum::new(values).map_err(|e| decode_err(at, e))?;
            Message::Frames(SubspaceEstimate::new(machine, frame, values, n).map_err(|e| decode_err(at, e))?)
        }
        3 => {
            let d = c.u32()? as usize;
            let k = c.u32()? as usize;
            let at = c.pos;
            let frame = c.matrix(d, k)?;
            Message::BroadcastFrame(Frame::new(frame).map_err(|e| decode_err(at, e))?)
        }
        4 => {
            let count = c.u32()? as usize;
            if count == 0 {
                return c.fail("RayleighValues with zero values");
            }
            Message::RayleighValues(c.f64s(count)?)
        }
        5 => {
            let code_at = c.pos;
            let raw = c.u32()?;
            let code = ErrorCode::from_u32(raw).ok_or_else(|| Error::Decode {
                offset: code_at,
                reason: format!("unknown error code {raw}"),
            })?;
            let text_at = c.pos;
            let text = String::from_utf8(c.take(buf.len() - c.pos)?.to_vec()).map_err(|_| Error::Decode {
                offset: text_at,
                reason: "error text is not UTF-8".into(),
            })?;
            Message::Error { code, text }
        }
        _ => unreachable!("kind validated in header"),
    };
    if c.pos != buf.len() {
        return c.fail(format!("{} trailing bytes", buf.len() - c.pos));
    }
    Ok(Envelope { machine, message })
}

fn decode_err(offset: usize, e: Error) -> Error {
    Error::Decode {
        offset,
        reason: e.to_string(),
    }
}

/// Reads one whole encoded message from a stream. Returns `Ok(None)` on a
/// clean end of stream before the first header byte.
pub fn read_message(r: &mut impl Read) -> std::io::Result<Option<Vec<u8>>> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            Ok(k) => filled += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u64::from_le_bytes(header[16..24].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "payload too large"));
    }
    let mut buf = header.to_vec();
    buf.resize(HEADER_LEN + len as usize, 0);
    r.read_exact(&mut buf[HEADER_LEN..])?;
    Ok(Some(buf))
}
