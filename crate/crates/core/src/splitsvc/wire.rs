//! Frame codec.
//!
//! Frame: `b"EPWP"`, message type (u8), payload length (u32 LE), payload.
//!
//! Payloads (all integers little-endian):
//! - HELLO, client to server: protocol version u16, float width u8 (4 or 8).
//!   Server reply: version u16, width u8, split layer u16, hidden width u32.
//! - HIDDEN: layer u16, n u32, d u32, then n·d floats row-major.
//! - RESULT: text length u32, UTF-8 text, token count u32, token ids u32
//!   each, FNV-1a u64 of the final hidden states' f64 bit patterns.
//! - ERROR: code u16, UTF-8 message.

use std::io::{self, Read, Write};

use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"EPWP";
pub const PROTOCOL_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 9;
pub const DEFAULT_MAX_PAYLOAD: u32 = 64 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    Hidden = 2,
    Result = 3,
    Error = 4,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Self::Hello),
            2 => Some(Self::Hidden),
            3 => Some(Self::Result),
            4 => Some(Self::Error),
            _ => None,
        }
    }
}

/// Error codes carried by ERROR frames.
pub mod codes {
    pub const BAD_MAGIC: u16 = 1;
    pub const OVERSIZED: u16 = 2;
    pub const TRUNCATED: u16 = 3;
    pub const MALFORMED: u16 = 4;
    pub const WRONG_LAYER: u16 = 5;
    pub const BAD_DIMENSION: u16 = 6;
    pub const UNEXPECTED_TYPE: u16 = 7;
    pub const UNSUPPORTED: u16 = 8;
    pub const INTERNAL: u16 = 9;
}

/// Float encoding of HIDDEN payloads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FloatWidth {
    #[default]
    F32,
    /// Exact transport, for checking the split path bit-for-bit.
    F64,
}

impl FloatWidth {
    pub fn bytes(self) -> usize {
        match self {
            FloatWidth::F32 => 4,
            FloatWidth::F64 => 8,
        }
    }

    pub fn from_bytes(b: u8) -> Option<Self> {
        match b {
            4 => Some(FloatWidth::F32),
            8 => Some(FloatWidth::F64),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(t: MsgType, payload: Vec<u8>) -> Self {
        Self { msg_type: t as u8, payload }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(self.msg_type);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }
}

#[derive(Debug)]
pub enum ReadError {
    /// Stream ended before a complete header or payload.
    Eof,
    BadMagic([u8; 4]),
    Oversized(u32),
    Io(io::Error),
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    w.write_all(&frame.to_bytes())?;
    w.flush()
}

/// Reads one frame. `Ok(None)` means the peer closed cleanly between frames.
pub fn read_frame(r: &mut impl Read, max_payload: u32) -> Result<Option<Frame>, ReadError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ReadError::Eof),
            Ok(k) => got += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(ReadError::Io(e)),
        }
    }
    let magic: [u8; 4] = header[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(ReadError::BadMagic(magic));
    }
    let len = u32::from_le_bytes(header[5..9].try_into().unwrap());
    if len > max_payload {
        return Err(ReadError::Oversized(len));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ReadError::Eof,
        _ => ReadError::Io(e),
    })?;
    Ok(Some(Frame { msg_type: header[4], payload }))
}

/// A protocol violation found while parsing a payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtoError {
    pub code: u16,
    pub message: String,
}

impl ProtoError {
    pub fn new(code: u16, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ProtoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            ProtoError::new(codes::TRUNCATED, format!("payload ends inside {what}"))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, ProtoError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, ProtoError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ProtoError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<(), ProtoError> {
        if self.pos != self.buf.len() {
            return Err(ProtoError::new(codes::MALFORMED, format!("{} trailing payload bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_hello(width: FloatWidth) -> Vec<u8> {
    let mut p = PROTOCOL_VERSION.to_le_bytes().to_vec();
    p.push(width.bytes() as u8);
    p
}

pub fn decode_hello(payload: &[u8]) -> Result<(u16, u8), ProtoError> {
    let mut c = Cursor::new(payload);
    let v = c.u16("version")?;
    let w = c.take(1, "float width")?[0];
    c.finish()?;
    Ok((v, w))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HelloReply {
    pub version: u16,
    pub width: FloatWidth,
    pub split_layer: u16,
    pub d: u32,
}

pub fn encode_hello_reply(r: &HelloReply) -> Vec<u8> {
    let mut p = r.version.to_le_bytes().to_vec();
    p.push(r.width.bytes() as u8);
    p.extend_from_slice(&r.split_layer.to_le_bytes());
    p.extend_from_slice(&r.d.to_le_bytes());
    p
}

pub fn decode_hello_reply(payload: &[u8]) -> Result<HelloReply, ProtoError> {
    let mut c = Cursor::new(payload);
    let version = c.u16("version")?;
    let width = FloatWidth::from_bytes(c.take(1, "float width")?[0])
        .ok_or_else(|| ProtoError::new(codes::MALFORMED, "bad float width"))?;
    let split_layer = c.u16("split layer")?;
    let d = c.u32("width")?;
    c.finish()?;
    Ok(HelloReply { version, width, split_layer, d })
}

pub fn encode_hidden(layer: u16, h: &Matrix, width: FloatWidth) -> Vec<u8> {
    let mut p = Vec::with_capacity(10 + h.data().len() * width.bytes());
    p.extend_from_slice(&layer.to_le_bytes());
    p.extend_from_slice(&(h.rows() as u32).to_le_bytes());
    p.extend_from_slice(&(h.cols() as u32).to_le_bytes());
    for &v in h.data() {
        match width {
            FloatWidth::F32 => p.extend_from_slice(&(v as f32).to_le_bytes()),
            FloatWidth::F64 => p.extend_from_slice(&v.to_le_bytes()),
        }
    }
    p
}

/// Header fields of a HIDDEN payload, validated before the body is parsed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HiddenHeader {
    pub layer: u16,
    pub n: u32,
    pub d: u32,
}

pub fn decode_hidden_header(payload: &[u8]) -> Result<HiddenHeader, ProtoError> {
    let mut c = Cursor::new(payload);
    Ok(HiddenHeader { layer: c.u16("layer")?, n: c.u32("row count")?, d: c.u32("width")? })
}

pub fn decode_hidden_body(payload: &[u8], head: HiddenHeader, width: FloatWidth) -> Result<Matrix, ProtoError> {
    let count = (head.n as usize)
        .checked_mul(head.d as usize)
        .ok_or_else(|| ProtoError::new(codes::MALFORMED, "n·d overflows"))?;
    let need = count.checked_mul(width.bytes()).and_then(|b| b.checked_add(10));
    let Some(need) = need else { return Err(ProtoError::new(codes::MALFORMED, "n·d overflows")) };
    if payload.len() < need {
        return Err(ProtoError::new(
            codes::TRUNCATED,
            format!("HIDDEN body holds {} bytes, header implies {}", payload.len() - 10, need - 10),
        ));
    }
    if payload.len() > need {
        return Err(ProtoError::new(codes::MALFORMED, format!("{} trailing payload bytes", payload.len() - need)));
    }
    let body = &payload[10..];
    let data: Vec<f64> = match width {
        FloatWidth::F32 => body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        FloatWidth::F64 => body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(ProtoError::new(codes::MALFORMED, "non-finite hidden value"));
    }
    Matrix::from_vec(head.n as usize, head.d as usize, data).map_err(|e| ProtoError::new(codes::MALFORMED, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResultPayload {
    pub text: String,
    pub ids: Vec<u32>,
    pub hidden_hash: u64,
}

pub fn encode_result(r: &ResultPayload) -> Vec<u8> {
    let mut p = Vec::new();
    p.extend_from_slice(&(r.text.len() as u32).to_le_bytes());
    p.extend_from_slice(r.text.as_bytes());
    p.extend_from_slice(&(r.ids.len() as u32).to_le_bytes());
    for id in &r.ids {
        p.extend_from_slice(&id.to_le_bytes());
    }
    p.extend_from_slice(&r.hidden_hash.to_le_bytes());
    p
}

pub fn decode_result(payload: &[u8]) -> Result<ResultPayload, ProtoError> {
    let mut c = Cursor::new(payload);
    let len = c.u32("text length")? as usize;
    let text = std::str::from_utf8(c.take(len, "text")?)
        .map_err(|_| ProtoError::new(codes::MALFORMED, "text is not UTF-8"))?
        .to_string();
    let n = c.u32("token count")? as usize;
    let raw = c.take(n.checked_mul(4).unwrap_or(usize::MAX), "token ids")?;
    let ids = raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
    let hidden_hash = c.u64("hash")?;
    c.finish()?;
    Ok(ResultPayload { text, ids, hidden_hash })
}

pub fn encode_error(e: &ProtoError) -> Vec<u8> {
    let mut p = e.code.to_le_bytes().to_vec();
    p.extend_from_slice(e.message.as_bytes());
    p
}

pub fn decode_error(payload: &[u8]) -> Result<ProtoError, ProtoError> {
    let mut c = Cursor::new(payload);
    let code = c.u16("error code")?;
    let message = String::from_utf8_lossy(&payload[2..]).into_owned();
    Ok(ProtoError { code, message })
}
