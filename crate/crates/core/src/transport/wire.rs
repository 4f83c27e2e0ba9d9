//! Binary frame codec.
//!
//! ```text
//! length  u32   bytes after this field
//! kind    u8    1 ENQUEUE, 2 DEQ_REQ, 3 DEQ_RESP, 4 CREDIT, 5 SHUTDOWN, 6 ERROR, 7 HELLO
//! gate_id u32
//! depth   u8    0..=2, then depth × (id u64, arity u64)
//! seq     u64
//! count   u32   then count × (name_len u16, name, value_len u32, value)
//! ```
//!
//! All integers are little-endian.

use std::fmt;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::model::MetadataFrame;

pub const PROTOCOL_VERSION: u16 = 1;

/// Largest accepted value of the length field.
pub const MAX_FRAME_LEN: u32 = 256 << 20;

const HEADER_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    Enqueue = 1,
    DeqReq = 2,
    DeqResp = 3,
    Credit = 4,
    Shutdown = 5,
    Error = 6,
    Hello = 7,
}

impl FrameKind {
    pub const ALL: [FrameKind; 7] = [
        FrameKind::Enqueue,
        FrameKind::DeqReq,
        FrameKind::DeqResp,
        FrameKind::Credit,
        FrameKind::Shutdown,
        FrameKind::Error,
        FrameKind::Hello,
    ];

    fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| *k as u8 == b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("protocol error at byte {offset}: {reason}")]
pub struct ProtocolError {
    pub offset: usize,
    pub reason: String,
}

impl ProtocolError {
    fn new(offset: usize, reason: impl Into<String>) -> Self {
        Self {
            offset,
            reason: reason.into(),
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct WireFrame {
    pub kind: FrameKind,
    pub gate_id: u32,
    pub frames: Vec<MetadataFrame>,
    pub feed_seq: u64,
    pub payload: Vec<(String, Vec<u8>)>,
}

impl fmt::Debug for WireFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.payload.iter().map(|(n, v)| (n, v.len())).collect();
        f.debug_struct("WireFrame")
            .field("kind", &self.kind)
            .field("gate_id", &self.gate_id)
            .field("frames", &self.frames)
            .field("feed_seq", &self.feed_seq)
            .field("payload", &names)
            .finish()
    }
}

impl WireFrame {
    /// Frame with no metadata and no payload.
    pub fn control(kind: FrameKind, gate_id: u32) -> Self {
        Self {
            kind,
            gate_id,
            frames: Vec::new(),
            feed_seq: 0,
            payload: Vec::new(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.body_len()
    }

    fn body_len(&self) -> usize {
        let entries: usize = self
            .payload
            .iter()
            .map(|(n, v)| 2 + n.len() + 4 + v.len())
            .sum();
        1 + 4 + 1 + 16 * self.frames.len() + 8 + 4 + entries
    }

    pub fn encode(&self) -> Result<Vec<u8>, ProtocolError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), ProtocolError> {
        let start = out.len();
        let body = self.body_len();
        if body > MAX_FRAME_LEN as usize {
            return Err(ProtocolError::new(0, format!("frame of {body} bytes exceeds limit")));
        }
        if self.frames.len() > 2 {
            return Err(ProtocolError::new(9, "metadata deeper than two frames"));
        }
        out.extend_from_slice(&(body as u32).to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.gate_id.to_le_bytes());
        out.push(self.frames.len() as u8);
        for f in &self.frames {
            out.extend_from_slice(&f.id.to_le_bytes());
            out.extend_from_slice(&f.arity.to_le_bytes());
        }
        out.extend_from_slice(&self.feed_seq.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        for (name, value) in &self.payload {
            let offset = out.len() - start;
            let len = u16::try_from(name.len())
                .map_err(|_| ProtocolError::new(offset, "entry name longer than 65535 bytes"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.len() as u32).to_le_bytes());
            out.extend_from_slice(value);
        }
        debug_assert_eq!(out.len() - start, HEADER_LEN + body);
        Ok(())
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let mut c = Cursor { bytes, pos: 0 };
        let len = c.u32()?;
        if len > MAX_FRAME_LEN {
            return Err(ProtocolError::new(0, format!("length {len} exceeds limit")));
        }
        let remainder = bytes.len() - HEADER_LEN;
        if (len as usize) < remainder {
            return Err(ProtocolError::new(
                HEADER_LEN + len as usize,
                format!("length field says {len} bytes, {remainder} follow"),
            ));
        }
        if (len as usize) > remainder {
            return Err(ProtocolError::new(
                bytes.len(),
                format!("truncated: length field says {len} bytes, {remainder} follow"),
            ));
        }
        decode_body(&mut c)
    }
}

/// Decodes the part after the length field.
pub fn decode_body_at(body: &[u8], base: usize) -> Result<WireFrame, ProtocolError> {
    let mut c = Cursor { bytes: body, pos: 0 };
    decode_body(&mut c).map_err(|e| ProtocolError::new(e.offset + base, e.reason))
}

fn decode_body(c: &mut Cursor<'_>) -> Result<WireFrame, ProtocolError> {
    let at = c.pos;
    let kind_byte = c.u8()?;
    let kind = FrameKind::from_byte(kind_byte)
        .ok_or_else(|| ProtocolError::new(at, format!("unknown frame kind {kind_byte}")))?;
    let gate_id = c.u32()?;
    let at = c.pos;
    let depth = c.u8()?;
    if depth > 2 {
        return Err(ProtocolError::new(at, format!("metadata depth {depth} exceeds 2")));
    }
    let mut frames = Vec::with_capacity(depth as usize);
    for _ in 0..depth {
        let id = c.u64()?;
        let at = c.pos;
        let arity = c.u64()?;
        let frame = MetadataFrame::new(id, arity)
            .map_err(|e| ProtocolError::new(at, e.to_string()))?;
        frames.push(frame);
    }
    let feed_seq = c.u64()?;
    let count = c.u32()?;
    // Each entry needs at least 6 bytes, which bounds the allocation.
    if count as usize > c.remaining() / 6 {
        return Err(ProtocolError::new(
            c.pos,
            format!("{count} payload entries cannot fit in {} bytes", c.remaining()),
        ));
    }
    let mut payload = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| ProtocolError::new(at, "entry name is not UTF-8"))?
            .to_owned();
        let value_len = c.u32()? as usize;
        let value = c.take(value_len)?.to_vec();
        payload.push((name, value));
    }
    if c.remaining() != 0 {
        return Err(ProtocolError::new(
            c.pos,
            format!("{} bytes left over after payload", c.remaining()),
        ));
    }
    Ok(WireFrame {
        kind,
        gate_id,
        frames,
        feed_seq,
        payload,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.remaining() < n {
            return Err(ProtocolError::new(
                self.bytes.len(),
                format!("truncated: needed {n} bytes at {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ProtocolError> {
        Ok(self.take(N)?.try_into().expect("slice of length N"))
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        self.array().map(u64::from_le_bytes)
    }
}

#[derive(Debug, Error)]
pub enum ReadError {
    #[error("connection closed")]
    Eof,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Reads one frame from a stream. A clean end of stream before the first
/// byte is `Eof`; anywhere else it is an I/O error.
pub fn read_frame(r: &mut impl Read) -> Result<WireFrame, ReadError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Err(ReadError::Eof),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(header);
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::new(0, format!("length {len} exceeds limit")).into());
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok(decode_body_at(&body, HEADER_LEN)?)
}

pub fn write_frame(w: &mut impl Write, frame: &WireFrame) -> io::Result<()> {
    let bytes = frame
        .encode()
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    w.write_all(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(frames: Vec<(u64, u64)>, seq: u64, payload: Vec<(&str, &[u8])>) -> WireFrame {
        WireFrame {
            kind: FrameKind::Enqueue,
            gate_id: 7,
            frames: frames
                .into_iter()
                .map(|(i, a)| MetadataFrame::new(i, a).unwrap())
                .collect(),
            feed_seq: seq,
            payload: payload
                .into_iter()
                .map(|(n, v)| (n.to_owned(), v.to_vec()))
                .collect(),
        }
    }

    #[test]
    fn single_frame_empty_payload_roundtrip() {
        let f = frame(vec![(1, 3)], 0, vec![]);
        assert_eq!(WireFrame::decode(&f.encode().unwrap()).unwrap(), f);
    }

    #[test]
    fn depth_two_roundtrip() {
        let f = frame(vec![(9, 12), (101, 3)], 2, vec![("k", b"v")]);
        assert_eq!(WireFrame::decode(&f.encode().unwrap()).unwrap(), f);
    }

    #[test]
    fn layout_is_little_endian() {
        let f = frame(vec![(1, 3)], 5, vec![("ab", b"xyz")]);
        let b = f.encode().unwrap();
        let expected: Vec<u8> = [
            &(b.len() as u32 - 4).to_le_bytes()[..],
            &[1],
            &7u32.to_le_bytes(),
            &[1],
            &1u64.to_le_bytes(),
            &3u64.to_le_bytes(),
            &5u64.to_le_bytes(),
            &1u32.to_le_bytes(),
            &2u16.to_le_bytes(),
            b"ab",
            &3u32.to_le_bytes(),
            b"xyz",
        ]
        .concat();
        assert_eq!(b, expected);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut b = frame(vec![(1, 3)], 0, vec![]).encode().unwrap();
        b.push(0);
        let err = WireFrame::decode(&b).unwrap_err();
        assert!(err.reason.contains("length field"), "{err}");
        let mut b = frame(vec![(1, 3)], 0, vec![]).encode().unwrap();
        b[0] += 1;
        assert!(WireFrame::decode(&b).is_err());
    }

    #[test]
    fn bad_kind_depth_and_arity_are_rejected() {
        let good = frame(vec![(1, 3)], 0, vec![]).encode().unwrap();
        let mut b = good.clone();
        b[4] = 0;
        assert_eq!(WireFrame::decode(&b).unwrap_err().offset, 4);
        let mut b = good.clone();
        b[9] = 3;
        assert_eq!(WireFrame::decode(&b).unwrap_err().offset, 9);
        let mut b = good;
        b[18..26].copy_from_slice(&0u64.to_le_bytes());
        assert_eq!(WireFrame::decode(&b).unwrap_err().offset, 18);
    }

    #[test]
    fn oversized_length_is_rejected_before_allocation() {
        let mut b = (MAX_FRAME_LEN + 1).to_le_bytes().to_vec();
        b.extend([0; 8]);
        assert!(WireFrame::decode(&b).is_err());
        assert!(matches!(
            read_frame(&mut &b[..]),
            Err(ReadError::Protocol(_))
        ));
    }

    #[test]
    fn stream_reader_sees_eof_and_truncation() {
        assert!(matches!(read_frame(&mut &[][..]), Err(ReadError::Eof)));
        let b = frame(vec![(1, 3)], 0, vec![("a", b"b")]).encode().unwrap();
        assert!(matches!(read_frame(&mut &b[..3]), Err(ReadError::Io(_))));
        assert!(matches!(read_frame(&mut &b[..b.len() - 1]), Err(ReadError::Io(_))));
        assert_eq!(read_frame(&mut &b[..]).unwrap(), WireFrame::decode(&b).unwrap());
    }

    pub(crate) fn arb_frame() -> impl Strategy<Value = WireFrame> {
        let meta = prop::collection::vec((any::<u64>(), 1..=u64::MAX), 0..=2);
        let entry = ("[a-z!#_]{0,12}", prop::collection::vec(any::<u8>(), 0..64));
        (
            prop::sample::select(FrameKind::ALL.to_vec()),
            any::<u32>(),
            meta,
            any::<u64>(),
            prop::collection::vec(entry, 0..6),
        )
            .prop_map(|(kind, gate_id, frames, feed_seq, payload)| WireFrame {
                kind,
                gate_id,
                frames: frames
                    .into_iter()
                    .map(|(i, a)| MetadataFrame::new(i, a).unwrap())
                    .collect(),
                feed_seq,
                payload,
            })
    }

    proptest! {
        #[test]
        fn roundtrip_is_identity(f in arb_frame()) {
            let b = f.encode().unwrap();
            prop_assert_eq!(b.len(), f.encoded_len());
            prop_assert_eq!(u32::from_le_bytes(b[..4].try_into().unwrap()) as usize, b.len() - 4);
            let back = WireFrame::decode(&b).unwrap();
            prop_assert_eq!(back.encode().unwrap(), b);
            prop_assert_eq!(back, f);
        }

        #[test]
        fn every_truncation_is_an_error(f in arb_frame()) {
            let b = f.encode().unwrap();
            for cut in 0..b.len() {
                prop_assert!(WireFrame::decode(&b[..cut]).is_err());
            }
        }
    }
}
