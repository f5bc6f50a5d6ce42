//! Wire format shared by clients, servers and the balancer.
//!
//! Every frame is a fixed 24-byte little-endian header followed by an opaque
//! payload:
//!
//! ```text
//! offset  size  field
//!      0     2  magic "TB" (0x54 0x42)
//!      2     1  version (1)
//!      3     1  kind (1=REQUEST 2=RESPONSE 3=CLIENT_HELLO 4=CLIENT_BYE)
//!      4     8  request_id
//!     12     8  client_id
//!     20     4  payload_len
//!     24     n  payload
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 2] = *b"TB";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 24;
pub const RESPONSE_PAYLOAD_LEN: usize = 28;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtoError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unknown frame kind {0}")]
    BadKind(u8),
    #[error("payload of {0} bytes does not fit the 32-bit length field")]
    PayloadTooLarge(usize),
    #[error("response payload must be {RESPONSE_PAYLOAD_LEN} bytes, got {0}")]
    BadResponsePayload(usize),
    #[error("response timings out of order: recv {recv} start {start} end {end}")]
    TimingOrder { recv: u64, start: u64, end: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    Request = 1,
    Response = 2,
    ClientHello = 3,
    ClientBye = 4,
}

impl TryFrom<u8> for FrameKind {
    type Error = ProtoError;

    fn try_from(v: u8) -> Result<Self, ProtoError> {
        match v {
            1 => Ok(FrameKind::Request),
            2 => Ok(FrameKind::Response),
            3 => Ok(FrameKind::ClientHello),
            4 => Ok(FrameKind::ClientBye),
            other => Err(ProtoError::BadKind(other)),
        }
    }
}

/// One protocol unit. `payload_len` on the wire is always `payload.len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub request_id: u64,
    pub client_id: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameKind, request_id: u64, client_id: u64, payload: Vec<u8>) -> Self {
        Frame {
            kind,
            request_id,
            client_id,
            payload,
        }
    }

    pub fn request(client_id: u64, request_id: u64) -> Self {
        Frame::new(FrameKind::Request, request_id, client_id, Vec::new())
    }

    pub fn hello(client_id: u64) -> Self {
        Frame::new(FrameKind::ClientHello, 0, client_id, Vec::new())
    }

    pub fn bye(client_id: u64) -> Self {
        Frame::new(FrameKind::ClientBye, 0, client_id, Vec::new())
    }

    pub fn response(request: &Frame, timings: &ResponsePayload) -> Self {
        Frame::new(
            FrameKind::Response,
            request.request_id,
            request.client_id,
            timings.encode().to_vec(),
        )
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, ProtoError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), ProtoError> {
        let len = u32::try_from(self.payload.len())
            .map_err(|_| ProtoError::PayloadTooLarge(self.payload.len()))?;
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.request_id.to_le_bytes());
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&self.payload);
        Ok(())
    }
}

/// Parsed fixed header, without the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub kind: FrameKind,
    pub request_id: u64,
    pub client_id: u64,
    pub payload_len: u32,
}

impl Header {
    pub fn parse(buf: &[u8; HEADER_LEN]) -> Result<Header, ProtoError> {
        if buf[0..2] != MAGIC {
            return Err(ProtoError::BadMagic([buf[0], buf[1]]));
        }
        if buf[2] != VERSION {
            return Err(ProtoError::BadVersion(buf[2]));
        }
        let kind = FrameKind::try_from(buf[3])?;
        Ok(Header {
            kind,
            request_id: u64::from_le_bytes(buf[4..12].try_into().unwrap()),
            client_id: u64::from_le_bytes(buf[12..20].try_into().unwrap()),
            payload_len: u32::from_le_bytes(buf[20..24].try_into().unwrap()),
        })
    }
}

/// Decode one frame from the front of `bytes`.
///
/// Returns `Ok(None)` when more bytes are needed, otherwise the frame and the
/// number of bytes it occupied. Magic and version are checked as soon as the
/// first bytes are present, so garbage is rejected without waiting for a full
/// header.
pub fn decode(bytes: &[u8]) -> Result<Option<(Frame, usize)>, ProtoError> {
    if bytes.len() >= 2 && bytes[0..2] != MAGIC {
        return Err(ProtoError::BadMagic([bytes[0], bytes[1]]));
    }
    if bytes.len() >= 3 && bytes[2] != VERSION {
        return Err(ProtoError::BadVersion(bytes[2]));
    }
    if bytes.len() < HEADER_LEN {
        return Ok(None);
    }
    let header = Header::parse(bytes[..HEADER_LEN].try_into().unwrap())?;
    let total = HEADER_LEN + header.payload_len as usize;
    if bytes.len() < total {
        return Ok(None);
    }
    let frame = Frame {
        kind: header.kind,
        request_id: header.request_id,
        client_id: header.client_id,
        payload: bytes[HEADER_LEN..total].to_vec(),
    };
    Ok(Some((frame, total)))
}

/// Server-side timing record carried in a RESPONSE payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ResponsePayload {
    pub server_recv_ns: u64,
    pub service_start_ns: u64,
    pub service_end_ns: u64,
    pub server_id: u32,
}

impl ResponsePayload {
    pub fn encode(&self) -> [u8; RESPONSE_PAYLOAD_LEN] {
        let mut out = [0u8; RESPONSE_PAYLOAD_LEN];
        out[0..8].copy_from_slice(&self.server_recv_ns.to_le_bytes());
        out[8..16].copy_from_slice(&self.service_start_ns.to_le_bytes());
        out[16..24].copy_from_slice(&self.service_end_ns.to_le_bytes());
        out[24..28].copy_from_slice(&self.server_id.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtoError> {
        if bytes.len() != RESPONSE_PAYLOAD_LEN {
            return Err(ProtoError::BadResponsePayload(bytes.len()));
        }
        let p = ResponsePayload {
            server_recv_ns: u64::from_le_bytes(bytes[0..8].try_into().unwrap()),
            service_start_ns: u64::from_le_bytes(bytes[8..16].try_into().unwrap()),
            service_end_ns: u64::from_le_bytes(bytes[16..24].try_into().unwrap()),
            server_id: u32::from_le_bytes(bytes[24..28].try_into().unwrap()),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ProtoError> {
        if self.server_recv_ns <= self.service_start_ns
            && self.service_start_ns <= self.service_end_ns
        {
            Ok(())
        } else {
            Err(ProtoError::TimingOrder {
                recv: self.server_recv_ns,
                start: self.service_start_ns,
                end: self.service_end_ns,
            })
        }
    }
}

/// Buffered frame reader over a byte stream.
pub struct FrameReader<R> {
    inner: R,
    buf: Vec<u8>,
    start: usize,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader {
            inner,
            buf: Vec::with_capacity(4096),
            start: 0,
        }
    }

    /// Read the next frame. `Ok(None)` means the peer closed cleanly on a
    /// frame boundary; a close mid-frame is `UnexpectedEof`.
    pub fn read_frame(&mut self) -> io::Result<Option<Frame>> {
        loop {
            match decode(&self.buf[self.start..]) {
                Ok(Some((frame, used))) => {
                    self.start += used;
                    if self.start == self.buf.len() {
                        self.buf.clear();
                        self.start = 0;
                    }
                    return Ok(Some(frame));
                }
                Ok(None) => {}
                Err(e) => return Err(io::Error::new(io::ErrorKind::InvalidData, e)),
            }
            if self.start > 0 {
                self.buf.drain(..self.start);
                self.start = 0;
            }
            let mut chunk = [0u8; 4096];
            let n = self.inner.read(&mut chunk)?;
            if n == 0 {
                return if self.buf.is_empty() {
                    Ok(None)
                } else {
                    Err(io::Error::new(
                        io::ErrorKind::UnexpectedEof,
                        "connection closed mid-frame",
                    ))
                };
            }
            self.buf.extend_from_slice(&chunk[..n]);
        }
    }

    pub fn get_ref(&self) -> &R {
        &self.inner
    }

    /// The underlying stream plus any bytes read past the last frame.
    pub fn into_parts(mut self) -> (R, Vec<u8>) {
        let rest = self.buf.split_off(self.start);
        (self.inner, rest)
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> io::Result<()> {
    let bytes = frame
        .encode()
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    w.write_all(&bytes)
}

/// Incremental header scanner for relays that forward bytes untouched but
/// need to observe frame boundaries. Payload bytes are skipped, not buffered.
#[derive(Debug, Default)]
pub struct FrameScanner {
    header: Vec<u8>,
    skip: usize,
}

impl FrameScanner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feed the next chunk of the stream; calls `on_header` for every header
    /// completed within it.
    pub fn feed(
        &mut self,
        mut bytes: &[u8],
        mut on_header: impl FnMut(Header),
    ) -> Result<(), ProtoError> {
        while !bytes.is_empty() {
            if self.skip > 0 {
                let n = self.skip.min(bytes.len());
                self.skip -= n;
                bytes = &bytes[n..];
                continue;
            }
            let want = HEADER_LEN - self.header.len();
            let n = want.min(bytes.len());
            self.header.extend_from_slice(&bytes[..n]);
            bytes = &bytes[n..];
            if self.header.len() >= 2 && self.header[0..2] != MAGIC {
                return Err(ProtoError::BadMagic([self.header[0], self.header[1]]));
            }
            if self.header.len() == HEADER_LEN {
                let h = Header::parse(self.header.as_slice().try_into().unwrap())?;
                self.header.clear();
                self.skip = h.payload_len as usize;
                on_header(h);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encodes_documented_layout() {
        let f = Frame::request(1, 7);
        let bytes = f.encode().unwrap();
        assert_eq!(
            bytes,
            vec![
                0x54, 0x42, 0x01, 0x01, 0x07, 0, 0, 0, 0, 0, 0, 0, 0x01, 0, 0, 0, 0, 0, 0, 0, 0, 0,
                0, 0
            ]
        );
        let (back, used) = decode(&bytes).unwrap().unwrap();
        assert_eq!(back, f);
        assert_eq!(used, 24);
    }

    #[test]
    fn payload_follows_header() {
        let f = Frame::new(FrameKind::Request, 0, 0, vec![1, 2, 3]);
        let bytes = f.encode().unwrap();
        assert_eq!(bytes.len(), 27);
        assert_eq!(&bytes[20..24], &[3, 0, 0, 0]);
        assert_eq!(&bytes[24..], &[1, 2, 3]);
    }

    #[test]
    fn bad_magic_and_version() {
        assert_eq!(
            decode(&[0, 0, 1, 1]).unwrap_err(),
            ProtoError::BadMagic([0, 0])
        );
        let mut bytes = Frame::hello(3).encode().unwrap();
        bytes[2] = 2;
        assert_eq!(decode(&bytes).unwrap_err(), ProtoError::BadVersion(2));
        let mut bytes = Frame::hello(3).encode().unwrap();
        bytes[3] = 9;
        assert_eq!(decode(&bytes).unwrap_err(), ProtoError::BadKind(9));
    }

    #[test]
    fn truncated_payload_is_incomplete() {
        let mut bytes = Frame::new(FrameKind::Request, 1, 1, vec![0; 10])
            .encode()
            .unwrap();
        bytes.truncate(24 + 4);
        assert_eq!(decode(&bytes).unwrap(), None);
        assert_eq!(decode(&bytes[..10]).unwrap(), None);
    }

    #[test]
    fn response_payload_checks_order() {
        let p = ResponsePayload {
            server_recv_ns: 10,
            service_start_ns: 20,
            service_end_ns: 30,
            server_id: 4,
        };
        assert_eq!(ResponsePayload::decode(&p.encode()).unwrap(), p);
        let bad = ResponsePayload {
            service_start_ns: 5,
            ..p
        };
        assert!(ResponsePayload::decode(&bad.encode()).is_err());
        assert!(ResponsePayload::decode(&[0; 3]).is_err());
    }

    #[test]
    fn reader_handles_split_and_eof() {
        let mut stream = Vec::new();
        for i in 0..5u64 {
            Frame::new(FrameKind::Request, i, 9, vec![i as u8; i as usize])
                .encode_into(&mut stream)
                .unwrap();
        }
        // one byte at a time
        struct Trickle<'a>(&'a [u8]);
        impl Read for Trickle<'_> {
            fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
                if self.0.is_empty() || out.is_empty() {
                    return Ok(0);
                }
                out[0] = self.0[0];
                self.0 = &self.0[1..];
                Ok(1)
            }
        }
        let mut r = FrameReader::new(Trickle(&stream));
        for i in 0..5u64 {
            assert_eq!(r.read_frame().unwrap().unwrap().request_id, i);
        }
        assert!(r.read_frame().unwrap().is_none());

        let mut r = FrameReader::new(&stream[..stream.len() - 1]);
        for _ in 0..4 {
            r.read_frame().unwrap().unwrap();
        }
        let err = r.read_frame().unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::UnexpectedEof);
    }

    fn arb_frame() -> impl Strategy<Value = Frame> {
        (
            1u8..=4,
            any::<u64>(),
            any::<u64>(),
            proptest::collection::vec(any::<u8>(), 0..64),
        )
            .prop_map(|(k, r, c, p)| Frame::new(FrameKind::try_from(k).unwrap(), r, c, p))
    }

    proptest! {
        #[test]
        fn scanner_sees_every_header(frames in proptest::collection::vec(arb_frame(), 0..20), cut in 1usize..50) {
            let mut stream = Vec::new();
            for f in &frames {
                f.encode_into(&mut stream).unwrap();
            }
            let mut scanner = FrameScanner::new();
            let mut seen = Vec::new();
            for chunk in stream.chunks(cut) {
                scanner.feed(chunk, |h| seen.push((h.kind, h.request_id, h.client_id))).unwrap();
            }
            let want: Vec<_> = frames.iter().map(|f| (f.kind, f.request_id, f.client_id)).collect();
            prop_assert_eq!(seen, want);
        }
    }
}
