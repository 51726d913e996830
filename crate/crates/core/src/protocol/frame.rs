//! Wire framing: `"QKDP" | version u8 | type u8 | length u32 LE | payload`.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"QKDP";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum FrameType {
    Hello = 1,
    TimetagBatch = 2,
    MatchAnnounce = 3,
    BellReveal = 4,
    QberSample = 5,
    ShuffleSeed = 6,
    ParityRequest = 7,
    ParityResponse = 8,
    VerifyTag = 9,
    PaParams = 10,
    PaSeed = 11,
    BlockStats = 12,
    Abort = 13,
}

impl FrameType {
    pub fn from_u8(v: u8) -> Option<Self> {
        use FrameType::*;
        Some(match v {
            1 => Hello,
            2 => TimetagBatch,
            3 => MatchAnnounce,
            4 => BellReveal,
            5 => QberSample,
            6 => ShuffleSeed,
            7 => ParityRequest,
            8 => ParityResponse,
            9 => VerifyTag,
            10 => PaParams,
            11 => PaSeed,
            12 => BlockStats,
            13 => Abort,
            _ => return None,
        })
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown frame type {0}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the length field")]
    TooLarge(usize),
    #[error("peer closed the connection")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameType, payload: Vec<u8>) -> Self {
        Self { kind, payload }
    }

    pub fn empty(kind: FrameType) -> Self {
        Self::new(kind, Vec::new())
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        let len = u32::try_from(self.payload.len()).map_err(|_| FrameError::TooLarge(self.payload.len()))?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.kind as u8);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        let (frame, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(FrameError::Malformed("trailing bytes"));
        }
        Ok(frame)
    }

    /// Decodes the frame at the start of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize), FrameError> {
        if bytes.len() < HEADER_LEN {
            return Err(FrameError::Malformed("short header"));
        }
        let (kind, len) = parse_header(bytes[..HEADER_LEN].try_into().expect("header length"))?;
        let end = HEADER_LEN + len;
        if bytes.len() < end {
            return Err(FrameError::Malformed("short payload"));
        }
        Ok((Self::new(kind, bytes[HEADER_LEN..end].to_vec()), end))
    }
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(FrameType, usize), FrameError> {
    if &h[..4] != MAGIC {
        return Err(FrameError::Malformed("bad magic"));
    }
    if h[4] != VERSION {
        return Err(FrameError::UnsupportedVersion(h[4]));
    }
    let kind = FrameType::from_u8(h[5]).ok_or(FrameError::UnknownType(h[5]))?;
    let len = u32::from_le_bytes(h[6..10].try_into().expect("4 bytes")) as usize;
    Ok((kind, len))
}

pub fn write_frame<W: Write + ?Sized>(w: &mut W, frame: &Frame) -> Result<(), FrameError> {
    w.write_all(&frame.encode()?)?;
    Ok(())
}

/// Reads one frame; a clean end of stream before the header is `Closed`.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> Result<Frame, FrameError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Err(FrameError::Closed),
            Ok(0) => return Err(FrameError::Malformed("truncated header")),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (kind, len) = parse_header(&header)?;
    // Grow as data arrives rather than trusting the length field up front.
    let mut payload = Vec::with_capacity(len.min(1 << 20));
    r.take(len as u64).read_to_end(&mut payload)?;
    if payload.len() != len {
        return Err(FrameError::Malformed("truncated payload"));
    }
    Ok(Frame::new(kind, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_only_frame() {
        let bytes = Frame::empty(FrameType::Hello).encode().unwrap();
        assert_eq!(bytes.len(), 10);
        assert_eq!(&bytes[..4], b"QKDP");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(Frame::decode(&bytes).unwrap(), Frame::empty(FrameType::Hello));
    }

    #[test]
    fn large_payload_round_trip() {
        let mut payload = vec![0u8; 1 << 20];
        ChaCha8Rng::seed_from_u64(1).fill_bytes(&mut payload);
        let f = Frame::new(FrameType::TimetagBatch, payload);
        let bytes = f.encode().unwrap();
        assert_eq!(Frame::decode(&bytes).unwrap(), f);
        assert_eq!(read_frame(&mut bytes.as_slice()).unwrap(), f);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = Frame::new(FrameType::Abort, vec![1]).encode().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Frame::decode(&bytes), Err(FrameError::Malformed(_))));
        let mut bytes = Frame::empty(FrameType::Abort).encode().unwrap();
        bytes[4] = 2;
        assert!(matches!(Frame::decode(&bytes), Err(FrameError::UnsupportedVersion(2))));
        let mut bytes = Frame::empty(FrameType::Abort).encode().unwrap();
        bytes[5] = 99;
        assert!(matches!(Frame::decode(&bytes), Err(FrameError::UnknownType(99))));
        let bytes = Frame::new(FrameType::Abort, vec![1, 2, 3]).encode().unwrap();
        assert!(Frame::decode(&bytes[..12]).is_err());
        assert!(matches!(read_frame(&mut &bytes[..12]), Err(FrameError::Malformed(_))));
        assert!(matches!(read_frame(&mut &[][..]), Err(FrameError::Closed)));
    }

    #[test]
    fn all_types_round_trip() {
        for t in 1..=13u8 {
            let kind = FrameType::from_u8(t).unwrap();
            assert_eq!(kind as u8, t);
        }
        assert!(FrameType::from_u8(0).is_none());
        assert!(FrameType::from_u8(14).is_none());
    }

    #[test]
    fn consecutive_frames_in_one_stream() {
        let a = Frame::new(FrameType::ShuffleSeed, 7u64.to_le_bytes().to_vec());
        let b = Frame::empty(FrameType::TimetagBatch);
        let mut buf = a.encode().unwrap();
        buf.extend(b.encode().unwrap());
        let mut r = buf.as_slice();
        assert_eq!(read_frame(&mut r).unwrap(), a);
        assert_eq!(read_frame(&mut r).unwrap(), b);
        assert!(matches!(read_frame(&mut r), Err(FrameError::Closed)));
    }
}
