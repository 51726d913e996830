//! Payload layouts. All integers are little-endian; bit strings are a u32
//! bit count followed by MSB-first packed bytes.

use crate::bits::BitString;
use crate::sifting::CoincidenceClass;

use super::frame::{Frame, FrameError, FrameType};

type Result<T> = std::result::Result<T, FrameError>;

/// Cursor over a payload with bounds-checked reads.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(FrameError::Malformed("payload too short"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub(crate) fn bits(&mut self) -> Result<BitString> {
        let n = self.u32()? as usize;
        let bytes = self.take(n.div_ceil(8))?;
        BitString::from_bytes_msb(bytes, n).ok_or(FrameError::Malformed("bit string"))
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(FrameError::Malformed("trailing payload bytes"))
        }
    }
}

fn put_bits(out: &mut Vec<u8>, bits: &BitString) {
    out.extend_from_slice(&(bits.len() as u32).to_le_bytes());
    out.extend_from_slice(&bits.to_bytes_msb());
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hello {
    /// 0 for Alice, 1 for Bob.
    pub role: u8,
    pub block_min_key_bits: u32,
    pub cascade_passes: u8,
    pub half_window_ticks: u32,
}

impl Hello {
    pub fn to_frame(&self) -> Frame {
        let mut p = vec![self.role];
        p.extend_from_slice(&self.block_min_key_bits.to_le_bytes());
        p.push(self.cascade_passes);
        p.extend_from_slice(&self.half_window_ticks.to_le_bytes());
        Frame::new(FrameType::Hello, p)
    }

    pub fn parse(payload: &[u8]) -> Result<Self> {
        let mut r = Reader::new(payload);
        let h = Self {
            role: r.u8()?,
            block_min_key_bits: r.u32()?,
            cascade_passes: r.u8()?,
            half_window_ticks: r.u32()?,
        };
        r.finish()?;
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchEntry {
    pub alice_index: u32,
    pub bob_index: u32,
    pub class: CoincidenceClass,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchAnnounce {
    pub accidentals: u32,
    pub entries: Vec<MatchEntry>,
}

impl MatchAnnounce {
    pub fn to_frame(&self) -> Frame {
        let mut p = Vec::with_capacity(8 + 9 * self.entries.len());
        p.extend_from_slice(&self.accidentals.to_le_bytes());
        p.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            p.extend_from_slice(&e.alice_index.to_le_bytes());
            p.extend_from_slice(&e.bob_index.to_le_bytes());
            p.push(e.class.code());
        }
        Frame::new(FrameType::MatchAnnounce, p)
    }

    pub fn parse(payload: &[u8]) -> Result<Self> {
        let mut r = Reader::new(payload);
        let accidentals = r.u32()?;
        let n = r.u32()? as usize;
        if payload.len() != 8 + 9 * n {
            return Err(FrameError::Malformed("match announce length"));
        }
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            entries.push(MatchEntry {
                alice_index: r.u32()?,
                bob_index: r.u32()?,
                class: CoincidenceClass::from_code(r.u8()?).ok_or(FrameError::Malformed("class code"))?,
            });
        }
        r.finish()?;
        Ok(Self { accidentals, entries })
    }
}

/// Detector numbers of the Bell-class records of the block, in
/// announcement order.
pub fn bell_reveal_frame(detectors: &[u8]) -> Frame {
    Frame::new(FrameType::BellReveal, detectors.to_vec())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QberSample {
    /// Sampled key positions (empty in Bob's reply).
    pub positions: Vec<u32>,
    pub bits: BitString,
}

impl QberSample {
    pub fn to_frame(&self) -> Frame {
        let mut p = (self.positions.len() as u32).to_le_bytes().to_vec();
        for x in &self.positions {
            p.extend_from_slice(&x.to_le_bytes());
        }
        put_bits(&mut p, &self.bits);
        Frame::new(FrameType::QberSample, p)
    }

    pub fn parse(payload: &[u8]) -> Result<Self> {
        let mut r = Reader::new(payload);
        let n = r.u32()? as usize;
        if payload.len() < 4 + 4 * n {
            return Err(FrameError::Malformed("sample length"));
        }
        let positions = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let bits = r.bits()?;
        r.finish()?;
        Ok(Self { positions, bits })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PaParams {
    pub input_len: u32,
    pub output_len: u32,
}

impl PaParams {
    pub fn to_frame(&self) -> Frame {
        let mut p = self.input_len.to_le_bytes().to_vec();
        p.extend_from_slice(&self.output_len.to_le_bytes());
        Frame::new(FrameType::PaParams, p)
    }

    pub fn parse(payload: &[u8]) -> Result<Self> {
        let mut r = Reader::new(payload);
        let v = Self {
            input_len: r.u32()?,
            output_len: r.u32()?,
        };
        r.finish()?;
        Ok(v)
    }
}

pub fn bits_frame(kind: FrameType, bits: &BitString) -> Frame {
    let mut p = Vec::new();
    put_bits(&mut p, bits);
    Frame::new(kind, p)
}

pub fn parse_bits(payload: &[u8]) -> Result<BitString> {
    let mut r = Reader::new(payload);
    let bits = r.bits()?;
    r.finish()?;
    Ok(bits)
}

pub fn u64_frame(kind: FrameType, v: u64) -> Frame {
    Frame::new(kind, v.to_le_bytes().to_vec())
}

pub fn parse_u64(payload: &[u8]) -> Result<u64> {
    let mut r = Reader::new(payload);
    let v = r.u64()?;
    r.finish()?;
    Ok(v)
}
