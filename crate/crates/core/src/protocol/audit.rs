//! Transcript scanner: accounts for every key-dependent bit on the wire.

use super::frame::{FrameError, FrameType};
use super::messages::parse_bits;
use super::transport::TranscriptEntry;
use super::BlockStats;
use crate::timetag::decode_records;

/// Key-dependent bits seen on the wire for one block against the leakage
/// both sides reported.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeakAudit {
    pub block_index: u32,
    pub parity_bits: u64,
    pub tag_bits: u64,
    pub reported_leak: u64,
    /// Hash input length announced for privacy amplification (0 if the
    /// block never reached it).
    pub reconciled_bits: u64,
    pub final_bits: u64,
    pub i_eve: f64,
}

impl LeakAudit {
    pub fn consistent(&self) -> bool {
        self.parity_bits + self.tag_bits == self.reported_leak
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TranscriptAudit {
    pub blocks: Vec<LeakAudit>,
    /// Time-tag batches carried basis information only.
    pub timetags_basis_only: bool,
    /// Bits disclosed for QBER estimation (removed from the key).
    pub sampled_bits: u64,
}

impl TranscriptAudit {
    pub fn all_consistent(&self) -> bool {
        self.timetags_basis_only && self.blocks.iter().all(LeakAudit::consistent)
    }
}

/// Scans one endpoint's transcript (both directions).
pub fn audit_transcript(entries: &[TranscriptEntry]) -> Result<TranscriptAudit, FrameError> {
    let mut audit = TranscriptAudit {
        timetags_basis_only: true,
        ..Default::default()
    };
    let mut parity = 0u64;
    let mut tag = 0u64;
    let mut reconciling = false;
    let mut reconciled = 0u64;
    for e in entries {
        let p = &e.frame.payload;
        match e.frame.kind {
            FrameType::TimetagBatch => {
                let tags = decode_records(p).map_err(|_| FrameError::Malformed("time tag batch"))?;
                if tags.iter().any(|t| t.detector != 1 && t.detector != 3) {
                    audit.timetags_basis_only = false;
                }
            }
            FrameType::QberSample => {
                audit.sampled_bits += super::messages::QberSample::parse(p)?.bits.len() as u64;
            }
            FrameType::ShuffleSeed => {
                reconciling = true;
                parity = 0;
                tag = 0;
                reconciled = 0;
            }
            FrameType::ParityResponse => parity += parse_bits(p)?.len() as u64,
            // Both directions carry a tag; the pair discloses one 64-bit
            // hash of the key.
            FrameType::VerifyTag if reconciling && tag == 0 => tag = 64,
            FrameType::PaParams => {
                reconciling = false;
                reconciled = super::messages::PaParams::parse(p)?.input_len as u64;
            }
            FrameType::BlockStats => {
                let stats = BlockStats::decode(p)?;
                if audit.blocks.last().is_none_or(|b| b.block_index != stats.block_index) {
                    audit.blocks.push(LeakAudit {
                        block_index: stats.block_index,
                        parity_bits: parity,
                        tag_bits: tag,
                        reported_leak: stats.leak_ec,
                        reconciled_bits: reconciled,
                        final_bits: stats.final_bits,
                        i_eve: stats.i_eve,
                    });
                }
            }
            _ => {}
        }
    }
    Ok(audit)
}
