//! Two-party session protocol.
//!
//! Each endpoint is a sans-IO state machine ([`Endpoint`]) that consumes one
//! frame at a time and returns the frames to send. [`transport`] drives an
//! endpoint over any ordered byte stream.
//!
//! Per block the exchange is:
//!
//! | phase     | frames                                                        |
//! |-----------|---------------------------------------------------------------|
//! | hello     | A `HELLO`, B `HELLO`                                          |
//! | sift      | B `TIMETAG_BATCH` (basis only), A `MATCH_ANNOUNCE`, repeated  |
//! | bell      | A `BELL_REVEAL`, B `BELL_REVEAL`                              |
//! | reconcile | first block: A/B `QBER_SAMPLE`; then A `SHUFFLE_SEED`, parity queries, `VERIFY_TAG` both ways |
//! | amplify   | A `PA_PARAMS`, A `PA_SEED`, B `BLOCK_STATS`                   |
//! | confirm   | A `BLOCK_STATS`, A `VERIFY_TAG`, B `VERIFY_TAG`               |
//!
//! An empty `TIMETAG_BATCH` from Bob ends the session.

mod alice;
pub mod audit;
mod bob;
mod common;
pub mod frame;
pub mod messages;
pub mod transport;

use std::fmt;

use thiserror::Error;

use crate::bits::BitString;
use crate::cascade::CascadeParams;
use crate::privamp::FiniteKeyPolicy;
use crate::timetag::WindowConfig;

pub use alice::AliceSession;
pub use bob::BobSession;
pub use frame::{Frame, FrameError, FrameType};
use messages::Reader;

/// One side's stream of time tags, delivered in chunks of ascending time.
pub type TagSource = Box<dyn Iterator<Item = Vec<crate::timetag::TimeTag>> + Send>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Alice,
    Bob,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::Alice => 0,
            Role::Bob => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Hello,
    Sync,
    Sift,
    Bell,
    Reconcile,
    Amplify,
    Confirm,
    Done,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AbortReason {
    /// `|S| <= 2`.
    InsecureRegime,
    VerificationFailed,
    /// No correlation peak between the two time-tag streams.
    NoPeak,
    ProtocolViolation,
}

impl AbortReason {
    pub fn code(self) -> u8 {
        match self {
            AbortReason::InsecureRegime => 1,
            AbortReason::VerificationFailed => 2,
            AbortReason::NoPeak => 3,
            AbortReason::ProtocolViolation => 4,
        }
    }

    pub fn from_code(code: u8) -> Self {
        match code {
            1 => AbortReason::InsecureRegime,
            2 => AbortReason::VerificationFailed,
            3 => AbortReason::NoPeak,
            _ => AbortReason::ProtocolViolation,
        }
    }
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AbortReason::InsecureRegime => "insecure regime (|S| <= 2)",
            AbortReason::VerificationFailed => "key verification failed",
            AbortReason::NoPeak => "no coincidence peak between the streams",
            AbortReason::ProtocolViolation => "protocol violation",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session aborted: {reason}{}", detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default())]
    Aborted { reason: AbortReason, detail: Option<String> },
    #[error("peer disconnected")]
    PeerDisconnected,
    #[error("timed out waiting for the peer")]
    Timeout,
    #[error(transparent)]
    Frame(FrameError),
}

impl From<FrameError> for SessionError {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::Closed => SessionError::PeerDisconnected,
            FrameError::Io(io)
                if matches!(io.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
            {
                SessionError::Timeout
            }
            FrameError::Io(io)
                if matches!(
                    io.kind(),
                    std::io::ErrorKind::BrokenPipe
                        | std::io::ErrorKind::ConnectionReset
                        | std::io::ErrorKind::ConnectionAborted
                        | std::io::ErrorKind::UnexpectedEof
                ) =>
            {
                SessionError::PeerDisconnected
            }
            other => SessionError::Frame(other),
        }
    }
}

/// Per-block summary, identical on both sides once the block completes.
///
/// `s_value` is the magnitude of the CHSH combination. Blocks aborted for
/// `|S| <= 2` carry `qber = NaN`, `i_eve = 1` and no key.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BlockStats {
    pub block_index: u32,
    pub t_start: f64,
    pub t_end: f64,
    pub coincidence_count: u64,
    pub accidental_count: u64,
    pub qber: f64,
    pub s_value: f64,
    pub s_stderr: f64,
    pub leak_ec: u64,
    pub i_eve: f64,
    pub final_bits: u64,
}

impl BlockStats {
    pub const ENCODED_LEN: usize = 84;

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut p = Vec::with_capacity(Self::ENCODED_LEN);
        p.extend_from_slice(&self.block_index.to_le_bytes());
        for v in [self.t_start, self.t_end] {
            p.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        p.extend_from_slice(&self.coincidence_count.to_le_bytes());
        p.extend_from_slice(&self.accidental_count.to_le_bytes());
        for v in [self.qber, self.s_value, self.s_stderr] {
            p.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        p.extend_from_slice(&self.leak_ec.to_le_bytes());
        p.extend_from_slice(&self.i_eve.to_bits().to_le_bytes());
        p.extend_from_slice(&self.final_bits.to_le_bytes());
        p
    }

    pub fn decode(payload: &[u8]) -> Result<Self, FrameError> {
        let mut r = Reader::new(payload);
        let s = Self {
            block_index: r.u32()?,
            t_start: r.f64()?,
            t_end: r.f64()?,
            coincidence_count: r.u64()?,
            accidental_count: r.u64()?,
            qber: r.f64()?,
            s_value: r.f64()?,
            s_stderr: r.f64()?,
            leak_ec: r.u64()?,
            i_eve: r.f64()?,
            final_bits: r.u64()?,
        };
        r.finish()?;
        Ok(s)
    }

    /// Field-for-field equality including NaNs.
    pub fn same_as(&self, other: &Self) -> bool {
        self.encode() == other.encode()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SessionConfig {
    pub window: WindowConfig,
    /// Reconciled key bits per block.
    pub block_min_key_bits: usize,
    /// Fraction of the first block disclosed to estimate the QBER.
    pub qber_sample_fraction: f64,
    pub cascade: CascadeParams,
    pub finite_key: FiniteKeyPolicy,
    /// Length of one `TIMETAG_BATCH` window on Bob's clock.
    pub batch_seconds: f64,
    /// Seeds Alice's public randomness (sample positions, shuffle and hash seeds).
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            block_min_key_bits: 10_000,
            qber_sample_fraction: 0.02,
            cascade: CascadeParams::default(),
            finite_key: FiniteKeyPolicy::default(),
            batch_seconds: 1.0,
            seed: 1,
        }
    }
}

/// A protocol endpoint.
pub trait Endpoint: Send {
    fn role(&self) -> Role;
    fn phase(&self) -> Phase;
    /// Frames to send before anything is received.
    fn start(&mut self) -> Vec<Frame>;
    /// Consumes one incoming frame. Illegal frames move the session to
    /// [`Phase::Aborted`] with [`AbortReason::ProtocolViolation`].
    fn advance(&mut self, frame: Frame) -> Vec<Frame>;
    fn abort(&self) -> Option<(AbortReason, Option<String>)>;
    /// Blocks completed so far, plus an aborted block if any.
    fn block_stats(&self) -> &[BlockStats];
    /// Concatenated final keys of the confirmed blocks.
    fn final_key(&self) -> &BitString;

    fn is_finished(&self) -> bool {
        matches!(self.phase(), Phase::Done | Phase::Aborted)
    }
}
