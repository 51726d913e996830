//! State shared by both endpoints.

use crate::bits::BitString;
use crate::cascade::verify_keys;
use crate::privamp::{secret_fraction, PrivampError, SecurityEstimate};
use crate::sifting::{chsh_value, BellEstimate, CoincidenceCounts};
use crate::timetag::{TimeTag, TICK_NS};

use super::frame::{Frame, FrameType};
use super::messages::Hello;
use super::{AbortReason, BlockStats, Role, SessionConfig, TagSource};

/// An abort decided while handling a frame.
#[derive(Debug)]
pub(crate) struct Fail {
    pub reason: AbortReason,
    pub detail: String,
}

impl Fail {
    pub fn violation(detail: impl Into<String>) -> Self {
        Self {
            reason: AbortReason::ProtocolViolation,
            detail: detail.into(),
        }
    }
}

impl From<super::FrameError> for Fail {
    fn from(e: super::FrameError) -> Self {
        Fail::violation(e.to_string())
    }
}

pub(crate) fn abort_frame(reason: AbortReason) -> Frame {
    Frame::new(FrameType::Abort, vec![reason.code()])
}

pub(crate) fn hello(cfg: &SessionConfig, role: Role) -> Hello {
    Hello {
        role: role.code(),
        block_min_key_bits: cfg.block_min_key_bits as u32,
        cascade_passes: cfg.cascade.passes as u8,
        half_window_ticks: cfg.window.half_window_ticks() as u32,
    }
}

/// Checks the peer's HELLO against our own settings.
pub(crate) fn check_hello(cfg: &SessionConfig, own: Role, payload: &[u8]) -> Result<(), Fail> {
    let peer = Hello::parse(payload)?;
    let expected_role = match own {
        Role::Alice => Role::Bob,
        Role::Bob => Role::Alice,
    };
    let mine = hello(cfg, expected_role);
    if peer != mine {
        return Err(Fail::violation(format!("incompatible session parameters {peer:?}")));
    }
    Ok(())
}

pub(crate) fn window_ticks(cfg: &SessionConfig) -> u64 {
    ((cfg.batch_seconds * 1e9 / TICK_NS).round() as u64).max(1)
}

/// End of the batch window holding `tick`.
pub(crate) fn window_end(tick: u64, window: u64) -> u64 {
    (tick / window + 1) * window
}

pub(crate) fn ticks_to_s(ticks: u64) -> f64 {
    ticks as f64 / (1e9 / TICK_NS)
}

/// Bob's detectors reduced to the basis (`1'/2'` to `1'`, `3'/4'` to `3'`).
pub(crate) fn basis_only(detector: u8) -> u8 {
    if detector <= 2 {
        1
    } else {
        3
    }
}

/// Buffered, sorted view over a chunked tag source.
pub(crate) struct TagBuffer {
    source: TagSource,
    exhausted: bool,
    pub tags: Vec<TimeTag>,
}

impl TagBuffer {
    pub fn new(source: TagSource) -> Self {
        Self {
            source,
            exhausted: false,
            tags: Vec::new(),
        }
    }

    /// Pulls one more chunk; false once the source is exhausted.
    pub fn pull(&mut self) -> bool {
        if self.exhausted {
            return false;
        }
        match self.source.next() {
            Some(chunk) => {
                let resort = matches!((self.tags.last(), chunk.first()), (Some(a), Some(b)) if b < a);
                self.tags.extend(chunk);
                if resort {
                    self.tags.sort_unstable();
                }
                true
            }
            None => {
                self.exhausted = true;
                false
            }
        }
    }

    /// Pulls until the buffer holds a tag at or beyond `tick`.
    pub fn fill_past(&mut self, tick: i128) {
        while self.tags.last().is_none_or(|t| (t.tick as i128) < tick) && self.pull() {}
    }

    /// Removes and returns all tags before `tick`.
    pub fn take_before(&mut self, tick: i128) -> Vec<TimeTag> {
        let idx = self.tags.partition_point(|t| (t.tick as i128) < tick);
        self.tags.drain(..idx).collect()
    }
}

/// Material collected for the block being built.
#[derive(Debug, Default)]
pub(crate) struct Block {
    pub index: u32,
    pub t_start: Option<f64>,
    pub t_end: f64,
    pub coincidences: u64,
    pub accidentals: u64,
    /// Own raw key bits in announcement order.
    pub key: BitString,
    /// Own detectors of the Bell-class records.
    pub bell: Vec<u8>,
    pub estimate: Option<BellEstimate>,
}

impl Block {
    pub fn new(index: u32) -> Self {
        Self {
            index,
            ..Default::default()
        }
    }

    pub fn add_window(&mut self, start: u64, end: u64) {
        self.t_start.get_or_insert(ticks_to_s(start));
        self.t_end = ticks_to_s(end);
    }

    pub fn base_stats(&self) -> BlockStats {
        let (s_value, s_stderr) = self
            .estimate
            .map_or((f64::NAN, f64::NAN), |e| (e.s_value.abs(), e.standard_error));
        BlockStats {
            block_index: self.index,
            t_start: self.t_start.unwrap_or(0.0),
            t_end: self.t_end,
            coincidence_count: self.coincidences,
            accidental_count: self.accidentals,
            qber: f64::NAN,
            s_value,
            s_stderr,
            leak_ec: 0,
            i_eve: 1.0,
            final_bits: 0,
        }
    }
}

/// Raw key bits needed to close a block. The first block also pays for
/// the disclosed QBER sample.
pub(crate) fn key_target(cfg: &SessionConfig, first: bool) -> usize {
    if first && cfg.qber_sample_fraction > 0.0 {
        (cfg.block_min_key_bits as f64 / (1.0 - cfg.qber_sample_fraction)).ceil() as usize
    } else {
        cfg.block_min_key_bits
    }
}

pub(crate) fn sample_size(cfg: &SessionConfig, n: usize) -> usize {
    ((cfg.qber_sample_fraction * n as f64).ceil() as usize).min(n.saturating_sub(1))
}

/// `S` from the paired Bell-class detector reveals.
pub(crate) fn evaluate_bell(alice: &[u8], bob: &[u8]) -> Result<BellEstimate, Fail> {
    if alice.len() != bob.len() {
        return Err(Fail::violation("Bell reveal length differs"));
    }
    let mut counts = CoincidenceCounts::default();
    for (&a, &b) in alice.iter().zip(bob) {
        if a < 3 {
            return Err(Fail::violation("key-basis detector in Bell reveal"));
        }
        counts.add(a, b).map_err(|e| Fail::violation(e.to_string()))?;
    }
    chsh_value(&counts).map_err(|e| Fail {
        reason: AbortReason::InsecureRegime,
        detail: e.to_string(),
    })
}

pub(crate) fn is_insecure(est: &BellEstimate) -> bool {
    est.s_value.is_nan() || est.s_value.abs() <= 2.0
}

pub(crate) fn security(cfg: &SessionConfig, n: usize, leak: u64, s_abs: f64) -> Result<SecurityEstimate, Fail> {
    secret_fraction(n as u64, leak, s_abs, cfg.finite_key).map_err(|e| match e {
        PrivampError::InsecureRegime { .. } => Fail {
            reason: AbortReason::InsecureRegime,
            detail: e.to_string(),
        },
        other => Fail::violation(other.to_string()),
    })
}

/// Drops the disclosed sample positions (sorted, unique) from a key.
pub(crate) fn remove_positions(bits: &BitString, positions: &[u32]) -> BitString {
    let mut skip = positions.iter().peekable();
    let mut out = BitString::new();
    for (i, b) in bits.iter().enumerate() {
        if skip.peek().is_some_and(|&&p| p as usize == i) {
            skip.next();
        } else {
            out.push(b);
        }
    }
    out
}

pub(crate) fn confirm_tag(key: &BitString, shuffle_seed: u64) -> u64 {
    verify_keys(key, 64, shuffle_seed ^ 0x00C0_FFEE_C0FF_EE00)
}
