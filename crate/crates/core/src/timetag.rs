//! Time tags, clock-offset recovery and coincidence identification.
//!
//! Ticks are 125 ps. Delays are signed tick counts meaning "Bob's clock
//! minus Alice's clock" for the same pair: a Bob tag at tick `b` is compared
//! against Alice ticks near `b - delay`.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::physics::Side;

pub const TICK_NS: f64 = 0.125;

pub fn ns_to_ticks(ns: f64) -> i64 {
    (ns / TICK_NS).round() as i64
}

pub fn ticks_to_seconds(ticks: u64) -> f64 {
    ticks as f64 * TICK_NS * 1e-9
}

/// One detection event. Ordering is by tick, then detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeTag {
    pub tick: u64,
    pub detector: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoincidenceRecord {
    pub alice_index: usize,
    pub bob_index: usize,
    pub alice_detector: u8,
    pub bob_detector: u8,
    pub alice_tick: u64,
    pub bob_tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub coincidence_window: f64,
    pub accidental_offset: f64,
    pub correlation_bin: f64,
    pub search_span_us: f64,
    /// Minimum peak-to-background ratio accepted by [`find_delay`].
    pub min_confidence: f64,
    /// Minimum number of events in the correlation peak.
    pub min_peak_counts: u64,
    /// Alice tags used for the coarse correlation pass.
    pub coarse_sample: usize,
    /// Alice tags used for the fine pass.
    pub fine_sample: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            coincidence_window: 3.75,
            accidental_offset: 20.0,
            correlation_bin: 32.0,
            search_span_us: 1000.0,
            min_confidence: 5.0,
            min_peak_counts: 16,
            coarse_sample: 20_000,
            fine_sample: 200_000,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), TimingError> {
        let ok = self.coincidence_window > 0.0
            && self.accidental_offset > self.coincidence_window
            && self.correlation_bin >= TICK_NS
            && self.search_span_us > 0.0
            && self.min_confidence > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TimingError::InvalidConfig)
        }
    }

    /// Largest accepted `|dt|` in ticks.
    pub fn half_window_ticks(&self) -> i64 {
        ns_to_ticks(self.coincidence_window) / 2
    }

    pub fn accidental_offset_ticks(&self) -> i64 {
        ns_to_ticks(self.accidental_offset)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimingError {
    #[error("cannot correlate an empty stream")]
    EmptyStream,
    #[error("no correlation peak (peak/background = {confidence:.2}, {peak} events)")]
    NoPeak { confidence: f64, peak: u64 },
    #[error("invalid window configuration")]
    InvalidConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayEstimate {
    pub delay_ticks: i64,
    /// Coarse peak height over the mean off-peak bin height.
    pub confidence: f64,
    pub peak_counts: u64,
}

/// Calls `f(alice_index, bob_index, dt)` for every Bob tag whose
/// delay-corrected time lies within `[lo, hi]` ticks of an Alice tag, with
/// `dt = bob - delay - alice`.
fn for_each_in_range(
    alice: &[TimeTag],
    bob: &[TimeTag],
    delay: i64,
    lo: i64,
    hi: i64,
    mut f: impl FnMut(usize, usize, i64),
) {
    let mut start = 0usize;
    for (i, a) in alice.iter().enumerate() {
        let a = a.tick as i128;
        let corrected = |j: usize| bob[j].tick as i128 - delay as i128;
        while start < bob.len() && corrected(start) - a < lo as i128 {
            start += 1;
        }
        let mut j = start;
        while j < bob.len() {
            let dt = corrected(j) - a;
            if dt > hi as i128 {
                break;
            }
            f(i, j, dt as i64);
            j += 1;
        }
    }
}

/// Recovers Bob's clock offset by a coarse histogram of time differences
/// over `±search_span`, refined to tick resolution around the peak.
pub fn find_delay(alice: &[TimeTag], bob: &[TimeTag], cfg: &WindowConfig) -> Result<DelayEstimate, TimingError> {
    cfg.validate()?;
    if alice.is_empty() || bob.is_empty() {
        return Err(TimingError::EmptyStream);
    }
    let bin = ns_to_ticks(cfg.correlation_bin).max(1);
    let span = ns_to_ticks(cfg.search_span_us * 1000.0);
    let k = (span + bin - 1) / bin;
    let nbins = (2 * k + 1) as usize;

    let coarse_alice = &alice[..alice.len().min(cfg.coarse_sample)];
    let mut hist = vec![0u64; nbins];
    let reach = k * bin + bin / 2;
    for_each_in_range(coarse_alice, bob, 0, -reach, reach, |_, _, dt| {
        let b = (dt as f64 / bin as f64).round() as i64;
        if (-k..=k).contains(&b) {
            hist[(b + k) as usize] += 1;
        }
    });

    let (peak_bin, &peak) = hist
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.cmp(b).then(ib.cmp(ia)))
        .expect("non-empty histogram");
    let (off_sum, off_n) = hist
        .iter()
        .enumerate()
        .filter(|(i, _)| i.abs_diff(peak_bin) > 1)
        .fold((0u64, 0u64), |(s, n), (_, &c)| (s + c, n + 1));
    let background = if off_n > 0 { off_sum as f64 / off_n as f64 } else { 0.0 };
    let confidence = peak as f64 / background.max(1.0);
    if peak < cfg.min_peak_counts || confidence < cfg.min_confidence {
        return Err(TimingError::NoPeak { confidence, peak });
    }

    // Fine pass: tick-resolution differences within two bins of the peak.
    let center = (peak_bin as i64 - k) * bin;
    let fine_alice = &alice[..alice.len().min(cfg.fine_sample)];
    let mut diffs = Vec::new();
    for_each_in_range(fine_alice, bob, center, -2 * bin, 2 * bin, |_, _, dt| {
        diffs.push(center + dt)
    });
    diffs.sort_unstable();
    let half = cfg.half_window_ticks().max(1);
    // Window of width 2*half holding the most differences.
    let (mut best_lo, mut best_count, mut hi) = (0usize, 0usize, 0usize);
    for lo in 0..diffs.len() {
        while hi < diffs.len() && diffs[hi] - diffs[lo] <= 2 * half {
            hi += 1;
        }
        if hi - lo > best_count {
            best_count = hi - lo;
            best_lo = lo;
        }
    }
    let mean = |lo: i64, hi: i64| {
        let sel: Vec<i64> = diffs.iter().copied().filter(|&d| d >= lo && d <= hi).collect();
        if sel.is_empty() {
            None
        } else {
            Some(sel.iter().map(|&d| d as f64).sum::<f64>() / sel.len() as f64)
        }
    };
    let lo = diffs[best_lo];
    let mut estimate = mean(lo, lo + 2 * half).unwrap_or(center as f64);
    for _ in 0..3 {
        let c = estimate.round() as i64;
        estimate = mean(c - half, c + half).unwrap_or(estimate);
    }
    Ok(DelayEstimate {
        delay_ticks: estimate.round() as i64,
        confidence,
        peak_counts: peak,
    })
}

/// Pairs tags whose delay-corrected times differ by at most half the
/// window, each tag used at most once and closer pairs taking precedence.
///
/// Records are returned in Alice-index order.
pub fn match_coincidences(
    alice: &[TimeTag],
    bob: &[TimeTag],
    delay: i64,
    cfg: &WindowConfig,
) -> Vec<CoincidenceRecord> {
    match_with_half_window(alice, bob, delay, cfg.half_window_ticks())
}

pub fn match_with_half_window(
    alice: &[TimeTag],
    bob: &[TimeTag],
    delay: i64,
    half: i64,
) -> Vec<CoincidenceRecord> {
    // (|dt|, alice + corrected bob, i, j); the second key breaks ties
    // toward the earlier pair and is invariant under swapping the streams.
    let mut candidates: Vec<(i64, i128, usize, usize)> = Vec::new();
    for_each_in_range(alice, bob, delay, -half, half, |i, j, dt| {
        let sum = alice[i].tick as i128 + bob[j].tick as i128 - delay as i128;
        candidates.push((dt.abs(), sum, i, j));
    });
    // Candidates that do not compete for a tag need no ordering.
    candidates.sort_unstable();
    let mut alice_used = vec![false; alice.len()];
    let mut bob_used = vec![false; bob.len()];
    let mut out = Vec::new();
    for (_, _, i, j) in candidates {
        if alice_used[i] || bob_used[j] {
            continue;
        }
        alice_used[i] = true;
        bob_used[j] = true;
        out.push(CoincidenceRecord {
            alice_index: i,
            bob_index: j,
            alice_detector: alice[i].detector,
            bob_detector: bob[j].detector,
            alice_tick: alice[i].tick,
            bob_tick: bob[j].tick,
        });
    }
    out.sort_unstable_by_key(|r| (r.alice_index, r.bob_index));
    out
}

/// Coincidences in an equally wide window displaced by the accidental offset.
pub fn count_accidentals(alice: &[TimeTag], bob: &[TimeTag], delay: i64, cfg: &WindowConfig) -> u64 {
    match_coincidences(alice, bob, delay + cfg.accidental_offset_ticks(), cfg).len() as u64
}

pub const TAG_FILE_MAGIC: &[u8; 4] = b"QKDT";
pub const TAG_FILE_VERSION: u8 = 1;
pub const TAG_RECORD_LEN: usize = 9;

#[derive(Debug, Error)]
pub enum TagFileError {
    #[error("bad magic, not a time-tag file")]
    BadMagic,
    #[error("unsupported time-tag file version {0}")]
    UnsupportedVersion(u8),
    #[error("invalid side byte {0}")]
    BadSide(u8),
    #[error("truncated record at byte {0}")]
    Truncated(usize),
    #[error("detector id {detector} invalid for {side:?}")]
    InvalidDetector { side: Side, detector: u8 },
    #[error("tags are not sorted by tick")]
    Unsorted,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode_records(tags: &[TimeTag]) -> Vec<u8> {
    let mut out = Vec::with_capacity(tags.len() * TAG_RECORD_LEN);
    for t in tags {
        out.extend_from_slice(&t.tick.to_le_bytes());
        out.push(t.detector);
    }
    out
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<TimeTag>, TagFileError> {
    if !bytes.len().is_multiple_of(TAG_RECORD_LEN) {
        return Err(TagFileError::Truncated(bytes.len() - bytes.len() % TAG_RECORD_LEN));
    }
    Ok(bytes
        .chunks_exact(TAG_RECORD_LEN)
        .map(|c| TimeTag {
            tick: u64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
            detector: c[8],
        })
        .collect())
}

pub fn write_tag_file<W: Write>(mut w: W, side: Side, tags: &[TimeTag]) -> io::Result<()> {
    w.write_all(TAG_FILE_MAGIC)?;
    w.write_all(&[
        TAG_FILE_VERSION,
        match side {
            Side::Alice => 0,
            Side::Bob => 1,
        },
    ])?;
    w.write_all(&encode_records(tags))?;
    w.flush()
}

pub fn read_tag_file<R: Read>(mut r: R) -> Result<(Side, Vec<TimeTag>), TagFileError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 6 || &bytes[..4] != TAG_FILE_MAGIC {
        return Err(TagFileError::BadMagic);
    }
    if bytes[4] != TAG_FILE_VERSION {
        return Err(TagFileError::UnsupportedVersion(bytes[4]));
    }
    let side = match bytes[5] {
        0 => Side::Alice,
        1 => Side::Bob,
        other => return Err(TagFileError::BadSide(other)),
    };
    let body = &bytes[6..];
    if body.len() % TAG_RECORD_LEN != 0 {
        return Err(TagFileError::Truncated(6 + body.len() - body.len() % TAG_RECORD_LEN));
    }
    let tags = decode_records(body)?;
    if let Some(t) = tags.iter().find(|t| !side.is_valid_detector(t.detector)) {
        return Err(TagFileError::InvalidDetector {
            side,
            detector: t.detector,
        });
    }
    if tags.windows(2).any(|w| w[0].tick > w[1].tick) {
        return Err(TagFileError::Unsorted);
    }
    Ok((side, tags))
}
