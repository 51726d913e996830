//! Sifting: coincidence classes, CHSH estimation and raw key extraction.

use std::ops::AddAssign;

use thiserror::Error;

use crate::bits::BitString;
use crate::physics::{Setting, SettingGeometry, Side};
use crate::timetag::CoincidenceRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SiftError {
    #[error("invalid detector pair ({alice}, {bob}')")]
    InvalidDetector { alice: u8, bob: u8 },
    #[error("no coincidences for {0:?}")]
    EmptyTerm(CorrelationTerm),
    #[error("key length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty key")]
    EmptyKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoincidenceClass {
    Key,
    Bell,
    Discard,
}

impl CoincidenceClass {
    pub fn code(self) -> u8 {
        match self {
            CoincidenceClass::Key => 0,
            CoincidenceClass::Bell => 1,
            CoincidenceClass::Discard => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(CoincidenceClass::Key),
            1 => Some(CoincidenceClass::Bell),
            2 => Some(CoincidenceClass::Discard),
            _ => None,
        }
    }
}

/// `(1,2) x (1',2')` is key, `(3..6) x any` is Bell, `(1,2) x (3',4')` is
/// discarded.
pub fn classify(alice_detector: u8, bob_detector: u8) -> Result<CoincidenceClass, SiftError> {
    let invalid = || SiftError::InvalidDetector {
        alice: alice_detector,
        bob: bob_detector,
    };
    let (a, _) = SettingGeometry::decode(Side::Alice, alice_detector).ok_or_else(invalid)?;
    let (b, _) = SettingGeometry::decode(Side::Bob, bob_detector).ok_or_else(invalid)?;
    Ok(match (a, b) {
        (Setting::AK, Setting::B0) => CoincidenceClass::Key,
        (Setting::AK, _) => CoincidenceClass::Discard,
        _ => CoincidenceClass::Bell,
    })
}

pub fn classify_record(record: &CoincidenceRecord) -> Result<CoincidenceClass, SiftError> {
    classify(record.alice_detector, record.bob_detector)
}

/// Coincidence counts `n[i][j]` for Alice detector `i+1`, Bob detector `j+1`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CoincidenceCounts {
    pub n: [[u64; 4]; 6],
}

impl CoincidenceCounts {
    pub fn add(&mut self, alice_detector: u8, bob_detector: u8) -> Result<(), SiftError> {
        if !Side::Alice.is_valid_detector(alice_detector) || !Side::Bob.is_valid_detector(bob_detector) {
            return Err(SiftError::InvalidDetector {
                alice: alice_detector,
                bob: bob_detector,
            });
        }
        self.n[alice_detector as usize - 1][bob_detector as usize - 1] += 1;
        Ok(())
    }

    pub fn get(&self, alice_detector: u8, bob_detector: u8) -> u64 {
        self.n[alice_detector as usize - 1][bob_detector as usize - 1]
    }

    pub fn total(&self) -> u64 {
        self.n.iter().flatten().sum()
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a CoincidenceRecord>) -> Result<Self, SiftError> {
        let mut c = Self::default();
        for r in records {
            c.add(r.alice_detector, r.bob_detector)?;
        }
        Ok(c)
    }

    fn rates(&self) -> [[f64; 4]; 6] {
        self.n.map(|row| row.map(|v| v as f64))
    }
}

impl AddAssign for CoincidenceCounts {
    fn add_assign(&mut self, rhs: Self) {
        for (row, other) in self.n.iter_mut().zip(rhs.n) {
            for (v, o) in row.iter_mut().zip(other) {
                *v += o;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CorrelationTerm {
    A0B0,
    A0B1,
    A1B0,
    A1B1,
}

impl CorrelationTerm {
    pub const ALL: [CorrelationTerm; 4] = [
        CorrelationTerm::A0B0,
        CorrelationTerm::A0B1,
        CorrelationTerm::A1B0,
        CorrelationTerm::A1B1,
    ];

    pub fn settings(self) -> (Setting, Setting) {
        match self {
            CorrelationTerm::A0B0 => (Setting::A0, Setting::B0),
            CorrelationTerm::A0B1 => (Setting::A0, Setting::B1),
            CorrelationTerm::A1B0 => (Setting::A1, Setting::B0),
            CorrelationTerm::A1B1 => (Setting::A1, Setting::B1),
        }
    }

    /// Sign of the term in `S`.
    pub fn chsh_sign(self) -> f64 {
        if self == CorrelationTerm::A1B1 {
            -1.0
        } else {
            1.0
        }
    }

    /// The four `(alice, bob, sign)` detector combinations of the term.
    fn quadruple(self) -> [(u8, u8, f64); 4] {
        use crate::physics::Outcome::{Minus, Plus};
        let (sa, sb) = self.settings();
        let mut out = [(0, 0, 0.0); 4];
        let mut k = 0;
        for oa in [Plus, Minus] {
            for ob in [Plus, Minus] {
                out[k] = (
                    SettingGeometry::detector(sa, oa),
                    SettingGeometry::detector(sb, ob),
                    (oa.sign() * ob.sign()) as f64,
                );
                k += 1;
            }
        }
        out
    }
}

/// `(sum of agreeing-sign counts - disagreeing) / total` over a term's
/// detector quadruple, for real-valued weights.
pub fn correlation_from_rates(rates: &[[f64; 4]; 6], term: CorrelationTerm) -> Result<(f64, f64), SiftError> {
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b, sign) in term.quadruple() {
        let v = rates[a as usize - 1][b as usize - 1];
        num += sign * v;
        den += v;
    }
    if den <= 0.0 {
        return Err(SiftError::EmptyTerm(term));
    }
    Ok((num / den, den))
}

pub fn correlation_coefficient(counts: &CoincidenceCounts, term: CorrelationTerm) -> Result<f64, SiftError> {
    correlation_from_rates(&counts.rates(), term).map(|(e, _)| e)
}

/// `S` from real-valued rates, e.g. analytic expectations.
pub fn chsh_from_rates(rates: &[[f64; 4]; 6]) -> Result<f64, SiftError> {
    CorrelationTerm::ALL
        .iter()
        .map(|&t| correlation_from_rates(rates, t).map(|(e, _)| t.chsh_sign() * e))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BellEstimate {
    pub e00: f64,
    pub e01: f64,
    pub e10: f64,
    pub e11: f64,
    pub s_value: f64,
    pub standard_error: f64,
    /// Coincidences behind each term, in `E00, E01, E10, E11` order.
    pub totals: [u64; 4],
}

/// `S = E(a0,b0) + E(a0,b1) + E(a1,b0) - E(a1,b1)` with a binomial standard
/// error per term, combined in quadrature.
pub fn chsh_value(counts: &CoincidenceCounts) -> Result<BellEstimate, SiftError> {
    let rates = counts.rates();
    let mut e = [0.0; 4];
    let mut totals = [0u64; 4];
    let mut var = 0.0;
    for (k, term) in CorrelationTerm::ALL.into_iter().enumerate() {
        let (value, n) = correlation_from_rates(&rates, term)?;
        e[k] = value;
        totals[k] = n as u64;
        var += (1.0 - value * value).max(0.0) / n;
    }
    Ok(BellEstimate {
        e00: e[0],
        e01: e[1],
        e10: e[2],
        e11: e[3],
        s_value: e[0] + e[1] + e[2] - e[3],
        standard_error: var.sqrt(),
        totals,
    })
}

/// Detector 1 is bit 0, detector 2 is bit 1.
pub fn alice_key_bit(detector: u8) -> Option<bool> {
    match detector {
        1 => Some(false),
        2 => Some(true),
        _ => None,
    }
}

/// Bob inverts his result so that anti-correlated clicks give equal bits:
/// detector 2' is bit 0, 1' is bit 1.
pub fn bob_key_bit(detector: u8) -> Option<bool> {
    match detector {
        2 => Some(false),
        1 => Some(true),
        _ => None,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawKeyBlock {
    pub alice_bits: BitString,
    pub bob_bits: BitString,
    /// Positions of the contributing records in the input slice.
    pub source_indices: Vec<usize>,
}

/// Key bits from the key-class records; other classes are skipped.
pub fn extract_raw_key(records: &[CoincidenceRecord]) -> RawKeyBlock {
    let mut out = RawKeyBlock::default();
    for (idx, r) in records.iter().enumerate() {
        if let (Some(a), Some(b)) = (alice_key_bit(r.alice_detector), bob_key_bit(r.bob_detector)) {
            out.alice_bits.push(a);
            out.bob_bits.push(b);
            out.source_indices.push(idx);
        }
    }
    out
}

pub fn qber(alice_bits: &BitString, bob_bits: &BitString) -> Result<f64, SiftError> {
    if alice_bits.len() != bob_bits.len() {
        return Err(SiftError::LengthMismatch(alice_bits.len(), bob_bits.len()));
    }
    if alice_bits.is_empty() {
        return Err(SiftError::EmptyKey);
    }
    Ok(alice_bits.hamming_distance(bob_bits) as f64 / alice_bits.len() as f64)
}
