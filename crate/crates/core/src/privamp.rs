//! Eavesdropper information bound from the CHSH value, secret key length,
//! and Toeplitz hashing for privacy amplification.

use rand::Rng;
use thiserror::Error;

use crate::bits::BitString;

pub const TSIRELSON_BOUND: f64 = 2.0 * std::f64::consts::SQRT_2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivampError {
    #[error("probability {0} outside [0, 1]")]
    Domain(f64),
    #[error("|S| = {s} does not violate the CHSH bound; no secret key can be extracted")]
    InsecureRegime { s: f64 },
    #[error("block length must be positive")]
    EmptyBlock,
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
}

/// `h(x) = -x log2 x - (1-x) log2 (1-x)`, continuous at the endpoints.
pub fn binary_entropy(x: f64) -> Result<f64, PrivampError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(PrivampError::Domain(x));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(0.0);
    }
    Ok(-x * x.log2() - (1.0 - x) * (1.0 - x).log2())
}

/// Eve's information per raw bit as a function of the CHSH value.
///
/// Values of `|S|` above the Tsirelson bound are statistical excursions and
/// are clamped to it. At `|S| = 2` Eve knows everything (one bit per bit);
/// below that the formula is undefined. Key extraction additionally refuses
/// `|S| = 2`, see [`secret_fraction`].
pub fn eve_information(s_value: f64) -> Result<f64, PrivampError> {
    let s = s_value.abs();
    if !s.is_finite() || s < 2.0 {
        return Err(PrivampError::InsecureRegime { s: s_value });
    }
    let s = s.min(TSIRELSON_BOUND);
    let root = (s * s / 4.0 - 1.0).max(0.0).sqrt();
    let arg = ((1.0 + root) / 2.0).min(1.0);
    binary_entropy(arg)
}

/// Knobs for finite-size corrections. The defaults give the asymptotic key
/// length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteKeyPolicy {
    /// Bits subtracted from every block after compression.
    pub deduction_bits: u64,
    /// Multiplies the asymptotic secret length (1.0 = asymptotic).
    pub rate_multiplier: f64,
}

impl Default for FiniteKeyPolicy {
    fn default() -> Self {
        Self {
            deduction_bits: 0,
            rate_multiplier: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecurityEstimate {
    pub n: u64,
    pub s_value: f64,
    pub i_eve: f64,
    pub leak_ec: u64,
    pub leak_ec_per_bit: f64,
    pub finite_deduction: u64,
    pub secret_fraction: f64,
    pub final_length: u64,
}

/// Final key length for a reconciled block of `n` bits.
///
/// Every error is attributed to the adversary: the only deductions are the
/// CHSH-derived bound, the disclosed reconciliation bits and the finite-size
/// policy.
pub fn secret_fraction(
    n: u64,
    leak_ec: u64,
    s_value: f64,
    policy: FiniteKeyPolicy,
) -> Result<SecurityEstimate, PrivampError> {
    if n == 0 {
        return Err(PrivampError::EmptyBlock);
    }
    if s_value.abs() <= 2.0 {
        return Err(PrivampError::InsecureRegime { s: s_value });
    }
    let i_eve = eve_information(s_value)?;
    let asymptotic = n as f64 * (1.0 - i_eve) - leak_ec as f64;
    let scaled = (policy.rate_multiplier * asymptotic).floor() - policy.deduction_bits as f64;
    let final_length = if scaled > 0.0 { scaled as u64 } else { 0 };
    Ok(SecurityEstimate {
        n,
        s_value,
        i_eve,
        leak_ec,
        leak_ec_per_bit: leak_ec as f64 / n as f64,
        finite_deduction: policy.deduction_bits,
        secret_fraction: final_length as f64 / n as f64,
        final_length,
    })
}

/// Public seed of an `m x n` Toeplitz matrix over GF(2).
///
/// Bit layout: the first column `T[0..m][0]` followed by the first row
/// without its leading element, `T[0][1..n]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashSeed {
    bits: BitString,
    input_len: usize,
    output_len: usize,
}

impl HashSeed {
    pub fn new(bits: BitString, input_len: usize, output_len: usize) -> Result<Self, PrivampError> {
        if input_len == 0 {
            return Err(PrivampError::EmptyBlock);
        }
        if output_len > input_len {
            return Err(PrivampError::SizeMismatch(format!(
                "output length {output_len} exceeds input length {input_len}"
            )));
        }
        if bits.len() != input_len + output_len - 1 {
            return Err(PrivampError::SizeMismatch(format!(
                "seed has {} bits, expected {}",
                bits.len(),
                input_len + output_len - 1
            )));
        }
        Ok(Self {
            bits,
            input_len,
            output_len,
        })
    }

    pub fn random<R: Rng + ?Sized>(
        input_len: usize,
        output_len: usize,
        rng: &mut R,
    ) -> Result<Self, PrivampError> {
        let len = (input_len + output_len).saturating_sub(1);
        Self::new(BitString::random(len, rng), input_len, output_len)
    }

    pub fn from_column_and_row(column: &BitString, row: &BitString) -> Result<Self, PrivampError> {
        if column.is_empty() || row.is_empty() || column.get(0) != row.get(0) {
            return Err(PrivampError::SizeMismatch(
                "first column and first row must share their leading element".into(),
            ));
        }
        let mut bits = column.clone();
        for j in 1..row.len() {
            bits.push(row.get(j));
        }
        Self::new(bits, row.len(), column.len())
    }

    pub fn bits(&self) -> &BitString {
        &self.bits
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }
}

/// Multiplies `input` by the Toeplitz matrix described by `seed`, producing
/// `output_len` bits.
pub fn toeplitz_hash(
    input: &BitString,
    seed: &HashSeed,
    output_len: usize,
) -> Result<BitString, PrivampError> {
    if input.len() != seed.input_len || output_len != seed.output_len {
        return Err(PrivampError::SizeMismatch(format!(
            "input {} -> {} bits does not fit a {}x{} seed",
            input.len(),
            output_len,
            seed.output_len,
            seed.input_len
        )));
    }
    let m = output_len;
    // Row k of the matrix is a contiguous window of the reversed column
    // followed by the row tail, starting at m - 1 - k.
    let mut diag: BitString = (0..m).rev().map(|i| seed.bits.get(i)).collect();
    for i in m..seed.bits.len() {
        diag.push(seed.bits.get(i));
    }
    Ok((0..m)
        .map(|k| input.and_parity_at(&diag, m - 1 - k))
        .collect())
}
