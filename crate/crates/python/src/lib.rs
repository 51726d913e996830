//! Python bindings for `qkd-core`.
//!
//! Bit strings go in as sequences of 0/1 integers and come back as `bytes`
//! holding one 0/1 value per bit.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use qkd_core::bits::BitString;
use qkd_core::cascade::{self, CascadeParams};
use qkd_core::experiment::{self, ExperimentConfig, ExperimentResult};
use qkd_core::physics::{self, AttackConfig, ChannelConfig, SettingGeometry, Side, StreamGenerator};
use qkd_core::privamp::{self, FiniteKeyPolicy, HashSeed};
use qkd_core::protocol::BlockStats as CoreBlockStats;
use qkd_core::sifting;
use qkd_core::timetag::{self, TimeTag, WindowConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_bits(bits: Vec<u8>) -> PyResult<BitString> {
    if bits.iter().any(|&b| b > 1) {
        return Err(PyValueError::new_err("bits must be 0 or 1"));
    }
    Ok(bits.into_iter().map(|b| b == 1).collect())
}

fn from_bits(bits: &BitString) -> Vec<u8> {
    bits.iter().map(u8::from).collect()
}

/// `(tick, detector)` pairs as exchanged with Python.
type RawTags = Vec<(u64, u8)>;

fn to_tags(tags: RawTags) -> Vec<TimeTag> {
    tags.into_iter().map(|(tick, detector)| TimeTag { tick, detector }).collect()
}

#[pyfunction]
fn binary_entropy(x: f64) -> PyResult<f64> {
    privamp::binary_entropy(x).map_err(value_err)
}

/// Eve's information per bit for a CHSH value; raises for `|S| <= 2`.
#[pyfunction]
fn eve_information(s: f64) -> PyResult<f64> {
    privamp::eve_information(s).map_err(value_err)
}

#[pyclass(get_all, frozen)]
#[derive(Clone)]
struct SecurityEstimate {
    n: u64,
    s_value: f64,
    i_eve: f64,
    leak_ec: u64,
    leak_ec_per_bit: f64,
    finite_deduction: u64,
    secret_fraction: f64,
    final_length: u64,
}

#[pymethods]
impl SecurityEstimate {
    fn __repr__(&self) -> String {
        format!(
            "SecurityEstimate(n={}, s_value={}, i_eve={:.6}, leak_ec={}, final_length={})",
            self.n, self.s_value, self.i_eve, self.leak_ec, self.final_length
        )
    }
}

#[pyfunction]
#[pyo3(signature = (n, leak_ec, s, deduction_bits=0, rate_multiplier=1.0))]
fn secret_fraction(n: u64, leak_ec: u64, s: f64, deduction_bits: u64, rate_multiplier: f64) -> PyResult<SecurityEstimate> {
    let policy = FiniteKeyPolicy {
        deduction_bits,
        rate_multiplier,
    };
    let e = privamp::secret_fraction(n, leak_ec, s, policy).map_err(value_err)?;
    Ok(SecurityEstimate {
        n: e.n,
        s_value: e.s_value,
        i_eve: e.i_eve,
        leak_ec: e.leak_ec,
        leak_ec_per_bit: e.leak_ec_per_bit,
        finite_deduction: e.finite_deduction,
        secret_fraction: e.secret_fraction,
        final_length: e.final_length,
    })
}

/// Toeplitz hash of `bits` to `m` bits; `seed` holds `len(bits) + m - 1` bits.
#[pyfunction]
fn toeplitz_hash(bits: Vec<u8>, seed: Vec<u8>, m: usize) -> PyResult<Vec<u8>> {
    let input = to_bits(bits)?;
    let seed = HashSeed::new(to_bits(seed)?, input.len(), m).map_err(value_err)?;
    Ok(from_bits(&privamp::toeplitz_hash(&input, &seed, m).map_err(value_err)?))
}

/// Ideal-model CHSH value for the given visibilities and attack.
#[pyfunction]
#[pyo3(signature = (visibility_hv=1.0, visibility_diag=1.0, intercept_fraction=0.0, attack_basis=0.0))]
fn analytic_chsh(visibility_hv: f64, visibility_diag: f64, intercept_fraction: f64, attack_basis: f64) -> PyResult<f64> {
    let channel = ChannelConfig {
        visibility_hv,
        visibility_diag,
        ..Default::default()
    };
    let attack = AttackConfig {
        intercept_fraction,
        attack_basis,
    };
    physics::analytic_chsh(&SettingGeometry::default(), &channel, &attack).map_err(value_err)
}

/// CHSH estimate from a 6x4 table of coincidence counts.
#[pyfunction]
fn chsh_from_counts(counts: [[u64; 4]; 6]) -> PyResult<(f64, f64)> {
    let c = sifting::CoincidenceCounts { n: counts };
    let est = sifting::chsh_value(&c).map_err(value_err)?;
    Ok((est.s_value, est.standard_error))
}

#[pyclass(get_all, frozen)]
#[derive(Clone)]
struct Reconciliation {
    corrected_bits: Vec<u8>,
    leaked_bits: u64,
    exchanged_messages: u64,
    verified: bool,
    corrections: u64,
}

/// In-process CASCADE between two bit lists.
#[pyfunction]
#[pyo3(signature = (alice_bits, bob_bits, qber_estimate, shuffle_seed=0, passes=4))]
fn reconcile(
    alice_bits: Vec<u8>,
    bob_bits: Vec<u8>,
    qber_estimate: f64,
    shuffle_seed: u64,
    passes: usize,
) -> PyResult<Reconciliation> {
    let params = CascadeParams {
        shuffle_seed,
        passes,
        ..Default::default()
    };
    let (_, bob) = cascade::reconcile(&to_bits(alice_bits)?, &to_bits(bob_bits)?, qber_estimate, params)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(Reconciliation {
        corrected_bits: from_bits(&bob.corrected_bits),
        leaked_bits: bob.leaked_bits,
        exchanged_messages: bob.exchanged_messages,
        verified: bob.verified,
        corrections: bob.corrections,
    })
}

/// Clock offset (ticks of 125 ps) between two `(tick, detector)` lists.
#[pyfunction]
fn find_delay(alice: RawTags, bob: RawTags) -> PyResult<(i64, f64)> {
    let est = timetag::find_delay(&to_tags(alice), &to_tags(bob), &WindowConfig::default()).map_err(value_err)?;
    Ok((est.delay_ticks, est.confidence))
}

/// Matched `(alice_index, bob_index)` pairs at the given delay.
#[pyfunction]
fn match_coincidences(alice: RawTags, bob: RawTags, delay: i64) -> Vec<(usize, usize)> {
    timetag::match_coincidences(&to_tags(alice), &to_tags(bob), delay, &WindowConfig::default())
        .into_iter()
        .map(|r| (r.alice_index, r.bob_index))
        .collect()
}

#[pyclass(frozen)]
struct Config {
    inner: ExperimentConfig,
}

#[pymethods]
impl Config {
    /// Parses flat `key = value` configuration text.
    #[new]
    #[pyo3(signature = (text=""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: experiment::parse_config(text).map_err(value_err)?,
        })
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.inner.channel.duration
    }

    #[getter]
    fn block_min_key_bits(&self) -> usize {
        self.inner.block_min_key_bits
    }

    /// Simulated `(tick, detector)` streams for Alice and Bob.
    fn simulate(&self) -> PyResult<(RawTags, RawTags)> {
        let g = StreamGenerator::new(self.inner.channel.clone(), self.inner.attack, self.inner.geometry).map_err(value_err)?;
        let side = |s| {
            let mut v: RawTags = g.side_segments(s).flatten().map(|t| (t.tick, t.detector)).collect();
            v.sort_unstable();
            v
        };
        Ok((side(Side::Alice), side(Side::Bob)))
    }

    /// Runs the full two-party protocol and returns the outcome.
    #[pyo3(signature = (seed=None))]
    fn run(&self, py: Python<'_>, seed: Option<u64>) -> PyResult<RunResult> {
        let mut cfg = self.inner.clone();
        if let Some(s) = seed {
            cfg.set_seed(s);
        }
        let result = py
            .detach(|| experiment::run_experiment(&cfg, None))
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(RunResult::from(result))
    }
}

#[pyclass(get_all, frozen)]
#[derive(Clone)]
struct BlockStats {
    block_index: u32,
    t_start: f64,
    t_end: f64,
    coincidence_count: u64,
    accidental_count: u64,
    qber: f64,
    s_value: f64,
    s_stderr: f64,
    leak_ec: u64,
    i_eve: f64,
    final_bits: u64,
}

impl From<&CoreBlockStats> for BlockStats {
    fn from(s: &CoreBlockStats) -> Self {
        Self {
            block_index: s.block_index,
            t_start: s.t_start,
            t_end: s.t_end,
            coincidence_count: s.coincidence_count,
            accidental_count: s.accidental_count,
            qber: s.qber,
            s_value: s.s_value,
            s_stderr: s.s_stderr,
            leak_ec: s.leak_ec,
            i_eve: s.i_eve,
            final_bits: s.final_bits,
        }
    }
}

#[pyclass(frozen)]
struct RunResult {
    #[pyo3(get)]
    exit_code: i32,
    #[pyo3(get)]
    message: Option<String>,
    #[pyo3(get)]
    blocks: Vec<BlockStats>,
    alice_key: Option<Vec<u8>>,
    bob_key: Option<Vec<u8>>,
}

impl From<ExperimentResult> for RunResult {
    fn from(r: ExperimentResult) -> Self {
        Self {
            exit_code: r.status.exit_code(),
            message: r.message,
            blocks: r.rows.iter().map(BlockStats::from).collect(),
            alice_key: r.alice_key.map(|k| k.to_bytes_msb()),
            bob_key: r.bob_key.map(|k| k.to_bytes_msb()),
        }
    }
}

#[pymethods]
impl RunResult {
    #[getter]
    fn alice_key<'py>(&self, py: Python<'py>) -> Option<Bound<'py, PyBytes>> {
        self.alice_key.as_deref().map(|k| PyBytes::new(py, k))
    }

    #[getter]
    fn bob_key<'py>(&self, py: Python<'py>) -> Option<Bound<'py, PyBytes>> {
        self.bob_key.as_deref().map(|k| PyBytes::new(py, k))
    }
}

#[pymodule]
pub fn qkd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TSIRELSON_BOUND", privamp::TSIRELSON_BOUND)?;
    m.add_function(wrap_pyfunction!(binary_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(eve_information, m)?)?;
    m.add_function(wrap_pyfunction!(secret_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(toeplitz_hash, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_chsh, m)?)?;
    m.add_function(wrap_pyfunction!(chsh_from_counts, m)?)?;
    m.add_function(wrap_pyfunction!(reconcile, m)?)?;
    m.add_function(wrap_pyfunction!(find_delay, m)?)?;
    m.add_function(wrap_pyfunction!(match_coincidences, m)?)?;
    m.add_class::<SecurityEstimate>()?;
    m.add_class::<Reconciliation>()?;
    m.add_class::<Config>()?;
    m.add_class::<BlockStats>()?;
    m.add_class::<RunResult>()?;
    Ok(())
}
