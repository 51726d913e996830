//! Experiment runner: configuration, the two-endpoint run, CSV and key
//! files.
//!
//! Configuration is flat `key = value` text with `#` comments. Every key
//! is optional; an empty file gives the default run (a 60 s link with an
//! 18 kHz pair source, 3 dB loss on Bob's arm and visibilities that put
//! `|S|` near 2.5).
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `pair_rate` | 18000 | pairs/s leaving the source |
//! | `loss_db_bob` | 3.0 | loss on Bob's arm (dB) |
//! | `detector_efficiency` | 1.0 | |
//! | `visibility_hv`, `visibility_diag` | 0.92, 0.888 | |
//! | `background_rate` | 19000 | uncorrelated counts/s per detector |
//! | `jitter_sigma` | 0.5 | relative timing jitter (ns) |
//! | `bob_delay` | 12345 | Bob's clock offset (ns) |
//! | `duration` | 60 | simulated seconds |
//! | `rng_seed` | 1 | simulator seed |
//! | `intercept_fraction`, `attack_basis` | 0, 0 | intercept-resend attack |
//! | `coincidence_window` | 3.75 | ns |
//! | `accidental_offset` | 20 | ns |
//! | `correlation_bin`, `search_span_us`, `min_confidence` | 32, 1000, 5 | delay search |
//! | `block_min_key_bits` | 10000 | reconciled bits per block |
//! | `qber_sample_fraction` | 0.02 | first-block QBER sample |
//! | `cascade_passes` | 4 | |
//! | `finite_deduction_bits`, `rate_multiplier` | 0, 1.0 | finite-size knobs |
//! | `batch_seconds` | 1.0 | time-tag batch length |
//! | `session_seed` | `rng_seed` | Alice's public randomness |
//! | `transport` | `inproc` | `inproc` or `socket HOST:PORT` |
//! | `output` | none | CSV path |
//! | `keys_dir` | none | directory for `alice.key` / `bob.key` |
//! | `timeout_s` | 120 | read timeout per endpoint |

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::BitString;
use crate::cascade::CascadeParams;
use crate::physics::{AttackConfig, ChannelConfig, PhysicsError, SettingGeometry, Side, StreamGenerator};
use crate::privamp::FiniteKeyPolicy;
use crate::protocol::transport::{run_inproc, run_tcp, LinkOptions, SessionOutcome};
use crate::protocol::{AbortReason, AliceSession, BlockStats, BobSession, SessionConfig, SessionError, TagSource};
use crate::timetag::{read_tag_file, write_tag_file, TagFileError, TimeTag, WindowConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{field} out of range: {value}")]
    Range { field: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportKind {
    Inproc,
    Socket(String),
}

impl TransportKind {
    pub fn parse(s: &str) -> Option<Self> {
        let mut parts = s.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some("inproc"), None, None) => Some(TransportKind::Inproc),
            (Some("socket"), Some(addr), None) => Some(TransportKind::Socket(addr.to_string())),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub channel: ChannelConfig,
    pub attack: AttackConfig,
    pub geometry: SettingGeometry,
    pub window: WindowConfig,
    pub block_min_key_bits: usize,
    pub qber_sample_fraction: f64,
    pub cascade_passes: usize,
    pub finite_key: FiniteKeyPolicy,
    pub batch_seconds: f64,
    pub session_seed: u64,
    pub transport: TransportKind,
    pub output: Option<PathBuf>,
    pub keys_dir: Option<PathBuf>,
    pub timeout_s: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let channel = ChannelConfig::default();
        Self {
            session_seed: channel.rng_seed,
            channel,
            attack: AttackConfig::default(),
            geometry: SettingGeometry::default(),
            window: WindowConfig::default(),
            block_min_key_bits: 10_000,
            qber_sample_fraction: 0.02,
            cascade_passes: 4,
            finite_key: FiniteKeyPolicy::default(),
            batch_seconds: 1.0,
            transport: TransportKind::Inproc,
            output: None,
            keys_dir: None,
            timeout_s: 120.0,
        }
    }
}

fn range(field: &str, value: impl ToString) -> ConfigError {
    ConfigError::Range {
        field: field.to_string(),
        value: value.to_string(),
    }
}

impl ExperimentConfig {
    /// Both seeds at once, as `--seed` does.
    pub fn set_seed(&mut self, seed: u64) {
        self.channel.rng_seed = seed;
        self.session_seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.channel.validate().map_err(physics_range)?;
        self.attack.validate().map_err(physics_range)?;
        self.window.validate().map_err(|_| range("coincidence window settings", "invalid"))?;
        if self.block_min_key_bits < 1 {
            return Err(range("block_min_key_bits", self.block_min_key_bits));
        }
        if !(0.0..0.5).contains(&self.qber_sample_fraction) {
            return Err(range("qber_sample_fraction", self.qber_sample_fraction));
        }
        if !(1..=16).contains(&self.cascade_passes) {
            return Err(range("cascade_passes", self.cascade_passes));
        }
        if !(self.finite_key.rate_multiplier > 0.0 && self.finite_key.rate_multiplier <= 1.0) {
            return Err(range("rate_multiplier", self.finite_key.rate_multiplier));
        }
        if !(self.batch_seconds > 0.0 && self.batch_seconds.is_finite()) {
            return Err(range("batch_seconds", self.batch_seconds));
        }
        if self.timeout_s.is_nan() || self.timeout_s <= 0.0 {
            return Err(range("timeout_s", self.timeout_s));
        }
        Ok(())
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            window: self.window,
            block_min_key_bits: self.block_min_key_bits,
            qber_sample_fraction: self.qber_sample_fraction,
            cascade: CascadeParams {
                passes: self.cascade_passes,
                ..Default::default()
            },
            finite_key: self.finite_key,
            batch_seconds: self.batch_seconds,
            seed: self.session_seed,
        }
    }

    fn link_options(&self) -> LinkOptions {
        LinkOptions {
            timeout: Some(Duration::from_secs_f64(self.timeout_s)),
            record_transcripts: false,
        }
    }
}

fn physics_range(e: PhysicsError) -> ConfigError {
    match e {
        PhysicsError::Domain { field, value } => range(field, value),
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::default();
    let mut session_seed = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| ConfigError::Parse {
            line: line_no,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let float = || -> Result<f64, ConfigError> {
            let v: f64 = value.parse().map_err(|_| err(format!("`{value}` is not a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(range(key, value))
            }
        };
        let int = || -> Result<u64, ConfigError> {
            if value.starts_with('-') {
                return Err(range(key, value));
            }
            value.parse().map_err(|_| err(format!("`{value}` is not a non-negative integer")))
        };
        let c = &mut cfg.channel;
        match key {
            "pair_rate" => c.pair_rate = float()?,
            "loss_db_bob" => c.loss_db_bob = float()?,
            "detector_efficiency" => c.detector_efficiency = float()?,
            "visibility_hv" => c.visibility_hv = float()?,
            "visibility_diag" => c.visibility_diag = float()?,
            "background_rate" => c.background_rate = float()?,
            "jitter_sigma" => c.jitter_sigma = float()?,
            "bob_delay" => c.bob_delay = float()?,
            "duration" => c.duration = float()?,
            "rng_seed" => c.rng_seed = int()?,
            "intercept_fraction" => cfg.attack.intercept_fraction = float()?,
            "attack_basis" => cfg.attack.attack_basis = float()?,
            "coincidence_window" => cfg.window.coincidence_window = float()?,
            "accidental_offset" => cfg.window.accidental_offset = float()?,
            "correlation_bin" => cfg.window.correlation_bin = float()?,
            "search_span_us" => cfg.window.search_span_us = float()?,
            "min_confidence" => cfg.window.min_confidence = float()?,
            "block_min_key_bits" => cfg.block_min_key_bits = int()? as usize,
            "qber_sample_fraction" => cfg.qber_sample_fraction = float()?,
            "cascade_passes" => cfg.cascade_passes = int()? as usize,
            "finite_deduction_bits" => cfg.finite_key.deduction_bits = int()?,
            "rate_multiplier" => cfg.finite_key.rate_multiplier = float()?,
            "batch_seconds" => cfg.batch_seconds = float()?,
            "session_seed" => session_seed = Some(int()?),
            "timeout_s" => cfg.timeout_s = float()?,
            "transport" => {
                cfg.transport = TransportKind::parse(value)
                    .ok_or_else(|| err(format!("transport must be `inproc` or `socket HOST:PORT`, got `{value}`")))?
            }
            "output" => cfg.output = Some(PathBuf::from(value)),
            "keys_dir" => cfg.keys_dir = Some(PathBuf::from(value)),
            other => return Err(err(format!("unknown key `{other}`"))),
        }
    }
    cfg.session_seed = session_seed.unwrap_or(cfg.channel.rng_seed);
    cfg.validate()?;
    Ok(cfg)
}

/// How a run ended, with its process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Success,
    InsecureRegime,
    VerificationFailed,
    Transport,
    NoPeak,
    ProtocolViolation,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Success => 0,
            RunStatus::InsecureRegime => 2,
            RunStatus::VerificationFailed => 3,
            RunStatus::Transport => 4,
            RunStatus::NoPeak => 6,
            RunStatus::ProtocolViolation => 7,
        }
    }

    fn from_error(e: &SessionError) -> Self {
        match e {
            SessionError::Aborted { reason, .. } => match reason {
                AbortReason::InsecureRegime => RunStatus::InsecureRegime,
                AbortReason::VerificationFailed => RunStatus::VerificationFailed,
                AbortReason::NoPeak => RunStatus::NoPeak,
                AbortReason::ProtocolViolation => RunStatus::ProtocolViolation,
            },
            _ => RunStatus::Transport,
        }
    }
}

#[derive(Debug)]
pub struct ExperimentResult {
    pub status: RunStatus,
    /// Human-readable cause when the run did not succeed.
    pub message: Option<String>,
    pub rows: Vec<BlockStats>,
    /// Both keys are present only on success.
    pub alice_key: Option<BitString>,
    pub bob_key: Option<BitString>,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("time-tag file {path}: {source}")]
    TagFile { path: PathBuf, source: TagFileError },
    #[error("{path}: expected {expected:?} time tags, file holds {found:?}")]
    WrongSide { path: PathBuf, expected: Side, found: Side },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn merge(alice: SessionOutcome, bob: SessionOutcome) -> ExperimentResult {
    let (status, message) = match (&alice.result, &bob.result) {
        (Ok(()), Ok(())) => (RunStatus::Success, None),
        // A hang-up seen by one side is a consequence of the other's abort.
        (Err(SessionError::PeerDisconnected), Err(e @ SessionError::Aborted { .. })) | (Err(e), _) | (_, Err(e)) => {
            (RunStatus::from_error(e), Some(e.to_string()))
        }
    };
    let ok = status == RunStatus::Success && alice.final_key == bob.final_key;
    let (status, message) = if status == RunStatus::Success && !ok {
        (RunStatus::VerificationFailed, Some("final keys differ".to_string()))
    } else {
        (status, message)
    };
    ExperimentResult {
        status,
        message,
        rows: alice.stats,
        alice_key: if ok { alice.final_key } else { None },
        bob_key: if ok { bob.final_key } else { None },
    }
}

/// Runs both endpoints on the given sources with the configured transport.
pub fn run_sessions(cfg: &ExperimentConfig, alice: TagSource, bob: TagSource) -> Result<ExperimentResult, ExperimentError> {
    let scfg = cfg.session_config();
    let a = AliceSession::new(scfg, alice);
    let b = BobSession::new(scfg, bob);
    let (ao, bo) = match &cfg.transport {
        TransportKind::Inproc => run_inproc(a, b, cfg.link_options())?,
        TransportKind::Socket(addr) => run_tcp(addr.as_str(), a, b, cfg.link_options())?,
    };
    Ok(merge(ao, bo))
}

/// Simulates the configured link and runs the protocol over it. With
/// `record_dir`, both sides' time tags are also written there as
/// `alice.qkdt` and `bob.qkdt` for later replay.
pub fn run_experiment(cfg: &ExperimentConfig, record_dir: Option<&Path>) -> Result<ExperimentResult, ExperimentError> {
    cfg.validate()?;
    let generator = StreamGenerator::new(cfg.channel.clone(), cfg.attack, cfg.geometry).map_err(physics_range)?;
    if let Some(dir) = record_dir {
        std::fs::create_dir_all(dir)?;
        for (side, name) in [(Side::Alice, "alice.qkdt"), (Side::Bob, "bob.qkdt")] {
            let tags: Vec<TimeTag> = generator.side_segments(side).flatten().collect();
            let mut tags = tags;
            tags.sort_unstable();
            write_tag_file(BufWriter::new(File::create(dir.join(name))?), side, &tags)?;
        }
    }
    let alice: TagSource = Box::new(generator.clone().into_side_segments(Side::Alice));
    let bob: TagSource = Box::new(generator.into_side_segments(Side::Bob));
    run_sessions(cfg, alice, bob)
}

fn load_tags(path: &Path, expected: Side) -> Result<Vec<TimeTag>, ExperimentError> {
    let file = File::open(path)?;
    let (side, tags) = read_tag_file(io::BufReader::new(file)).map_err(|source| ExperimentError::TagFile {
        path: path.to_path_buf(),
        source,
    })?;
    if side != expected {
        return Err(ExperimentError::WrongSide {
            path: path.to_path_buf(),
            expected,
            found: side,
        });
    }
    Ok(tags)
}

/// Runs the protocol on recorded time-tag files.
pub fn replay(cfg: &ExperimentConfig, alice_file: &Path, bob_file: &Path) -> Result<ExperimentResult, ExperimentError> {
    cfg.validate()?;
    let alice = load_tags(alice_file, Side::Alice)?;
    let bob = load_tags(bob_file, Side::Bob)?;
    run_sessions(cfg, Box::new(std::iter::once(alice)), Box::new(std::iter::once(bob)))
}

/// One CSV row; the header is the field names in order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub block_index: u32,
    pub t_start_s: f64,
    pub coincidences_per_s: f64,
    pub accidentals_per_s: f64,
    pub qber: f64,
    pub s_value: f64,
    pub s_stderr: f64,
    pub leak_ec_bits: u64,
    pub i_eve: f64,
    pub final_bits: u64,
    pub final_rate_bps: f64,
}

pub const CSV_COLUMNS: [&str; 11] = [
    "block_index",
    "t_start_s",
    "coincidences_per_s",
    "accidentals_per_s",
    "qber",
    "s_value",
    "s_stderr",
    "leak_ec_bits",
    "i_eve",
    "final_bits",
    "final_rate_bps",
];

impl From<&BlockStats> for CsvRow {
    fn from(s: &BlockStats) -> Self {
        let dt = s.duration();
        let per_s = |x: f64| if dt > 0.0 { x / dt } else { 0.0 };
        Self {
            block_index: s.block_index,
            t_start_s: s.t_start,
            coincidences_per_s: per_s(s.coincidence_count as f64),
            accidentals_per_s: per_s(s.accidental_count as f64),
            qber: s.qber,
            s_value: s.s_value,
            s_stderr: s.s_stderr,
            leak_ec_bits: s.leak_ec,
            i_eve: s.i_eve,
            final_bits: s.final_bits,
            final_rate_bps: per_s(s.final_bits as f64),
        }
    }
}

pub fn write_csv<W: Write>(w: W, rows: &[BlockStats]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record(CSV_COLUMNS)?;
    }
    for r in rows {
        out.serialize(CsvRow::from(r))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: io::Read>(r: R) -> Result<Vec<CsvRow>, csv::Error> {
    csv::Reader::from_reader(r).deserialize().collect()
}

/// Writes `alice.key` and `bob.key` (MSB-first, zero-padded to a byte).
pub fn write_keys(dir: &Path, alice: &BitString, bob: &BitString) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("alice.key"), alice.to_bytes_msb())?;
    std::fs::write(dir.join("bob.key"), bob.to_bytes_msb())
}

/// Writes the CSV and key files a result calls for.
pub fn write_outputs(cfg: &ExperimentConfig, result: &ExperimentResult) -> Result<(), ExperimentError> {
    if let Some(path) = &cfg.output {
        write_csv(BufWriter::new(File::create(path)?), &result.rows)?;
    }
    if let (Some(dir), Some(a), Some(b)) = (&cfg.keys_dir, &result.alice_key, &result.bob_key) {
        write_keys(dir, a, b)?;
    }
    Ok(())
}
