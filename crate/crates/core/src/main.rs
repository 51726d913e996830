use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use qkd_core::experiment::{self, parse_config, ExperimentConfig, ExperimentError, ExperimentResult, TransportKind};
use qkd_core::privamp::{binary_entropy, secret_fraction, FiniteKeyPolicy};

/// Exit status for configuration and input-format errors.
const EXIT_CONFIG: u8 = 5;

#[derive(Parser)]
#[command(name = "qkd", version, about = "Entanglement-based QKD simulator and post-processing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the link and run both protocol endpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `inproc`, or `socket HOST:PORT`.
        #[arg(long, num_args = 1..=2, value_names = ["KIND", "ADDR"])]
        transport: Option<Vec<String>>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        keys: Option<PathBuf>,
        /// Overrides both the simulator and the session seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the simulated time tags here for `replay`.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Run the protocol on recorded time-tag files.
    Replay {
        #[arg(long)]
        alice: PathBuf,
        #[arg(long)]
        bob: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        keys: Option<PathBuf>,
    },
    /// Final key length for a block of N bits at the given S and QBER.
    Keyrate {
        #[arg(long, allow_negative_numbers = true)]
        s: f64,
        #[arg(long)]
        qber: f64,
        #[arg(long)]
        n: u64,
        /// Reconciliation leakage as a multiple of n*h(QBER).
        #[arg(long, default_value_t = 1.2)]
        ec_efficiency: f64,
        /// Verification tag bits added to the leakage.
        #[arg(long, default_value_t = 64)]
        tag_bits: u64,
        #[arg(long, default_value_t = 0)]
        deduction: u64,
    },
}

enum Failure {
    Config(anyhow::Error),
    Other(anyhow::Error),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) | ExperimentError::TagFile { .. } | ExperimentError::WrongSide { .. } => {
                Failure::Config(e.into())
            }
            other => Failure::Other(other.into()),
        }
    }
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Config)?;
    parse_config(&text)
        .with_context(|| format!("in {}", path.display()))
        .map_err(Failure::Config)
}

fn report(result: &ExperimentResult) -> u8 {
    let total: u64 = result.rows.iter().map(|r| r.final_bits).sum();
    let span: f64 = result.rows.iter().map(|r| r.duration()).sum();
    eprintln!(
        "{} block(s), {} final key bits{}",
        result.rows.len(),
        total,
        if span > 0.0 {
            format!(", {:.1} bit/s", total as f64 / span)
        } else {
            String::new()
        }
    );
    if let Some(msg) = &result.message {
        eprintln!("error: {msg}");
    }
    result.status.exit_code() as u8
}

fn finish(cfg: &ExperimentConfig, result: ExperimentResult) -> Result<u8, Failure> {
    experiment::write_outputs(cfg, &result)?;
    Ok(report(&result))
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Run {
            config,
            transport,
            csv,
            keys,
            seed,
            record,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(t) = transport {
                cfg.transport = TransportKind::parse(&t.join(" "))
                    .ok_or_else(|| Failure::Config(anyhow::anyhow!("--transport must be `inproc` or `socket ADDR`")))?;
            }
            if let Some(seed) = seed {
                cfg.set_seed(seed);
            }
            cfg.output = csv.or(cfg.output);
            cfg.keys_dir = keys.or(cfg.keys_dir);
            let result = experiment::run_experiment(&cfg, record.as_deref())?;
            finish(&cfg, result)
        }
        Command::Replay {
            alice,
            bob,
            config,
            csv,
            keys,
        } => {
            let mut cfg = load_config(&config)?;
            cfg.output = csv.or(cfg.output);
            cfg.keys_dir = keys.or(cfg.keys_dir);
            let result = experiment::replay(&cfg, &alice, &bob)?;
            finish(&cfg, result)
        }
        Command::Keyrate {
            s,
            qber,
            n,
            ec_efficiency,
            tag_bits,
            deduction,
        } => {
            let h = binary_entropy(qber).map_err(|e| Failure::Config(e.into()))?;
            let leak = (ec_efficiency * n as f64 * h).ceil() as u64 + tag_bits;
            let policy = FiniteKeyPolicy {
                deduction_bits: deduction,
                ..Default::default()
            };
            match secret_fraction(n, leak, s, policy) {
                Ok(est) => {
                    println!("n: {}", est.n);
                    println!("s_value: {}", est.s_value);
                    println!("i_eve: {:.6}", est.i_eve);
                    println!("leak_ec: {}", est.leak_ec);
                    println!("leak_ec_per_bit: {:.6}", est.leak_ec_per_bit);
                    println!("finite_deduction: {}", est.finite_deduction);
                    println!("secret_fraction: {:.6}", est.secret_fraction);
                    println!("final_length: {}", est.final_length);
                    Ok(0)
                }
                Err(qkd_core::privamp::PrivampError::InsecureRegime { s }) => {
                    eprintln!("insecure regime: |S| = {} <= 2", s.abs());
                    Ok(2)
                }
                Err(e) => Err(Failure::Config(e.into())),
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(4)
        }
    }
}
