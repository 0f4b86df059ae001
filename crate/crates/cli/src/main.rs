//! `sagnac`: run key sessions, perception analyses, weak-measurement
//! staircases and full scenarios from a TOML config.
//!
//! Exit codes: 0 on success, 2 when the input is invalid, 3 when the
//! simulation or analysis fails. Errors are written to stderr as one JSON
//! object per line.

mod commands;

use clap::{Args, Parser, Subcommand};
use sagnac_core::config::{ConfigError, ValidationError};
use serde_json::json;
use std::path::PathBuf;
use std::process::ExitCode;

/// Default output directory when neither `--out-dir` nor `[output] dir` is given.
pub const OUT_DIR_ENV: &str = "SLIS_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "sagnac",
    version,
    about = "Sagnac-loop key distribution and fiber sensing simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Scenario config (TOML). Defaults apply to everything left out.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; falls back to `[output] dir`, then $SLIS_OUT_DIR, then `sagnac-out`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Suppress progress messages.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run a key-distribution session and emit one record per window.
    Qkd(Common),
    /// Synthesize perception data for the configured disturbances and localize them.
    Perceive(Common),
    /// Localize from an existing trace or swept-sine file.
    Localize {
        #[command(flatten)]
        common: Common,
        /// Two-column trace written by `perceive`.
        #[arg(long, conflicts_with = "sweep", required_unless_present = "sweep")]
        trace: Option<PathBuf>,
        /// `amplitude_vs_frequency.csv` from a swept-sine run.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Pressure staircase read out by weak measurement.
    Wm {
        #[command(flatten)]
        common: Common,
        /// Comma-separated masses in kg; overrides `[wm] masses_kg`.
        #[arg(long, value_delimiter = ',')]
        masses: Option<Vec<f64>>,
    },
    /// Full workflow: key distribution, breach, perception, localization, reset.
    Integrated(Common),
    /// Run the integrated scenario once per value of one config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted key path, e.g. `channel.length_m` or `disturbance.0.position_m`.
        #[arg(long)]
        key: String,
        /// Comma-separated TOML literals.
        #[arg(
            long,
            value_delimiter = ',',
            required = true,
            allow_hyphen_values = true
        )]
        values: Vec<String>,
    },
}

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    Config(ConfigError),
    Input { key: String, message: String },
    Analysis(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) | Failure::Input { .. } => 2,
            Failure::Analysis(_) => 3,
        }
    }

    fn records(&self) -> Vec<serde_json::Value> {
        let validation = |e: &ValidationError| json!({"error": "validation", "kind": e.kind, "key": e.key, "message": e.message});
        match self {
            Failure::Config(ConfigError::Invalid(errors)) => {
                errors.iter().map(validation).collect()
            }
            Failure::Config(ConfigError::Io { path, message }) => {
                vec![
                    json!({"error": "validation", "kind": "missing_file", "key": path, "message": message}),
                ]
            }
            Failure::Config(ConfigError::Syntax(message)) => {
                vec![json!({"error": "validation", "kind": "syntax", "message": message})]
            }
            Failure::Config(ConfigError::Calibration(message)) => {
                vec![
                    json!({"error": "validation", "kind": "calibration", "key": "calibration", "message": message}),
                ]
            }
            Failure::Input { key, message } => {
                vec![
                    json!({"error": "validation", "kind": "invalid_argument", "key": key, "message": message}),
                ]
            }
            Failure::Analysis(message) => vec![json!({"error": "analysis", "message": message})],
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Qkd(c) => commands::qkd(c),
        Command::Perceive(c) => commands::perceive(c),
        Command::Localize {
            common,
            trace,
            sweep,
        } => commands::localize(common, trace.as_deref(), sweep.as_deref()),
        Command::Wm { common, masses } => commands::wm(common, masses.as_deref()),
        Command::Integrated(c) => commands::integrated(c),
        Command::Sweep {
            common,
            key,
            values,
        } => commands::sweep(common, key, values),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            for r in f.records() {
                eprintln!("{r}");
            }
            ExitCode::from(f.exit_code())
        }
    }
}
