mod commands;
mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use strafe_core::model::Variant;
use strafe_core::StrafeError;

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "strafe", version, about = "Discrete-time survival modelling of visit histories")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// strafe | strafe-lstm | uncontextualized-strafe | uncontextualized-lstm
    #[arg(long, global = true)]
    variant: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort and its ground-truth sidecar.
    Simulate,
    /// Train skip-gram concept embeddings on the training split.
    Embed,
    /// Train the configured model variant on the training split.
    Train,
    /// Score the test split and write the metrics report.
    Evaluate,
    /// Export attention heatmap, visit graph and a counterfactual curve.
    Explain {
        #[arg(long)]
        patient: String,
        /// Visit indices (oldest retained visit = 0) to remove, e.g. `0,3`.
        #[arg(long, value_delimiter = ',')]
        remove_visits: Option<Vec<usize>>,
    },
}

/// A failed command: message plus process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const GENERIC: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const MISSING_INPUT: u8 = 3;
    pub const DIVERGENCE: u8 = 4;
    pub const UNSUPPORTED: u8 = 5;

    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: Self::CONFIG,
            message: message.into(),
        }
    }

    pub fn input(path: &Path, e: impl fmt::Display) -> Self {
        Failure {
            code: Self::MISSING_INPUT,
            message: format!("cannot read {}: {e}", path.display()),
        }
    }

    pub fn from_core(e: StrafeError) -> Self {
        use StrafeError::*;
        let code = match &e {
            Config(_) | Parameter { .. } | Contract(_) | Parse { .. } | Validation { .. } | Corpus(_) | Size(_) => {
                Self::CONFIG
            }
            Checkpoint(_) | UnknownPatient(_) => Self::MISSING_INPUT,
            Divergence { .. } | NonFinite { .. } => Self::DIVERGENCE,
            UnsupportedVariant(_) => Self::UNSUPPORTED,
            _ => Self::GENERIC,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("STRAFE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::config(format!("STRAFE_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::config(format!("cannot size the thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    let variant = cli
        .variant
        .as_deref()
        .map(|v| v.parse::<Variant>())
        .transpose()
        .map_err(|e| Failure::config(e.to_string()))?;
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    }
    .finish(cli.seed, variant)?;
    match cli.command {
        Command::Simulate => commands::simulate(&config),
        Command::Embed => commands::embed(&config),
        Command::Train => commands::train(&config),
        Command::Evaluate => commands::evaluate(&config),
        Command::Explain { patient, remove_visits } => commands::explain(&config, &patient, remove_visits.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
