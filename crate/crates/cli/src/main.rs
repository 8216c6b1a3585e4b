use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

/// Spatiotemporal hospitalization forecasting with social-connectivity
/// features.
#[derive(Debug, Parser)]
#[command(name = "sphcast", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Job config (JSON); a scenario file for `simulate`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for member training.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// Hospitalization proximity channel; `off` feeds zeros.
    #[arg(long, global = true)]
    pub sph: Option<Switch>,

    /// Extra case proximity channel.
    #[arg(long, global = true)]
    pub spc: Option<Switch>,

    /// Overrides the seed base (the scenario seed for `simulate`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an epidemic scenario and write truth, population and SCI files.
    Simulate,
    /// Validate input data and write cleaned copies.
    Ingest,
    /// Write scaled model inputs for each forecast date.
    Features,
    /// Train the ensemble per forecast date, store checkpoints and forecast.
    Train,
    /// Forecast from stored checkpoints.
    Forecast,
    /// Score forecast files against truth.
    Score {
        /// Forecast file to score, as NAME=PATH. Repeatable.
        #[arg(long = "forecast", value_name = "NAME=PATH")]
        forecasts: Vec<String>,
        /// Score against raw rather than 7-day smoothed hospitalizations.
        #[arg(long)]
        raw_truth: bool,
        /// Also write an SVG chart.
        #[arg(long)]
        svg: bool,
    },
    /// Compare models trained with and without the SPH channel.
    Ablate {
        #[arg(long, default_value_t = 5)]
        replicates: usize,
    },
}

/// How a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, config or input data, detected before any output.
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

pub fn validation(e: impl std::fmt::Display) -> Failure {
    Failure::Validation(e.to_string())
}

pub fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

pub fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Validation(format!("{what} file not found: {}", path.display())))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, msg) = match &f {
                Failure::Validation(m) => ("invalid input", m),
                Failure::Runtime(m) => ("error", m),
            };
            eprintln!("sphcast: {kind}: {msg}");
            ExitCode::from(f.code())
        }
    }
}
