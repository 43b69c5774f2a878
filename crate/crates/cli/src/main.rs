//! `lbmnar` command-line tool.
//!
//! Every subcommand writes its results into `--output-dir`. On failure it
//! writes `error.json` there instead and exits with status 1; half-written
//! files are removed.

use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lbmnar::LbmError;
use serde::Serialize;

mod commands;
mod options;
mod output;

use options::Options;

#[derive(Parser)]
#[command(name = "lbmnar", version, about = "Co-clustering of binary matrices with informative missing values")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    options: Options,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Draw a benchmark matrix and its ground truth.
    Simulate,
    /// Fit one model with a fixed number of classes.
    Fit,
    /// Fit a grid of class counts and missingness kinds and rank them by ICL.
    Select,
    /// Calibrate epsilon for a target risk, or estimate the risk of a matrix.
    Risk,
    /// Compare a fit with the ground truth.
    Eval,
    /// Export orderings, block probabilities and latent positions of a fit.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Fit => "fit",
            Self::Select => "select",
            Self::Risk => "risk",
            Self::Eval => "eval",
            Self::Report => "report",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Model(LbmError),
    Io(std::io::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "{m}"),
            Self::Model(e) => write!(f, "{e}"),
            Self::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl From<LbmError> for CliError {
    fn from(e: LbmError) -> Self {
        Self::Model(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Usage(e.to_string())
    }
}

#[derive(Serialize)]
struct ErrorRecord {
    command: String,
    kind: &'static str,
    message: String,
}

fn error_kind(e: &CliError) -> &'static str {
    match e {
        CliError::Usage(_) => "usage",
        CliError::Io(_) | CliError::Model(LbmError::Io(_)) => "io",
        CliError::Model(LbmError::Parse { .. }) => "parse",
        CliError::Model(LbmError::Domain(_)) => "domain",
        CliError::Model(LbmError::Contract(_)) => "contract",
        CliError::Model(LbmError::Calibration { .. }) => "calibration",
        CliError::Model(LbmError::Selection(_)) => "selection",
        CliError::Model(_) => "model",
    }
}

fn run(command: Command, opts: &Options) -> Result<(), CliError> {
    if let Some(n) = opts.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))?;
    }
    match command {
        Command::Simulate => commands::simulate(opts),
        Command::Fit => commands::fit(opts),
        Command::Select => commands::select(opts),
        Command::Risk => commands::risk(opts),
        Command::Eval => commands::eval(opts),
        Command::Report => commands::report(opts),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = cli.command;
    let mut dir = cli.options.output_dir().to_owned();
    let result = cli.options.resolve().and_then(|opts| {
        dir = opts.output_dir().to_owned();
        commands::clear_marker(&dir);
        run(command, &opts)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            write_marker(command, &e, &dir);
            eprintln!("lbmnar {}: {e}", command.name());
            ExitCode::FAILURE
        }
    }
}

fn write_marker(command: Command, e: &CliError, dir: &Path) {
    let record = ErrorRecord {
        command: command.name().to_owned(),
        kind: error_kind(e),
        message: e.to_string(),
    };
    let _ = std::fs::create_dir_all(dir);
    if let Ok(s) = serde_json::to_string_pretty(&record) {
        let _ = std::fs::write(dir.join(output::ERROR_FILE), s + "\n");
    }
}
