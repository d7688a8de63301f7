//! `rainnas`: synthetic data, architecture search, retraining, evaluation,
//! baselines and Diebold-Mariano tests from the command line.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{BaselineArgs, DmArgs, EvalArgs, GenArgs, RetrainArgs, SearchArgs};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal error
  2  usage error (unknown flag, bad or missing value)
  3  missing or unreadable file
  4  format mismatch (bad magic, version, truncated or malformed file)
  5  invalid configuration (inconsistent flags, architecture/data mismatch)
  6  degenerate input (empty split, zero-variance differential, diverged loss)

Errors are printed to stderr as one line:
  rainnas: error code=<n> kind=<kind>: <message>";

#[derive(Parser)]
#[command(name = "rainnas", version, about, after_help = EXIT_CODES)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ensemble/observation dataset.
    Gen(GenArgs),
    /// Search block operations on the training split.
    Search(SearchArgs),
    /// Train a fixed architecture with the composite loss.
    Retrain(RetrainArgs),
    /// Score a checkpoint on a data split.
    Eval(EvalArgs),
    /// Score a classical post-processing baseline.
    Baseline(BaselineArgs),
    /// Diebold-Mariano test on two per-sample loss series.
    Dm(DmArgs),
}

/// A failure with its exit code and a short machine-readable kind.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub msg: String,
}

impl From<rainnas_core::Error> for CliError {
    fn from(e: rainnas_core::Error) -> Self {
        use rainnas_core::Error as E;
        let (code, kind) = match &e {
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => (3, "missing-file"),
            E::Io(_) => (3, "io"),
            E::Format { .. } | E::Parse(_) => (4, "format"),
            E::Config(_) | E::InvalidArgument(_) | E::Shape { .. } => (5, "config"),
            E::Degenerate(_) | E::Empty(_) => (6, "degenerate"),
        };
        CliError {
            code,
            kind,
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        rainnas_core::Error::Io(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Search(a) => commands::search(a),
        Command::Retrain(a) => commands::retrain(a),
        Command::Eval(a) => commands::eval(a),
        Command::Baseline(a) => commands::baseline(a),
        Command::Dm(a) => commands::dm(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.msg.replace('\n', " ");
            eprintln!("rainnas: error code={} kind={}: {msg}", e.code, e.kind);
            ExitCode::from(e.code)
        }
    }
}
