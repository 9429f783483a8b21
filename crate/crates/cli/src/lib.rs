//! The `groundlab` command line: synthetic data generation, dataset build,
//! validation filtering, training, evaluation-set construction, evaluation
//! and run summaries.

pub mod commands;
pub mod config;
pub mod rundir;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] groundlab::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(groundlab::Error::Config(_)) => EXIT_USAGE,
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "groundlab", version, about = "Grounded word learning from paired frames and speech")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Global {
    /// JSON config file layered over the command's defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set peak_lr=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub force: bool,
    /// Accepted for interface compatibility; computation is single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    #[serde(skip)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world.
    Gen(commands::GenArgs),
    /// Clean, pair and split a corpus into a dataset bundle.
    Build(commands::BuildArgs),
    /// Keep validation pairs whose frame-text similarity clears a threshold.
    FilterVal(commands::FilterValArgs),
    /// Train one model per seed.
    Train(commands::TrainArgs),
    /// Auto-label frames and sample 4-way trials.
    MakeEval(commands::MakeEvalArgs),
    /// Score a model on 4-way trials.
    Eval(commands::EvalArgs),
    /// Summarize run and evaluation directories.
    Report(commands::ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Build(_) => "build",
            Command::FilterVal(_) => "filter-val",
            Command::Train(_) => "train",
            Command::MakeEval(_) => "make-eval",
            Command::Eval(_) => "eval",
            Command::Report(_) => "report",
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    if cli.global.threads == 0 {
        return Err(CliError::usage("--threads must be at least 1"));
    }
    if cli.global.threads > 1 {
        log::info!("--threads {} requested; running single-threaded", cli.global.threads);
    }
    let g = &cli.global;
    match &cli.command {
        Command::Gen(a) => commands::gen(g, a),
        Command::Build(a) => commands::build(g, a),
        Command::FilterVal(a) => commands::filter_val(g, a),
        Command::Train(a) => commands::train(g, a),
        Command::MakeEval(a) => commands::make_eval(g, a),
        Command::Eval(a) => commands::eval(g, a),
        Command::Report(a) => commands::report(g, a),
    }
}

/// Parses and runs, printing errors to stderr. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
