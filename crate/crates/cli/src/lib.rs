//! Command-line front end: verification suites, reports and toy-task
//! training.
//!
//! Exit codes: 0 success, 1 configuration or format error, 2 verification
//! failure, 3 training divergence.

pub mod commands;
pub mod config;
pub mod equiv;
pub mod gradcheck;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use mlb_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "mlb",
    version,
    about = "Low-rank bilinear pooling toolkit: verification suites, reports and toy training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config file; keys not listed below are rejected.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed for every random draw.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory for reports and artifacts.
    #[arg(long, value_name = "DIR", default_value = "mlb-out")]
    pub out: PathBuf,
    /// Dotted override applied after the config file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference gradient checks over all pooling ops and model losses.
    Gradcheck(Common),
    /// Algebraic-equivalence oracles; reports the largest deviation of each.
    Equiv(Common),
    /// Monte-Carlo sketch moments and inner-product unbiasedness, as CSV.
    SketchStats(Common),
    /// Parameter counts and ratios of full, low-rank and compact pooling.
    Params(Common),
    /// Trains a model variant on the toy task; writes metrics and a checkpoint.
    Train(Common),
    /// Exact and VQA-metric accuracy of a checkpoint on the toy evaluation set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory written by `train`; omitted means all-zero weights.
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
    },
}

/// Full clap command with each subcommand's config keys in its help.
pub fn command() -> clap::Command {
    use commands::*;
    Cli::command()
        .mut_subcommand("gradcheck", |c| c.after_help(config::keys_help::<gradcheck::GradcheckConfig>()))
        .mut_subcommand("equiv", |c| c.after_help(config::keys_help::<equiv::EquivConfig>()))
        .mut_subcommand("sketch-stats", |c| c.after_help(config::keys_help::<SketchStatsConfig>()))
        .mut_subcommand("params", |c| c.after_help(config::keys_help::<ParamsConfig>()))
        .mut_subcommand("train", |c| c.after_help(config::keys_help::<mlb_core::training::ExperimentConfig>()))
        .mut_subcommand("eval", |c| c.after_help(config::keys_help::<mlb_core::training::ExperimentConfig>()))
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGED,
        Error::Evaluation(_) => EXIT_VERIFY,
        _ => EXIT_CONFIG,
    }
}

/// Parses `args` (program name first), runs the subcommand and returns
/// the process exit code. Reports go to `stdout`, diagnostics to `stderr`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { stderr.write_all(text.as_bytes()) } else { stdout.write_all(text.as_bytes()) };
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(stderr, "{e}");
            return EXIT_CONFIG;
        }
    };
    match commands::dispatch(&cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}
