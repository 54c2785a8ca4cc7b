//! Command-line driver: simulate time-tag streams, analyse them into
//! nonclassicality witnesses, sweep parameter grids and summarize results.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_analyze, cmd_report, cmd_simulate, cmd_sweep, CommandOutput};
pub use error::{CliError, CliResult};
pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "tmbench", version, about = "Time-multiplexed click-counting simulation and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate an experiment: time tags, ground-truth histograms and singles.
    Simulate(SimulateArgs),
    /// Fit, window and accumulate a time-tag file, then evaluate witnesses.
    Analyze(AnalyzeArgs),
    /// Simulate and analyse a grid of pump powers, windows, heralds and K.
    Sweep(SweepArgs),
    /// Summarize the result table of an analyze or sweep run.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimulateArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of trials to simulate.
    #[arg(long)]
    pub trials: Option<u64>,
    /// `csv` or `binary`.
    #[arg(long)]
    pub tag_format: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct AnalyzeArgs {
    /// Time-tag file, CSV or binary.
    pub input: PathBuf,
    /// Experiment configuration; defaults to the manifest next to the input.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated `static:<ps>` or `dynamic:<mult>` windows (full widths).
    #[arg(long)]
    pub windows: Option<String>,
    /// Inclusive herald click range `A..B`.
    #[arg(long)]
    pub herald_range: Option<String>,
    /// Arm whose clicks herald the other arm (`A` or `B`).
    #[arg(long)]
    pub herald_arm: Option<String>,
    #[arg(long)]
    pub k_list: Option<String>,
    /// Detection bins per network mode; defaults to all bins of an arm.
    #[arg(long)]
    pub bins_per_mode: Option<usize>,
    /// Number of recorded trials, including those without events.
    #[arg(long)]
    pub trials: Option<u64>,
    /// Value of the `pump` column.
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SweepArgs {
    /// Experiment configuration with an optional `[sweep]` table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trials per pump setting.
    #[arg(long)]
    pub trials: Option<u64>,
    /// Comma-separated pump powers in µW.
    #[arg(long)]
    pub pumps: Option<String>,
    #[arg(long)]
    pub windows: Option<String>,
    #[arg(long)]
    pub herald_range: Option<String>,
    #[arg(long)]
    pub k_list: Option<String>,
    #[arg(long)]
    pub bins_per_mode: Option<usize>,
    /// Skip cells already present in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ReportArgs {
    /// Output directory of an analyze or sweep run.
    pub input: PathBuf,
    /// Where to write the report; defaults to the input directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn execute(command: &Command) -> CliResult<CommandOutput> {
    match command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(&cli.command) {
        Ok(output) => {
            if let Some(t) = &output.table {
                if t.failures() > 0 {
                    eprintln!("tmbench: {} of {} cells failed", t.failures(), t.rows.len());
                }
            }
            output.exit_code()
        }
        Err(e) => {
            eprintln!("tmbench: {e}");
            e.exit_code()
        }
    }
}
