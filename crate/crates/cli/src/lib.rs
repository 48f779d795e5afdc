//! Batch front end: reads triple files, runs the passes and writes JSON reports.
//!
//! Exit codes: 0 success, 1 I/O or data error, 2 unidentifiable model (a
//! partial report is still written), 3 invalid flags.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};
use crossmom_core::model::EffectLaw;
use crossmom_core::Error;

pub mod commands;
pub mod input;
pub mod report;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_UNIDENTIFIED: i32 = 2;
pub const EXIT_USAGE: i32 = 3;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "CM_THREADS";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
    /// Report to emit despite the failure.
    pub partial: Option<String>,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into(), partial: None }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into(), partial: None }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::data(format!("{}: {e}", path.display()))
    }

    pub fn from_core(e: Error) -> Self {
        Self { code: exit_code(&e), message: e.to_string(), partial: None }
    }

    /// Classifies a library error raised while processing `path`.
    pub fn core(path: &Path, e: Error) -> Self {
        let mut out = Self::from_core(e);
        if out.code == EXIT_DATA {
            out.message = format!("{}: {}", path.display(), out.message);
        }
        out
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::SingularSystem { .. } | Error::SingularPredictionSystem | Error::DegenerateChain => EXIT_UNIDENTIFIED,
        Error::InvalidParameter(_) | Error::ChainTooShort { .. } => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

#[derive(Debug, Parser)]
#[command(name = "crossmom", version, about = "Moment estimates and predictions for crossed random effects")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate variance components, kurtoses and their covariance.
    Estimate(EstimateArgs),
    /// Predict cells from row, column and grand totals.
    Predict(PredictArgs),
    /// Write a simulated triple file.
    Simulate(SimulateArgs),
    /// Convergence rate of the random-effects Gibbs sampler on a balanced grid.
    GibbsRate(GibbsArgs),
}

#[derive(Debug, Args)]
pub struct PassArgs {
    /// CSV of triples with header `row,col,value`.
    pub input: PathBuf,
    /// Number of byte-range shards each pass is split into.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..=4096))]
    pub shards: u32,
    /// Average repeated cells instead of rejecting them (buffers every cell).
    #[arg(long, conflicts_with = "assume_unique")]
    pub dedupe: bool,
    /// Skip the duplicate-cell check; memory then depends only on the number of rows and columns.
    #[arg(long)]
    pub assume_unique: bool,
    /// Verify that the second pass reads exactly the triples of the first.
    #[arg(long)]
    pub seed_check: bool,
    /// Load the first-pass summary from this sidecar; only the second pass reads the input.
    #[arg(long, conflicts_with_all = ["summaries_out", "dedupe"])]
    pub summaries_in: Option<PathBuf>,
    /// Write the first-pass summary to this sidecar.
    #[arg(long)]
    pub summaries_out: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub pass: PassArgs,
    /// Balance threshold for the asymptotic covariance.
    #[arg(long, default_value_t = crossmom_core::estimate::DEFAULT_DELTA0)]
    pub delta0: f64,
    /// Always use the plug-in covariance from both passes.
    #[arg(long)]
    pub two_pass_only: bool,
    /// Stop after the first pass and report the first-pass estimates.
    #[arg(long, conflicts_with_all = ["summaries_in", "two_pass_only"])]
    pub pass1_only: bool,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("targets").required(true).multiple(true).args(["cell", "cells"])))]
pub struct PredictArgs {
    #[command(flatten)]
    pub pass: PassArgs,
    /// Target cell as `row,col`; repeatable.
    #[arg(long, value_parser = parse_cell)]
    pub cell: Vec<(String, String)>,
    /// CSV of target cells with header `row,col`.
    #[arg(long)]
    pub cells: Option<PathBuf>,
    /// Mean used in the prediction equations instead of the estimate.
    #[arg(long, allow_negative_numbers = true)]
    pub mu: Option<f64>,
    /// Variance components `a,b,e` to use instead of estimating them.
    #[arg(long, value_parser = parse_theta)]
    pub theta: Option<[f64; 3]>,
    /// Include the cell's own value for observed cells.
    #[arg(long)]
    pub smooth: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Number of rows in the grid.
    #[arg(long)]
    pub rows: usize,
    /// Number of columns in the grid.
    #[arg(long)]
    pub cols: usize,
    /// Probability that each cell is observed.
    #[arg(long, default_value_t = 0.25)]
    pub observe_prob: f64,
    /// Variance components `a,b,e`.
    #[arg(long, value_parser = parse_theta, default_value = "2,0.5,1")]
    pub theta: [f64; 3],
    /// Grand mean.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub mu: f64,
    /// Distributions of the row effect, column effect and noise.
    #[arg(long, value_parser = parse_laws, default_value = "normal,normal,normal")]
    pub laws: [EffectLaw; 3],
    /// Random seed; the same seed always gives the same file.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GibbsArgs {
    /// Number of rows.
    #[arg(long)]
    pub r: usize,
    /// Number of columns.
    #[arg(long)]
    pub c: usize,
    /// Variance components `a,b,e`.
    #[arg(long, value_parser = parse_theta)]
    pub theta: [f64; 3],
    /// Also run the sampler on simulated data and measure the autocorrelation decay.
    #[arg(long)]
    pub empirical: bool,
    /// Total sweeps, including burn-in.
    #[arg(long, default_value_t = 50_000, requires = "empirical")]
    pub iters: usize,
    /// Sweeps discarded before recording.
    #[arg(long, default_value_t = 1_000, requires = "empirical")]
    pub burn_in: usize,
    /// Seed for the simulated grid; the chain uses `seed + 1`.
    #[arg(long, default_value_t = 0, requires = "empirical")]
    pub seed: u64,
    /// Grand mean of the simulated grid and the sampler.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true, requires = "empirical")]
    pub mu: f64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_theta(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got '{s}'"));
    }
    let mut out = [0.0; 3];
    for (slot, p) in out.iter_mut().zip(&parts) {
        let v: f64 = p.parse().map_err(|_| format!("cannot parse '{p}'"))?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(format!("variance components must be finite and nonnegative, got '{p}'"));
        }
        *slot = v;
    }
    Ok(out)
}

fn parse_laws(s: &str) -> Result<[EffectLaw; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated laws, got '{s}'"));
    }
    let mut out = [EffectLaw::Normal; 3];
    for (slot, p) in out.iter_mut().zip(&parts) {
        *slot = p.parse().map_err(|e: Error| e.to_string())?;
    }
    Ok(out)
}

fn parse_cell(s: &str) -> Result<(String, String), String> {
    let (r, c) = s.split_once(',').ok_or_else(|| format!("expected 'row,col', got '{s}'"))?;
    Ok((r.trim().to_string(), c.trim().to_string()))
}

/// Worker cap from the environment; `None` when unset.
fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(e) => Err(CliError::usage(format!("{THREADS_ENV}: {e}"))),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{e}");
                    EXIT_USAGE
                }
            };
        }
    };
    let out_path = match &cli.command {
        Command::Estimate(a) => a.pass.out.clone(),
        Command::Predict(a) => a.pass.out.clone(),
        Command::Simulate(_) => None,
        Command::GibbsRate(a) => a.out.clone(),
    };
    let result = thread_cap().and_then(|cap| commands::execute(cli.command, cap, stdout));
    let (report, code, message) = match result {
        Ok(report) => (report, EXIT_OK, None),
        Err(e) => (e.partial, e.code, Some(e.message)),
    };
    if let Some(text) = report {
        let written = match &out_path {
            Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p, e)),
            None => stdout.write_all(text.as_bytes()).map_err(|e| CliError::data(format!("stdout: {e}"))),
        };
        if let Err(e) = written {
            let _ = writeln!(stderr, "error: {}", e.message);
            return EXIT_DATA;
        }
    }
    if let Some(m) = message {
        let _ = writeln!(stderr, "error: {m}");
    }
    code
}
