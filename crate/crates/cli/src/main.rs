//! `tpla` — command-line driver for the latent-attention harness.
//!
//! Four subcommands cover the workflow end to end: `verify` runs the named
//! self-check suites, `calibrate` builds an orthogonal transform file from
//! calibration data, `simulate` rolls the sharded pipeline variants against
//! the single-device reference, and `cost` prints the analytical cache/FLOP
//! model for a deployment.
//!
//! Exit codes are CI-friendly: 0 on success, 1 when a verification check
//! fails, 2 for usage or configuration errors. Every run is deterministic
//! given its flags — reports contain no timestamps, so re-running a command
//! yields byte-identical output files.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::output::{CliError, Ctx};

#[derive(Parser)]
#[command(
    name = "tpla",
    version,
    about = "Deterministic tensor-parallel latent attention harness",
    after_help = "Exit codes: 0 success, 1 verification failure, 2 usage/config error.\n\
                  Output directory: --out, else $TPLA_OUT_DIR, else ./tpla-out."
)]
struct Cli {
    /// Directory for report files (default: $TPLA_OUT_DIR, then ./tpla-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// What to print on stdout; files are written either way.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,

    /// Base seed for every random draw the command makes.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// Human-readable lines / aligned columns.
    Table,
    /// The full JSON report envelope.
    Json,
    /// The command's main series as comma-separated rows.
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Run the self-check suites (numerics, reference path, transforms,
    /// sharding, pipeline, cost model), or validate a transform file.
    Verify(commands::verify::VerifyArgs),
    /// Build an orthogonal latent transform from calibration features and
    /// write it as a binary container plus a JSON report.
    Calibrate(commands::calibrate::CalibrateArgs),
    /// Roll the sharded decode variants against the single-device reference
    /// and record per-step error series.
    Simulate(commands::simulate::SimulateArgs),
    /// Analytical per-device cache and FLOP accounting for one deployment,
    /// with ratios against its own single-latent baseline.
    Cost(commands::cost::CostArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx {
        out_dir: output::resolve_out_dir(cli.out.as_deref()),
        format: cli.format,
        seed: cli.seed,
    };
    let result = match cli.command {
        Command::Verify(args) => commands::verify::run(&args, &ctx),
        Command::Calibrate(args) => commands::calibrate::run(&args, &ctx),
        Command::Simulate(args) => commands::simulate::run(&args, &ctx),
        Command::Cost(args) => commands::cost::run(&args, &ctx),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
