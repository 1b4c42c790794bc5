mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::KvConfig;
use crate::error::CliError;

/// Sigmoid and softmax contrastive losses: verification, training, sweeps
/// and chunked-loss accounting.
#[derive(Debug, Parser)]
#[command(name = "siglab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every oracle check and print one line per check.
    Verify {
        /// Also write verify.json here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Added to the analytic bias gradient inside the gradient checks.
        #[arg(long, hide = true, default_value_t = 0.0)]
        bias_grad_offset: f64,
    },
    /// Train one model; writes trace.jsonl, eval.json, checkpoint.json and config.txt.
    Train(RunArgs),
    /// Run a sweep over one axis; writes results.csv and config.txt.
    Sweep(RunArgs),
    /// Tabulate memory and communication of the sharded sigmoid loss; writes chunk_bench.csv.
    ChunkBench(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Plain-text `key = value` config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Override one key; repeatable and applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Verify {
            out_dir,
            bias_grad_offset,
        } => commands::verify(out_dir.as_deref(), bias_grad_offset),
        Command::Train(a) => commands::train(&KvConfig::load(a.config.as_ref(), &a.overrides)?, &a.out_dir),
        Command::Sweep(a) => commands::sweep_cmd(&KvConfig::load(a.config.as_ref(), &a.overrides)?, &a.out_dir),
        Command::ChunkBench(a) => commands::chunk_bench(&KvConfig::load(a.config.as_ref(), &a.overrides)?, &a.out_dir),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("siglab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
