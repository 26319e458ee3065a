//! `remix` command line: collapse simulation, theory verification, estimator
//! checks, training and evaluation.
//!
//! Exit codes: 0 success, 1 failed check, 2 config error, 3 I/O error,
//! 4 numerical divergence.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Paths;
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "remix", version, about = "Mixture-of-LoRAs with constant routing weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker thread cap; defaults to the machine's parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Make every artifact byte-reproducible.
    #[arg(long, global = true)]
    bit_exact: bool,
}

#[derive(Subcommand)]
enum Command {
    /// ESS of σ-initialized softmax routers versus the collapse bound.
    Collapse,
    /// Lemma grids and the top-k and swap brute-force checks.
    Verify,
    /// Exact unbiasedness grid and the rollout-count variance study.
    RlooCheck,
    /// Train on the synthetic cluster task.
    Train,
    /// Evaluate a saved checkpoint.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Additional evaluation with this many active adapters.
        #[arg(long)]
        k: Option<usize>,
    },
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let mut paths = Paths { config: cli.config.as_deref(), out: &cli.out, checkpoint: None };
    match &cli.command {
        Command::Collapse => commands::collapse(&paths),
        Command::Verify => commands::verify(&paths),
        Command::RlooCheck => commands::rloo_check(&paths),
        Command::Train => commands::train_cmd(&paths, cli.bit_exact),
        Command::Eval { checkpoint, k } => {
            paths.checkpoint = Some(checkpoint);
            commands::eval_cmd(&paths, *k)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
