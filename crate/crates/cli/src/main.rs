//! Batch front end for the self-training reader: generate corpora, run the
//! training loop into a run directory, evaluate a finished run, and
//! summarize it. Every command is deterministic given its config file; seeds
//! are never drawn from system entropy.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod artifacts;
mod commands;

#[derive(Parser)]
#[command(name = "stm", version, about = "Self-training reader over synthetic evidence corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted evidence
    Generate {
        /// JSON run config; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for corpus.jsonl and vocab.json
        #[arg(long)]
        out: PathBuf,
        /// Override the corpus seed from the config
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the self-training loop and write a run directory
    Train {
        /// JSON run config; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus JSON Lines file
        #[arg(long)]
        data: PathBuf,
        /// Run directory to create
        #[arg(long)]
        out: PathBuf,
        /// Override the master seed from the config
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: all cores)
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate a finished run on a dataset
    Eval {
        /// Run directory containing manifest.json
        #[arg(long)]
        out: PathBuf,
        /// Corpus JSON Lines file to evaluate on
        #[arg(long)]
        data: PathBuf,
        /// Worker threads (default: all cores)
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Summarize a run: metrics CSV and evidence evolution
    Report {
        /// Run directory containing manifest.json
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            commands::generate(config.as_deref(), &out, seed)
        }
        Command::Train { config, data, out, seed, threads } => {
            init_threads(threads)?;
            commands::train(config.as_deref(), &data, &out, seed)
        }
        Command::Eval { out, data, threads } => {
            init_threads(threads)?;
            commands::eval(&out, &data)
        }
        Command::Report { out } => commands::report(&out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
