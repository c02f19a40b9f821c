//! `usiqa` — synthetic blind-sweep data generation, adapter fine-tuning,
//! and evaluation for the ultrasound frame-quality models.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure,
//! 3 verification failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "usiqa", version, about = "Ultrasound sweep image-quality assessment workflows", long_about = None)]
struct Cli {
    /// Flat key = value config file; flags override file entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic blind-sweep phantom dataset.
    GenerateData(commands::generate::Args),
    /// Train one or both heads over several seeds and aggregate metrics.
    Train(commands::train::Args),
    /// Evaluate a checkpoint on a dataset split.
    Evaluate(commands::evaluate::Args),
    /// Run a checkpoint over a split and dump per-frame predictions.
    Predict(commands::predict::Args),
    /// Export CLS embeddings and their 2-D PCA projection.
    ExportEmbeddings(commands::embeddings::Args),
    /// Finite-difference verification of every op and both models.
    Gradcheck(commands::gradcheck::Args),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(err) => {
            // help/version are not usage errors
            let benign = matches!(
                err.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = err.print();
            return if benign { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };

    let config = cli.config.as_deref();
    let outcome = match cli.command {
        Command::GenerateData(args) => commands::generate::run(&args, config),
        Command::Train(args) => commands::train::run(&args, config),
        Command::Evaluate(args) => commands::evaluate::run(&args, config),
        Command::Predict(args) => commands::predict::run(&args, config),
        Command::ExportEmbeddings(args) => commands::embeddings::run(&args, config),
        Command::Gradcheck(args) => commands::gradcheck::run(&args, config),
    };

    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
