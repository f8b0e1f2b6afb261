//! The `lampat` command line: vocabulary building, corpus corruption,
//! training, paraphrasing, evaluation and history reports.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;
mod error;
mod io;

pub use error::{exit, CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "lampat", version, about = "Unsupervised paraphrase training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file, directory or prefix, depending on the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary file from a plain-text corpus.
    BuildVocab(commands::vocab::BuildVocabArgs),
    /// Turn a plain-text corpus into (corrupted source, target) pairs.
    Corrupt(commands::corrupt::CorruptArgs),
    /// Pretrain the base model if configured, then train adapters.
    Train(commands::train::TrainArgs),
    /// Paraphrase one input line per output line.
    Paraphrase(commands::paraphrase::ParaphraseArgs),
    /// Score an evaluation set with one or more checkpoints.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Merge training histories into per-epoch curves.
    Report(commands::report::ReportArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildVocab(a) => commands::vocab::run(a),
        Command::Corrupt(a) => commands::corrupt::run(a),
        Command::Train(a) => commands::train::run(a),
        Command::Paraphrase(a) => commands::paraphrase::run(a),
        Command::Evaluate(a) => commands::evaluate::run(a),
        Command::Report(a) => commands::report::run(a),
    }
}
