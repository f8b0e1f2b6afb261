use std::path::PathBuf;

use clap::Args;
use lampat::corpus::{build_vocab, split_surfaces, TokenizeMode};

use crate::{io, Common, Result};

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corpus files: plain text, or `.jsonl` pairs.
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub mode: Option<TokenizeMode>,
    /// Vocabulary size including the reserved tokens.
    #[arg(long)]
    pub max_size: Option<usize>,
}

pub fn run(args: BuildVocabArgs) -> Result<()> {
    let cfg = io::load_config(&args.common)?;
    let mode = args.mode.unwrap_or(cfg.data.mode);
    let max_size = args.max_size.unwrap_or(cfg.data.max_vocab);
    let mut lines = Vec::new();
    for path in &args.corpus {
        lines.extend(super::corpus_texts(path)?);
    }
    let vocab = build_vocab(&lines, mode, max_size)?;
    let (mut total, mut covered) = (0usize, 0usize);
    for line in &lines {
        for s in split_surfaces(line, mode) {
            total += 1;
            covered += usize::from(vocab.contains(&s));
        }
    }
    let text = vocab.to_file_string();
    match &args.common.out {
        Some(p) => io::write_file(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    let pct = if total == 0 { 0.0 } else { 100.0 * covered as f64 / total as f64 };
    eprintln!("{} entries, {covered}/{total} corpus tokens covered ({pct:.1}%)", vocab.len());
    Ok(())
}
