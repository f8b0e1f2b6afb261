use std::io::Write;
use std::path::PathBuf;

use clap::Args;

use crate::{io, CliError, Common, Result};

#[derive(Debug, Args)]
pub struct CorruptArgs {
    #[command(flatten)]
    pub common: Common,
    /// Plain-text corpus, one sentence per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory of `<lang>.txt` stopword lists.
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    #[arg(long)]
    pub lang: Option<String>,
    #[arg(long)]
    pub shuffle_prob: Option<f64>,
}

/// Writes one JSON pair per input line, blank lines included.
pub fn run(args: CorruptArgs) -> Result<()> {
    let mut cfg = io::load_config(&args.common)?;
    if let Some(l) = args.lang {
        cfg.data.lang = l;
    }
    if let Some(p) = args.shuffle_prob {
        cfg.corruption.shuffle_prob = p;
    }
    cfg.corruption.validate()?;
    let stopwords = io::load_stopwords(args.stopwords.as_deref().or(cfg.paths.stopwords.as_deref()))?;
    let lines = io::read_lines(&args.corpus)?;
    let pairs = super::corrupt_lines(&lines, &stopwords, &cfg);
    let mut out = io::output(args.common.out.as_deref())?;
    for p in &pairs {
        let json = serde_json::to_string(p).expect("pair records always serialize");
        writeln!(out, "{json}").map_err(|e| CliError::io("<output>", e))?;
    }
    io::flush(out)
}
