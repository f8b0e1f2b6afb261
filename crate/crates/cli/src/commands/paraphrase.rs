use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use lampat::checkpoint::Checkpoint;
use lampat::config::RunConfig;
use lampat::corpus::StopwordSet;
use lampat::decode::{Paraphraser, Strategy};
use lampat::rng::component_rng;

use crate::{io, CliError, Common, Result};

#[derive(Debug, Args)]
pub struct ParaphraseArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One sentence per line; standard input when omitted.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub lang: Option<String>,
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Decode with the base model only.
    #[arg(long)]
    pub base: bool,
}

/// Stopwords named on the command line, else those the run was trained
/// with when that directory still exists.
pub fn inference_stopwords(flag: Option<&Path>, cfg: &RunConfig) -> Result<StopwordSet> {
    match flag {
        Some(d) => io::load_stopwords(Some(d)),
        None => io::load_stopwords(cfg.paths.stopwords.as_deref().filter(|d| d.exists())),
    }
}

pub fn run(args: ParaphraseArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = ckpt.config.clone();
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
        cfg.propagate_seed();
    }
    let d = &mut cfg.decode;
    if let Some(s) = args.strategy {
        d.strategy = s;
    }
    if let Some(k) = args.k {
        d.k = k;
    }
    if let Some(t) = args.temperature {
        d.temperature = t;
    }
    if let Some(m) = args.max_new_tokens {
        d.max_new_tokens = m;
    }
    d.validate()?;
    let lang = args.lang.unwrap_or_else(|| cfg.data.lang.clone());
    let stopwords = inference_stopwords(args.stopwords.as_deref(), &cfg)?;
    let lines = io::read_input(args.input.as_deref())?;
    let paraphraser = Paraphraser {
        params: &ckpt.params,
        adapters: (!args.base).then_some(&ckpt.adapters),
        vocab: &ckpt.vocab,
        mode: cfg.data.mode,
        stopwords: &stopwords,
        corruption: &cfg.corruption,
        decode: &cfg.decode,
    };
    let mut rng = component_rng(cfg.seed, "decode");
    let mut out = io::output(args.common.out.as_deref())?;
    for (i, line) in lines.iter().enumerate() {
        let text = if line.trim().is_empty() {
            String::new()
        } else {
            paraphraser.paraphrase(line, &lang, &mut rng).unwrap_or_else(|e| {
                eprintln!("warning: line {}: {e}; echoing the input", i + 1);
                line.clone()
            })
        };
        writeln!(out, "{text}").map_err(|e| CliError::io("<output>", e))?;
    }
    io::flush(out)
}
