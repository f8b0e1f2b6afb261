//! File helpers shared by the subcommands.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use lampat::config::RunConfig;
use lampat::corpus::{PairRecord, StopwordSet};

use crate::{CliError, Common, Result};

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_to_string(path)?.lines().map(str::to_string).collect())
}

/// Lines of `path`, or of standard input when no path is given.
pub fn read_input(path: Option<&Path>) -> Result<Vec<String>> {
    match path {
        Some(p) => read_lines(p),
        None => {
            let mut s = String::new();
            std::io::stdin()
                .read_to_string(&mut s)
                .map_err(|e| CliError::io("<stdin>", e))?;
            Ok(s.lines().map(str::to_string).collect())
        }
    }
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Writes to `path`, or to standard output when no path is given.
pub fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            let f = fs::File::create(p).map_err(|e| CliError::io(p, e))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        None => Ok(Box::new(BufWriter::new(std::io::stdout()))),
    }
}

/// Parses JSON lines, reporting the 1-based line number of the first bad one.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| lampat::Error::MalformedData {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

/// Pairs from a JSONL file, or identity pairs from plain-text lines.
pub fn read_pairs(path: &Path, lang: &str) -> Result<Vec<PairRecord>> {
    if is_jsonl(path) {
        return read_jsonl(path);
    }
    Ok(read_lines(path)?
        .into_iter()
        .map(|l| PairRecord {
            source: l.clone(),
            target: l,
            lang: lang.to_string(),
        })
        .collect())
}

/// The configuration named by `--config` (defaults otherwise) with the
/// `--seed` override applied.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.propagate_seed();
    Ok(cfg)
}

pub fn load_stopwords(dir: Option<&Path>) -> Result<StopwordSet> {
    match dir {
        Some(d) => Ok(StopwordSet::load_dir(d)?),
        None => Ok(StopwordSet::new()),
    }
}

pub fn flush(mut w: Box<dyn Write>) -> Result<()> {
    w.flush().map_err(|e| CliError::io("<output>", e))
}
