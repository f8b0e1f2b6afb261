use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use lampat::checkpoint::Checkpoint;
use lampat::decode::Paraphraser;
use lampat::metrics::{evaluate_corpus, EvalRecord, MetricReport, ModelEncoder};
use lampat::rng::component_rng;

use crate::{io, CliError, Common, Result};

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// `PATH` or `PATH=LABEL`; the label defaults to the file stem. The
    /// first checkpoint's base model encodes sentences for every label.
    #[arg(long, required = true, num_args = 1..)]
    pub checkpoint: Vec<String>,
    /// JSONL evaluation records.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
}

fn split_label(arg: &str) -> (PathBuf, String) {
    match arg.rsplit_once('=') {
        Some((path, label)) if !label.is_empty() => (PathBuf::from(path), label.to_string()),
        _ => {
            let path = PathBuf::from(arg);
            let label = path
                .file_stem()
                .map_or_else(|| arg.to_string(), |s| s.to_string_lossy().into_owned());
            (path, label)
        }
    }
}

/// Fills in missing candidates by paraphrasing each input with `ckpt`.
fn complete(records: &[EvalRecord], ckpt: &Checkpoint, seed: Option<u64>, stopwords: Option<&Path>) -> Result<Vec<EvalRecord>> {
    let mut cfg = ckpt.config.clone();
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.propagate_seed();
    }
    let stopwords = super::paraphrase::inference_stopwords(stopwords, &cfg)?;
    let paraphraser = Paraphraser {
        params: &ckpt.params,
        adapters: Some(&ckpt.adapters),
        vocab: &ckpt.vocab,
        mode: cfg.data.mode,
        stopwords: &stopwords,
        corruption: &cfg.corruption,
        decode: &cfg.decode,
    };
    let mut rng = component_rng(cfg.seed, "decode");
    Ok(records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let candidate = r.candidate.clone().unwrap_or_else(|| {
                paraphraser.paraphrase(&r.input, &r.lang, &mut rng).unwrap_or_else(|e| {
                    eprintln!("warning: record {}: {e}; echoing the input", i + 1);
                    r.input.clone()
                })
            });
            EvalRecord {
                candidate: Some(candidate),
                ..r.clone()
            }
        })
        .collect())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn run(args: EvaluateArgs) -> Result<()> {
    let prefix = args
        .common
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("evaluate needs --out PREFIX".into()))?;
    let runs: Vec<(PathBuf, String)> = args.checkpoint.iter().map(|a| split_label(a)).collect();
    let checkpoints = runs
        .iter()
        .map(|(p, _)| Checkpoint::load(p))
        .collect::<lampat::Result<Vec<_>>>()?;
    let eval_path = args
        .eval
        .clone()
        .or_else(|| checkpoints[0].config.paths.eval_set.clone())
        .ok_or_else(|| CliError::Usage("evaluate needs --eval FILE".into()))?;
    let records: Vec<EvalRecord> = io::read_jsonl(&eval_path)?;
    if records.is_empty() {
        return Err(lampat::Error::EmptyCorpus.into());
    }

    let base = &checkpoints[0];
    let encoder = ModelEncoder {
        params: &base.params,
        adapters: None,
        vocab: &base.vocab,
        mode: base.config.data.mode,
    };
    let mut reports = Vec::new();
    for ((_, label), ckpt) in runs.iter().zip(&checkpoints) {
        let scored = complete(&records, ckpt, args.common.seed, args.stopwords.as_deref())?;
        let mut lines = String::new();
        for r in &scored {
            lines.push_str(&serde_json::to_string(r).expect("records always serialize"));
            lines.push('\n');
        }
        io::write_file(&with_suffix(&prefix, &format!(".{label}.jsonl")), lines.as_bytes())?;
        let report = evaluate_corpus(&scored, &encoder, base.config.data.mode, &base.config.metrics)?;
        reports.push((label.clone(), report));
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MetricReport::csv_header()).expect("in-memory writer cannot fail");
    for (label, report) in &reports {
        report.write_csv(label, &mut w)?;
    }
    let bytes = w.into_inner().expect("in-memory writer cannot fail");
    io::write_file(&with_suffix(&prefix, ".csv"), &bytes)?;
    let rows: Vec<(String, &MetricReport)> = reports.iter().map(|(l, r)| (l.clone(), r)).collect();
    let table = MetricReport::render_table(&rows);
    io::write_file(&with_suffix(&prefix, ".txt"), table.as_bytes())?;
    let mut stdout = std::io::stdout();
    stdout.write_all(table.as_bytes()).map_err(|e| CliError::io("<stdout>", e))?;
    Ok(())
}
