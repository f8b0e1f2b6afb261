use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use lampat::advtrain::HistoryRow;

use crate::{io, CliError, Common, Result};

pub const HISTORY_COLUMNS: [&str; 7] = ["epoch", "step", "loss_rec", "loss_vadv", "delta_norm", "grad_norm", "phase"];
const CURVES: [&str; 4] = ["loss_rec", "loss_vadv", "delta_norm", "grad_norm"];

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// `PATH` or `PATH=LABEL`; the label defaults to the parent directory name.
    #[arg(long, required = true, num_args = 1..)]
    pub history: Vec<String>,
}

/// Per-epoch means of one history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub curves: [f64; 4],
    pub phase: String,
}

fn split_label(arg: &str) -> (PathBuf, String) {
    match arg.rsplit_once('=') {
        Some((path, label)) if !label.is_empty() => (PathBuf::from(path), label.to_string()),
        _ => {
            let path = PathBuf::from(arg);
            let label = path
                .parent()
                .and_then(|p| p.file_name())
                .or_else(|| path.file_stem())
                .map_or_else(|| arg.to_string(), |s| s.to_string_lossy().into_owned());
            (path, label)
        }
    }
}

fn load(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    let header = r
        .headers()
        .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?
        .clone();
    if header.iter().ne(HISTORY_COLUMNS) {
        return Err(CliError::Schema(format!(
            "{}: columns {:?}, expected {:?}",
            path.display(),
            header.iter().collect::<Vec<_>>(),
            HISTORY_COLUMNS
        )));
    }
    drop(header);
    super::train::read_history(path)
}

pub fn per_epoch(rows: &[HistoryRow]) -> Vec<EpochRow> {
    let mut groups: BTreeMap<usize, Vec<&HistoryRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.epoch).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(epoch, g)| {
            let n = g.len() as f64;
            let mean = |f: fn(&HistoryRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
            EpochRow {
                epoch,
                curves: [
                    mean(|r| r.loss_rec),
                    mean(|r| r.loss_vadv),
                    mean(|r| r.delta_norm),
                    mean(|r| r.grad_norm),
                ],
                phase: g.last().map_or_else(String::new, |r| r.phase.as_str().to_string()),
            }
        })
        .collect()
}

/// Plot-ready CSV: one line per epoch, one column group per run. A single
/// run keeps the plain column names; several get `_<label>` suffixes.
pub fn merge(runs: &[(String, Vec<EpochRow>)]) -> Vec<Vec<String>> {
    let suffix = |label: &str, col: &str| {
        if runs.len() == 1 {
            col.to_string()
        } else {
            format!("{col}_{label}")
        }
    };
    let mut header = vec!["epoch".to_string()];
    for (label, _) in runs {
        header.extend(CURVES.iter().chain(["phase"].iter()).map(|c| suffix(label, c)));
    }
    let epochs: std::collections::BTreeSet<usize> = runs.iter().flat_map(|(_, r)| r.iter().map(|e| e.epoch)).collect();
    let mut out = vec![header];
    for epoch in epochs {
        let mut line = vec![epoch.to_string()];
        for (_, rows) in runs {
            match rows.iter().find(|r| r.epoch == epoch) {
                Some(r) => {
                    line.extend(r.curves.iter().map(|v| format!("{v:.6}")));
                    line.push(r.phase.clone());
                }
                None => line.extend(std::iter::repeat_n(String::new(), CURVES.len() + 1)),
            }
        }
        out.push(line);
    }
    out
}

pub fn render(runs: &[(String, Vec<EpochRow>)]) -> String {
    let mut out = format!(
        "{:<16} {:>6} {:>10} {:>10} {:>12} {:>10} {:>9}\n",
        "label", "epochs", "rec_first", "rec_last", "vadv_last", "delta_last", "pnm_from"
    );
    for (label, rows) in runs {
        let (Some(first), Some(last)) = (rows.first(), rows.last()) else {
            continue;
        };
        let pnm = rows
            .iter()
            .find(|r| r.phase == "pnm")
            .map_or_else(|| "-".to_string(), |r| r.epoch.to_string());
        let _ = writeln!(
            out,
            "{label:<16} {:>6} {:>10.4} {:>10.4} {:>12.6} {:>10.4} {pnm:>9}",
            rows.len(),
            first.curves[0],
            last.curves[0],
            last.curves[1],
            last.curves[2],
        );
    }
    out
}

pub fn run(args: ReportArgs) -> Result<()> {
    let mut runs = Vec::new();
    for arg in &args.history {
        let (path, label) = split_label(arg);
        runs.push((label, per_epoch(&load(&path)?)));
    }
    let mut labels: Vec<&str> = runs.iter().map(|(l, _)| l.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() != runs.len() {
        return Err(CliError::Usage("history labels must be distinct; use PATH=LABEL".into()));
    }
    let table = render(&runs);
    if let Some(prefix) = &args.common.out {
        let mut w = csv::Writer::from_writer(Vec::new());
        for line in merge(&runs) {
            w.write_record(&line).expect("in-memory writer cannot fail");
        }
        let bytes = w.into_inner().expect("in-memory writer cannot fail");
        let mut csv_path = prefix.as_os_str().to_owned();
        csv_path.push(".csv");
        io::write_file(Path::new(&csv_path), &bytes)?;
        let mut txt_path = prefix.as_os_str().to_owned();
        txt_path.push(".txt");
        io::write_file(Path::new(&txt_path), table.as_bytes())?;
    }
    print!("{table}");
    Ok(())
}
