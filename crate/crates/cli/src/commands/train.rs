use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use lampat::advtrain::{train_from, CheckpointSink, HistoryRow};
use lampat::checkpoint::{Checkpoint, DirLock};
use lampat::config::RunConfig;
use lampat::corpus::{build_vocab, Vocab};
use lampat::lora::AdapterSet;
use lampat::pretrain::pretrain;
use lampat::rng::component_rng;
use lampat::tinylm::Parameters;

use crate::{io, CliError, Common, Result};

pub const HISTORY_FILE: &str = "history.csv";
pub const FINAL_FILE: &str = "final.ckpt";

pub fn epoch_file(epoch: usize) -> String {
    format!("epoch-{epoch:03}.ckpt")
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Continue from a checkpoint. Its base model and vocabulary are kept;
    /// `--config` may replace the rest of its configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

struct Start {
    cfg: RunConfig,
    vocab: Vocab,
    params: Parameters<f32>,
    adapters: AdapterSet<f32>,
    completed: usize,
    history: Vec<HistoryRow>,
}

pub fn run(args: TrainArgs) -> Result<()> {
    let start = match &args.resume {
        Some(path) => resume(path, &args.common)?,
        None => fresh(&args.common)?,
    };
    let Start {
        cfg,
        vocab,
        params,
        adapters,
        completed,
        history,
    } = start;
    let dir = args
        .common
        .out
        .clone()
        .or_else(|| cfg.paths.checkpoint_dir.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set paths.checkpoint_dir".into()))?;
    let _lock = DirLock::acquire(&dir)?;

    let mut sink = DirSink {
        dir: dir.clone(),
        cfg: cfg.clone(),
        vocab: vocab.clone(),
        params: params.clone(),
        prior: history,
        total: cfg.vat.epochs,
        reported: 0,
    };
    if args.resume.is_none() {
        sink.save(0, &adapters, &[], false, &epoch_file(0))?;
    }
    let outcome = if completed >= cfg.vat.epochs {
        lampat::advtrain::TrainOutcome {
            adapters,
            history: Vec::new(),
        }
    } else {
        let corpus = cfg
            .paths
            .corpus
            .as_deref()
            .ok_or_else(|| CliError::Usage("paths.corpus is required for training".into()))?;
        let stopwords = io::load_stopwords(cfg.paths.stopwords.as_deref())?;
        let data = super::training_data(corpus, &vocab, &stopwords, &cfg)?;
        eprintln!("training on {} sequences for {} epochs", data.len(), cfg.vat.epochs - completed);
        match train_from(&data, &params, adapters, &cfg.vat, completed, &mut sink) {
            Ok(o) => o,
            Err(e @ lampat::Error::DivergenceDetected { .. }) => {
                let last = match (&args.resume, sink.reported) {
                    (Some(path), 0) => path.clone(),
                    (_, epoch) => dir.join(epoch_file(epoch)),
                };
                eprintln!("last good checkpoint: {}", last.display());
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        }
    };
    let final_epoch = cfg.vat.epochs.max(completed);
    sink.save(final_epoch, &outcome.adapters, &outcome.history, true, FINAL_FILE)?;
    eprintln!("wrote {}", dir.join(FINAL_FILE).display());
    Ok(())
}

fn fresh(common: &crate::Common) -> Result<Start> {
    let cfg = io::load_config(common)?;
    cfg.validate()?;
    let vocab = match &cfg.paths.vocab {
        Some(p) => Vocab::load(p)?,
        None => {
            let mut lines = Vec::new();
            for p in [&cfg.paths.corpus, &cfg.paths.pretrain_corpus].into_iter().flatten() {
                lines.extend(super::corpus_texts(p)?);
            }
            if lines.is_empty() {
                return Err(CliError::Usage("set paths.vocab or paths.corpus to obtain a vocabulary".into()));
            }
            build_vocab(&lines, cfg.data.mode, cfg.data.max_vocab)?
        }
    };
    if vocab.len() > cfg.model.vocab_size {
        return Err(lampat::Error::InvalidConfig(format!(
            "vocabulary has {} entries but model.vocab_size is {}",
            vocab.len(),
            cfg.model.vocab_size
        ))
        .into());
    }
    let mut params = Parameters::<f32>::init(cfg.model.clone(), &mut component_rng(cfg.seed, "model-init"))?;
    if cfg.pretrain.steps > 0 {
        let path = cfg
            .paths
            .pretrain_corpus
            .as_deref()
            .ok_or_else(|| CliError::Usage("pretrain.steps > 0 needs paths.pretrain_corpus".into()))?;
        let data = super::pretrain_data(path, &vocab, &cfg)?;
        eprintln!("pretraining on {} sequences for {} steps", data.len(), cfg.pretrain.steps);
        let losses = pretrain(&mut params, &data, &cfg.pretrain)?;
        let tail = &losses[losses.len().saturating_sub(100)..];
        eprintln!(
            "pretraining loss {:.3} -> {:.3}",
            losses.first().copied().unwrap_or(f64::NAN),
            tail.iter().sum::<f64>() / tail.len().max(1) as f64
        );
    }
    let adapters = AdapterSet::new(&cfg.model, &cfg.lora, &mut component_rng(cfg.seed, "lora-init"))?;
    Ok(Start {
        cfg,
        vocab,
        params,
        adapters,
        completed: 0,
        history: Vec::new(),
    })
}

fn resume(path: &Path, common: &crate::Common) -> Result<Start> {
    let ckpt = Checkpoint::load(path)?;
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => ckpt.config.clone(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.propagate_seed();
    cfg.model = ckpt.config.model.clone();
    cfg.lora = ckpt.config.lora.clone();
    cfg.validate()?;
    let history = match (&ckpt.history, path.parent()) {
        (Some(name), Some(dir)) if dir.join(name).exists() => read_history(&dir.join(name))?
            .into_iter()
            .filter(|r| r.epoch <= ckpt.epoch)
            .collect(),
        _ => Vec::new(),
    };
    eprintln!("resuming after epoch {}", ckpt.epoch);
    Ok(Start {
        cfg,
        vocab: ckpt.vocab,
        params: ckpt.params,
        adapters: ckpt.adapters,
        completed: ckpt.epoch,
        history,
    })
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_failure(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_failure(path, e))).collect()
}

fn csv_failure(path: &Path, e: csv::Error) -> CliError {
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => CliError::io(path, io),
            _ => unreachable!(),
        },
        _ => lampat::Error::MalformedData {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        }
        .into(),
    }
}

struct DirSink {
    dir: PathBuf,
    cfg: RunConfig,
    vocab: Vocab,
    params: Parameters<f32>,
    prior: Vec<HistoryRow>,
    total: usize,
    reported: usize,
}

impl DirSink {
    fn save(&self, epoch: usize, adapters: &AdapterSet<f32>, rows: &[HistoryRow], is_final: bool, name: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.prior.iter().chain(rows) {
            w.serialize(row).expect("history rows always serialize");
        }
        let bytes = w.into_inner().expect("in-memory writer cannot fail");
        let tmp = self.dir.join(format!("{HISTORY_FILE}.tmp"));
        fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
        let history = self.dir.join(HISTORY_FILE);
        fs::rename(&tmp, &history).map_err(|e| CliError::io(&history, e))?;
        let ckpt = Checkpoint {
            config: self.cfg.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            adapters: adapters.clone(),
            epoch,
            is_final,
            history: Some(HISTORY_FILE.to_string()),
        };
        ckpt.save(&self.dir.join(name))?;
        Ok(())
    }
}

impl CheckpointSink<f32> for DirSink {
    fn epoch_end(&mut self, epoch: usize, adapters: &AdapterSet<f32>, history: &[HistoryRow]) -> lampat::Result<()> {
        let rows: Vec<&HistoryRow> = history.iter().filter(|r| r.epoch == epoch).collect();
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&HistoryRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        eprintln!(
            "epoch {epoch}/{} [{}] loss_rec {:.4} loss_vadv {:.5} delta_norm {:.3}",
            self.total,
            rows.last().map_or("-", |r| r.phase.as_str()),
            mean(|r| r.loss_rec),
            mean(|r| r.loss_vadv),
            mean(|r| r.delta_norm),
        );
        self.save(epoch, adapters, history, false, &epoch_file(epoch))
            .map_err(|e| match e {
                CliError::Core(c) => c,
                CliError::Io { path, source } => lampat::Error::Io { path, source },
                other => lampat::Error::InvalidConfig(other.to_string()),
            })?;
        self.reported = epoch;
        Ok(())
    }
}
