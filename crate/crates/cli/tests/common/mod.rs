#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lampat::config::RunConfig;
use lampat::tinylm::ModelConfig;

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn lampat(args: &[&str]) -> Run {
    let out: Output = Command::new(env!("CARGO_BIN_EXE_lampat"))
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn ok(args: &[&str]) -> Run {
    let r = lampat(args);
    assert_eq!(r.code, 0, "lampat {args:?} failed:\n{}", r.stderr);
    r
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub const CORPUS: &str = "\
the cat sat on the mat .
a dog ran in the park .
the bird sang a song .
my friend likes green tea .
the sun is warm today .
we walk to the old market .
a child reads the red book .
the river runs to the sea .
";

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
    pub corpus: PathBuf,
}

impl Fixture {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

pub fn tiny_config(epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 5;
    cfg.model = ModelConfig {
        vocab_size: 48,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_len: 24,
        dropout: 0.0,
    };
    cfg.lora.rank = 2;
    cfg.lora.alpha = 4.0;
    cfg.vat.epochs = epochs;
    cfg.vat.batch_size = 4;
    cfg.vat.ascent_steps = 2;
    cfg.vat.tau = 0.01;
    cfg.pretrain.steps = 20;
    cfg.data.max_vocab = 48;
    cfg
}

/// A tiny model, corpus and stopword list; `edit` adjusts the configuration
/// before it is written.
pub fn fixture(epochs: usize, edit: impl FnOnce(&mut RunConfig)) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    fs::write(&corpus, CORPUS).unwrap();
    let stop = dir.path().join("stopwords");
    fs::create_dir(&stop).unwrap();
    fs::write(stop.join("en.txt"), "the\na\nto\n").unwrap();
    let mut cfg = tiny_config(epochs);
    cfg.paths.corpus = Some(corpus.clone());
    cfg.paths.pretrain_corpus = Some(corpus.clone());
    cfg.paths.stopwords = Some(stop);
    edit(&mut cfg);
    let config = dir.path().join("run.toml");
    fs::write(&config, cfg.to_toml()).unwrap();
    Fixture { dir, config, corpus }
}
