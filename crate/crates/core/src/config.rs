//! Run configuration: one TOML file with a section per component.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advtrain::VatConfig;
use crate::corpus::{CorruptionConfig, TokenizeMode};
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::metrics::MetricsConfig;
use crate::pretrain::PretrainConfig;
use crate::tinylm::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub mode: TokenizeMode,
    pub max_vocab: usize,
    /// Language code for plain-text corpora.
    pub lang: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            mode: TokenizeMode::Whitespace,
            max_vocab: 70,
            lang: "en".into(),
        }
    }
}

/// Input files must exist when the configuration is validated; the
/// checkpoint directory is created on demand.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub pretrain_corpus: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub eval_set: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed. Every component draws from its own stream of it, keyed
    /// by the component name.
    pub seed: u64,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub vat: VatConfig,
    pub corruption: CorruptionConfig,
    pub decode: DecodeConfig,
    pub pretrain: PretrainConfig,
    pub metrics: MetricsConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Parses TOML and copies the global seed into every component.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        cfg.propagate_seed();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    pub fn propagate_seed(&mut self) {
        self.vat.seed = self.seed;
        self.corruption.seed = self.seed;
        self.decode.seed = self.seed;
        self.pretrain.seed = self.seed;
    }

    /// Checks every component invariant, then that input paths exist.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lora.validate(&self.model)?;
        self.vat.validate()?;
        self.corruption.validate()?;
        self.decode.validate()?;
        self.pretrain.validate()?;
        if self.data.max_vocab > self.model.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "data.max_vocab {} exceeds model.vocab_size {}",
                self.data.max_vocab, self.model.vocab_size
            )));
        }
        let p = &self.paths;
        for path in [&p.corpus, &p.pretrain_corpus, &p.stopwords, &p.vocab, &p.eval_set]
            .into_iter()
            .flatten()
        {
            if !path.exists() {
                return Err(Error::io(
                    path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn sections_and_seed_propagation() {
        let cfg = RunConfig::from_toml("seed = 9\n[vat]\nepochs = 3\neta = 0.5\n[model]\nd_model = 32\n").unwrap();
        assert_eq!(cfg.vat.epochs, 3);
        assert_eq!(cfg.vat.eta, 0.5);
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!((cfg.vat.seed, cfg.decode.seed, cfg.corruption.seed, cfg.pretrain.seed), (9, 9, 9, 9));
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.seed = 4;
        cfg.vat.pgd_epochs = Some(2);
        cfg.paths.checkpoint_dir = Some("out".into());
        cfg.propagate_seed();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml("[vat]\nepsilonn = 1.0\n").is_err());
        assert!(RunConfig::from_toml("[vat]\nepsilon = -1.0\n").unwrap().validate().is_err());
        assert!(RunConfig::from_toml("[lora]\nrank = 40\n").unwrap().validate().is_err());
        assert!(RunConfig::from_toml("[paths]\ncorpus = \"/no/such/file\"\n").unwrap().validate().is_err());
    }
}
