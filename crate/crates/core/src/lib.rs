//! Unsupervised paraphrase generation: a corrupt-and-reconstruct corpus, a
//! small decoder-only language model fine-tuned through low-rank adapters,
//! virtual adversarial training with projected gradient and projected Newton
//! inner ascent, and paraphrase evaluation metrics.

pub mod advtrain;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod pretrain;
pub mod rng;
pub mod scalar;
pub mod tinylm;

pub use error::{Error, Result};
