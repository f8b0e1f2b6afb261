#![allow(dead_code)]

use lampat::corpus::{pack, PackedSequence, TokenSeq, TrainingPair};
use lampat::lora::{AdapterSet, LoraConfig};
use lampat::rng::{component_rng, Rng};
use lampat::tinylm::{ModelConfig, Parameters};
use rand_distr::{Distribution, Normal};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_len: 16,
        dropout: 0.0,
    }
}

/// Every tensor drawn from N(0, std²), so layer norms and biases are
/// exercised away from their identity initialisation.
pub fn randomize(params: &mut Parameters<f64>, std: f64, rng: &mut Rng) {
    let normal = Normal::new(0.0, std).unwrap();
    for t in params.tensors_mut() {
        let gain = t.name.ends_with("_gain");
        for v in t.data.iter_mut() {
            *v = normal.sample(rng) + if gain { 1.0 } else { 0.0 };
        }
    }
}

pub fn randomize_adapters(adapters: &mut AdapterSet<f64>, std: f64, rng: &mut Rng) {
    let normal = Normal::new(0.0, std).unwrap();
    for t in adapters.tensors_mut() {
        for v in t.data.iter_mut() {
            *v = normal.sample(rng);
        }
    }
}

pub fn tiny_model(seed: u64) -> (Parameters<f64>, AdapterSet<f64>) {
    let mut rng = component_rng(seed, "test-model");
    let cfg = tiny_config();
    let mut params = Parameters::<f64>::init(cfg, &mut rng).unwrap();
    randomize(&mut params, 0.5, &mut rng);
    let lora = LoraConfig { rank: 2, ..Default::default() };
    let mut adapters = AdapterSet::new(&cfg, &lora, &mut rng).unwrap();
    randomize_adapters(&mut adapters, 0.3, &mut rng);
    (params, adapters)
}

pub fn packed(source: &[usize], target: &[usize], max_len: usize) -> PackedSequence {
    let mk = |ids: &[usize]| TokenSeq { ids: ids.to_vec(), surfaces: vec![String::new(); ids.len()] };
    pack(&TrainingPair { source: mk(source), target: mk(target) }, max_len).unwrap()
}

/// Relative error with an absolute floor so that entries whose true gradient
/// is numerically zero do not dominate.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
