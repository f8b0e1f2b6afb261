//! Full-parameter language-model training of the base model with Adam.
//!
//! Adapter fine-tuning assumes a base that already models text; at desk
//! scale that base has to be trained here first.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::PackedSequence;
use crate::error::{Error, Result};
use crate::rng::component_rng;
use crate::scalar::Scalar;
use crate::tinylm::{loss_rec_grad, GradRequest, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub warmup_steps: usize,
    /// Learning rate at the last step as a fraction of `learning_rate`,
    /// reached by cosine decay after warmup; 1 keeps it constant.
    pub final_lr_ratio: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 0,
            batch_size: 16,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            warmup_steps: 100,
            final_lr_ratio: 1.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("pretrain: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return bad("final_lr_ratio must lie in [0, 1]");
        }
        if !(self.adam_eps > 0.0) || !(self.clip_norm >= 0.0) {
            return bad("adam_eps must be positive and clip_norm non-negative");
        }
        Ok(())
    }
}

impl PretrainConfig {
    /// Linear warmup, then cosine decay towards `final_lr_ratio`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps;
        if step < w {
            return self.learning_rate * step as f64 / w as f64;
        }
        let span = self.steps.saturating_sub(w).max(1) as f64;
        let progress = ((step - w) as f64 / span).min(1.0);
        let r = self.final_lr_ratio;
        self.learning_rate * (r + (1.0 - r) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// A plain causal-LM sequence: every token after the first is predicted.
pub fn lm_sequence(tokens: Vec<usize>) -> PackedSequence {
    let mask = (0..tokens.len()).map(|i| i > 0).collect();
    PackedSequence {
        tokens,
        sep_index: 0,
        mask,
    }
}

struct Adam<F> {
    m: Parameters<F>,
    v: Parameters<F>,
    t: i32,
}

impl<F: Scalar> Adam<F> {
    fn new(params: &Parameters<F>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    fn update(&mut self, params: &mut Parameters<F>, grad: &Parameters<F>, lr: f64, cfg: &PretrainConfig) {
        self.t += 1;
        let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
        let c1 = F::one() - b1.powi(self.t);
        let c2 = F::one() - b2.powi(self.t);
        let (lr, eps) = (F::of(lr), F::of(cfg.adam_eps));
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for (((p, &g), m), v) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// Trains every base tensor on `data` and returns the mean loss of each step.
pub fn pretrain<F: Scalar>(
    params: &mut Parameters<F>,
    data: &[PackedSequence],
    config: &PretrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if config.steps == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = component_rng(config.seed, "pretrain-order");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut adam = Adam::new(params);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let mut grad = params.zeros_like();
        let mut loss = 0.0;
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let seq = &data[order[cursor]];
            cursor += 1;
            let (logits, trace) = params.forward_tokens(&seq.tokens, None, None)?;
            let (l, dlogits) = loss_rec_grad(&logits, seq)?;
            loss += l.as_f64();
            let g = params.backward(&trace, None, &dlogits, GradRequest::PARAMS)?;
            grad.add_scaled(g.params.as_ref().expect("parameter gradient requested"), F::one());
        }
        let inv = F::one() / F::of(config.batch_size as f64);
        let mut scale = inv;
        let norm = grad.sum_squares().sqrt() * inv;
        if !norm.is_finite() || !loss.is_finite() {
            return Err(Error::DivergenceDetected { epoch: 0, step });
        }
        if config.clip_norm > 0.0 && norm.as_f64() > config.clip_norm {
            scale = scale * F::of(config.clip_norm) / norm;
        }
        let mut scaled = params.zeros_like();
        scaled.add_scaled(&grad, scale);
        adam.update(params, &scaled, config.learning_rate_at(step), config);
        losses.push(loss / config.batch_size as f64);
    }
    Ok(losses)
}
