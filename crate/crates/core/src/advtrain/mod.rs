//! Virtual adversarial training of the adapters.
//!
//! Each minibatch draws a random embedding perturbation per sequence, takes
//! `K` ascent steps on the divergence between perturbed and clean outputs
//! (normalised gradient steps early in training, diagonally preconditioned
//! Newton-like steps later), averages the adapter gradients of the combined
//! loss over the `K` perturbed points and applies one SGD update.

mod perturbation;
mod step;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use perturbation::{
    ascent_step_pgd, ascent_step_pnm, estimate_hessian_diag, init_perturbation, project_ball,
    project_h_ball, HessianDiag, MIN_GRAD_NORM,
};
pub use step::{minibatch_step, StepReport};
pub use train::{train, train_from, CheckpointSink, HistoryRow, NoCheckpoints, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pgd,
    Pnm,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pgd => "pgd",
            Phase::Pnm => "pnm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VatConfig {
    /// Perturbation bound ε.
    pub epsilon: f64,
    /// Adapter learning rate τ.
    pub tau: f64,
    /// Weight α of the divergence term in the adapter objective.
    pub alpha: f64,
    /// Ascent step size η.
    pub eta: f64,
    /// Inner ascent steps K.
    pub ascent_steps: usize,
    pub epochs: usize,
    /// Epochs that use projected gradient steps; later ones use projected
    /// Newton steps. Defaults to half of `epochs`.
    pub pgd_epochs: Option<usize>,
    /// γ
    pub init_scale: f64,
    /// σ
    pub init_std: f64,
    /// λ, lower clamp of the Hessian diagonal.
    pub damping: f64,
    pub hessian_probes: usize,
    pub hessian_fd_step: f64,
    /// Halve η (up to three times) when an ascent step lowers the divergence.
    pub backtracking: bool,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for VatConfig {
    fn default() -> Self {
        VatConfig {
            epsilon: 1.0,
            tau: 1e-3,
            alpha: 1.0,
            eta: 0.1,
            ascent_steps: 3,
            epochs: 10,
            pgd_epochs: None,
            init_scale: 0.1,
            init_std: 1.0,
            damping: 1e-3,
            hessian_probes: 1,
            hessian_fd_step: 1e-3,
            backtracking: true,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl VatConfig {
    pub fn pgd_epochs(&self) -> usize {
        self.pgd_epochs.unwrap_or(self.epochs / 2)
    }

    /// Ascent rule used in `epoch` (1-based).
    pub fn phase(&self, epoch: usize) -> Phase {
        if epoch <= self.pgd_epochs() {
            Phase::Pgd
        } else {
            Phase::Pnm
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epsilon", self.epsilon),
            ("tau", self.tau),
            ("eta", self.eta),
            ("init_std", self.init_std),
            ("damping", self.damping),
            ("hessian_fd_step", self.hessian_fd_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("init_scale", self.init_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.ascent_steps == 0 {
            return Err(Error::InvalidConfig("ascent_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.hessian_probes == 0 {
            return Err(Error::InvalidConfig("hessian_probes must be at least 1".into()));
        }
        if self.pgd_epochs() > self.epochs {
            return Err(Error::InvalidConfig(format!(
                "pgd_epochs {} exceeds epochs {}",
                self.pgd_epochs(),
                self.epochs
            )));
        }
        Ok(())
    }
}
