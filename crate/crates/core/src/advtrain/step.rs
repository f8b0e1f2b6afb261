use ndarray::Array2;

use crate::corpus::PackedSequence;
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::rng::Rng;
use crate::scalar::{frobenius, Scalar};
use crate::tinylm::{embed, kl_div_grad, loss_rec_grad, ForwardTrace, GradRequest, Parameters};

use super::perturbation::{
    ascent_step_pgd, ascent_step_pnm, estimate_hessian_diag, init_perturbation, HessianDiag,
};
use super::{Phase, VatConfig};

const MAX_HALVINGS: u32 = 3;
const BOUND_SLACK: f64 = 1e-5;

/// Summary of one minibatch update.
#[derive(Debug, Clone)]
pub struct StepReport<F> {
    pub phase: Phase,
    /// Reconstruction loss at the perturbed points, averaged over the batch
    /// and the ascent steps.
    pub loss_rec: f64,
    pub loss_vadv: f64,
    /// Mean Frobenius norm of the final perturbations.
    pub delta_norm: f64,
    /// Norm of the accumulated adapter gradient.
    pub grad_norm: f64,
    /// Final perturbation of every sequence, in batch order.
    pub perturbations: Vec<Array2<F>>,
    /// Divergence at every accepted perturbation of every sequence,
    /// starting from the initial draw.
    pub vadv_trajectory: Vec<Vec<f64>>,
}

struct Evaluation<F> {
    trace: ForwardTrace<F>,
    logits: Array2<F>,
    vadv: F,
    dkl: Array2<F>,
}

/// The point an ascent step started from, kept for backtracking.
struct Ascent<F> {
    base: Array2<F>,
    base_eval: Evaluation<F>,
    grad: Array2<F>,
    hessian: Option<HessianDiag<F>>,
    eta: F,
    halvings: u32,
}

impl<F: Scalar> Ascent<F> {
    fn candidate(&self, epsilon: F) -> Array2<F> {
        match &self.hessian {
            None => ascent_step_pgd(&self.base, &self.grad, self.eta, epsilon),
            Some(h) => ascent_step_pnm(&self.base, &self.grad, h, self.eta, epsilon),
        }
    }
}

struct SequenceOutcome<F> {
    grad: AdapterSet<F>,
    loss_rec: f64,
    loss_vadv: f64,
    delta: Array2<F>,
    trajectory: Vec<f64>,
}

struct Context<'a, F> {
    params: &'a Parameters<F>,
    adapters: &'a AdapterSet<F>,
    config: &'a VatConfig,
    phase: Phase,
    epoch: usize,
    step: usize,
}

impl<F: Scalar> Context<'_, F> {
    fn diverged(&self) -> Error {
        Error::DivergenceDetected {
            epoch: self.epoch,
            step: self.step,
        }
    }

    fn evaluate(
        &self,
        x: &Array2<F>,
        delta: &Array2<F>,
        clean: &Array2<F>,
        seq: &PackedSequence,
    ) -> Result<Evaluation<F>> {
        let (logits, trace) = self.params.forward(x, Some(delta), Some(self.adapters))?;
        let (vadv, dkl) = kl_div_grad(&logits, clean, &seq.mask)?;
        if !vadv.is_finite() {
            return Err(self.diverged());
        }
        Ok(Evaluation {
            trace,
            logits,
            vadv,
            dkl,
        })
    }

    /// Evaluates `delta`; with backtracking, an ascent step that lowered the
    /// divergence is retried with half the step size, and after
    /// [`MAX_HALVINGS`] failures the step is dropped.
    fn accept(
        &self,
        x: &Array2<F>,
        delta: &mut Array2<F>,
        clean: &Array2<F>,
        seq: &PackedSequence,
        mut ascent: Option<Ascent<F>>,
    ) -> Result<Evaluation<F>> {
        let eps = F::of(self.config.epsilon);
        loop {
            let eval = self.evaluate(x, delta, clean, seq)?;
            let Some(a) = ascent.as_mut().filter(|_| self.config.backtracking) else {
                return Ok(eval);
            };
            if eval.vadv >= a.base_eval.vadv {
                return Ok(eval);
            }
            if a.halvings == MAX_HALVINGS {
                let a = ascent.take().unwrap();
                *delta = a.base;
                return Ok(a.base_eval);
            }
            a.halvings += 1;
            a.eta = a.eta / F::of(2.0);
            *delta = a.candidate(eps);
        }
    }

    fn vadv_grad_at(
        &self,
        x: &Array2<F>,
        delta: &Array2<F>,
        clean: &Array2<F>,
        seq: &PackedSequence,
    ) -> Result<Array2<F>> {
        let e = self.evaluate(x, delta, clean, seq)?;
        self.input_grad(&e)
    }

    fn input_grad(&self, e: &Evaluation<F>) -> Result<Array2<F>> {
        let g = self
            .params
            .backward(&e.trace, Some(self.adapters), &e.dkl, GradRequest::INPUT)?;
        Ok(g.input.expect("input gradient requested"))
    }

    fn check_bound(&self, delta: &Array2<F>, hessian: Option<&HessianDiag<F>>) {
        let eps = self.config.epsilon * (1.0 + BOUND_SLACK);
        match hessian {
            None => debug_assert!(frobenius(delta).as_f64() <= eps, "PGD left the ε-ball"),
            Some(h) => {
                let radius = h.radius(F::of(self.config.epsilon)).as_f64() * (1.0 + BOUND_SLACK);
                debug_assert!(h.norm(delta).as_f64() <= radius, "PNM left the H-ball");
                debug_assert!(frobenius(delta).as_f64() <= eps, "PNM left the ε-ball");
            }
        }
    }

    fn run_sequence(&self, seq: &PackedSequence, rng: &mut Rng) -> Result<SequenceOutcome<F>> {
        let cfg = self.config;
        let x = embed(&seq.tokens, self.params)?;
        let (clean, _) = self.params.forward(&x, None, Some(self.adapters))?;
        let (n, d) = x.dim();
        let eps = F::of(cfg.epsilon);
        let mut delta: Array2<F> =
            init_perturbation(n, d, cfg.init_scale, cfg.init_std, cfg.epsilon, rng);
        let mut grad = self.adapters.zeros_like();
        let mut trajectory = Vec::with_capacity(cfg.ascent_steps + 1);
        let (mut loss_rec, mut loss_vadv) = (0.0, 0.0);
        let mut ascent: Option<Ascent<F>> = None;

        for _ in 0..cfg.ascent_steps {
            let eval = self.accept(&x, &mut delta, &clean, seq, ascent.take())?;
            trajectory.push(eval.vadv.as_f64());
            let (rec, drec) = loss_rec_grad(&eval.logits, seq)?;
            if !rec.is_finite() {
                return Err(self.diverged());
            }
            loss_rec += rec.as_f64();
            loss_vadv += eval.vadv.as_f64();

            let mut dtheta = drec;
            if cfg.alpha != 0.0 {
                dtheta.scaled_add(F::of(cfg.alpha), &eval.dkl);
            }
            let g = self
                .params
                .backward(&eval.trace, Some(self.adapters), &dtheta, GradRequest::ADAPTERS)?;
            grad.add_scaled(g.adapters.as_ref().expect("adapter gradient requested"), F::one());

            let g_adv = self.input_grad(&eval)?;
            let hessian = match self.phase {
                Phase::Pgd => None,
                Phase::Pnm => Some(estimate_hessian_diag(
                    |p: &Array2<F>| self.vadv_grad_at(&x, p, &clean, seq),
                    &delta,
                    &g_adv,
                    cfg.hessian_probes,
                    cfg.hessian_fd_step,
                    cfg.damping,
                    rng,
                )?),
            };
            let a = Ascent {
                base: delta.clone(),
                base_eval: eval,
                grad: g_adv,
                hessian,
                eta: F::of(cfg.eta),
                halvings: 0,
            };
            delta = a.candidate(eps);
            self.check_bound(&delta, a.hessian.as_ref());
            ascent = Some(a);
        }
        if cfg.backtracking {
            let eval = self.accept(&x, &mut delta, &clean, seq, ascent.take())?;
            trajectory.push(eval.vadv.as_f64());
        }
        let k = cfg.ascent_steps as f64;
        Ok(SequenceOutcome {
            grad,
            loss_rec: loss_rec / k,
            loss_vadv: loss_vadv / k,
            delta,
            trajectory,
        })
    }
}

/// One minibatch of adversarial training: `K` ascent steps per sequence,
/// gradient accumulation over them, then `θ ← θ − τ·g_K` on the adapters.
///
/// `epoch` is 1-based and selects the ascent rule; `step` is only used to
/// label a divergence.
pub fn minibatch_step<F: Scalar>(
    params: &Parameters<F>,
    adapters: &mut AdapterSet<F>,
    batch: &[PackedSequence],
    config: &VatConfig,
    epoch: usize,
    step: usize,
    rng: &mut Rng,
) -> Result<StepReport<F>> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let phase = config.phase(epoch);
    let outcomes = {
        let ctx = Context {
            params,
            adapters,
            config,
            phase,
            epoch,
            step,
        };
        batch
            .iter()
            .map(|seq| ctx.run_sequence(seq, rng))
            .collect::<Result<Vec<_>>>()?
    };

    let mut g = adapters.zeros_like();
    for o in &outcomes {
        g.add_scaled(&o.grad, F::one());
    }
    let scale = F::one() / F::of((config.ascent_steps * batch.len()) as f64);
    for t in g.tensors_mut() {
        for v in t.data.iter_mut() {
            *v = *v * scale;
        }
    }
    if !g.all_finite() {
        return Err(Error::DivergenceDetected { epoch, step });
    }
    adapters.add_scaled(&g, -F::of(config.tau));

    let b = batch.len() as f64;
    Ok(StepReport {
        phase,
        loss_rec: outcomes.iter().map(|o| o.loss_rec).sum::<f64>() / b,
        loss_vadv: outcomes.iter().map(|o| o.loss_vadv).sum::<f64>() / b,
        delta_norm: outcomes.iter().map(|o| frobenius(&o.delta).as_f64()).sum::<f64>() / b,
        grad_norm: g.sum_squares().as_f64().sqrt(),
        vadv_trajectory: outcomes.iter().map(|o| o.trajectory.clone()).collect(),
        perturbations: outcomes.into_iter().map(|o| o.delta).collect(),
    })
}
