//! Embedding-space perturbations: initialisation, norm-ball projections and
//! the two inner ascent rules.

use ndarray::{Array2, Zip};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{frobenius, Scalar};

/// Gradients with a smaller Frobenius norm than this do not move δ.
pub const MIN_GRAD_NORM: f64 = 1e-12;

/// `γ · N(0, σ²)` entries, then projected into the ε-ball.
pub fn init_perturbation<F: Scalar>(
    n: usize,
    d: usize,
    scale: f64,
    std: f64,
    epsilon: f64,
    rng: &mut Rng,
) -> Array2<F> {
    let normal = Normal::new(0.0, std).expect("std is positive");
    let delta = Array2::from_shape_fn((n, d), |_| F::of(scale * normal.sample(rng)));
    project_ball(delta, F::of(epsilon))
}

/// Euclidean projection onto `{‖δ‖_F ≤ ε}`.
pub fn project_ball<F: Scalar>(delta: Array2<F>, epsilon: F) -> Array2<F> {
    let norm = frobenius(&delta);
    if norm <= epsilon {
        return delta;
    }
    let s = epsilon / norm;
    delta.mapv_into(|v| v * s)
}

/// `Π_ε(δ + η·g/‖g‖_F)`; a vanishing gradient leaves δ where it is.
pub fn ascent_step_pgd<F: Scalar>(delta: &Array2<F>, grad: &Array2<F>, eta: F, epsilon: F) -> Array2<F> {
    let gnorm = frobenius(grad);
    if gnorm.as_f64() < MIN_GRAD_NORM {
        return delta.clone();
    }
    let mut out = delta.clone();
    Zip::from(&mut out).and(grad).for_each(|o, &g| *o += eta * (g / gnorm));
    project_ball(out, epsilon)
}

/// Damped positive estimate of the diagonal of `∂²L/∂δ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianDiag<F> {
    pub values: Array2<F>,
    pub damping: F,
}

impl<F: Scalar> HessianDiag<F> {
    /// Constant diagonal, clamped at `damping`.
    pub fn constant(n: usize, d: usize, value: F, damping: F) -> Self {
        HessianDiag {
            values: Array2::from_elem((n, d), value.max(damping)),
            damping,
        }
    }

    /// `√(Σ H_i v_i²)`.
    pub fn norm(&self, v: &Array2<F>) -> F {
        Zip::from(&self.values)
            .and(v)
            .fold(F::zero(), |acc, &h, &x| acc + h * x * x)
            .sqrt()
    }

    pub fn max_sqrt(&self) -> F {
        self.values.iter().fold(F::zero(), |m, &h| m.max(h)).sqrt()
    }

    pub fn min_sqrt(&self) -> F {
        self.values.iter().fold(F::infinity(), |m, &h| m.min(h)).sqrt()
    }

    /// `ε·min √H_i`: the H-ball of this radius is the largest one inside the
    /// Euclidean ε-ball, and equals it when `H = I`.
    pub fn radius(&self, epsilon: F) -> F {
        epsilon * self.min_sqrt()
    }
}

/// Radial scaling onto `{‖δ‖_H ≤ ε·min √H_i}`.
pub fn project_h_ball<F: Scalar>(delta: Array2<F>, h: &HessianDiag<F>, epsilon: F) -> Array2<F> {
    let norm = h.norm(&delta);
    let radius = h.radius(epsilon);
    if norm <= radius {
        return delta;
    }
    let s = radius / norm;
    delta.mapv_into(|v| v * s)
}

/// Hutchinson diagonal estimate from gradient differences:
/// `mean_z z ⊙ (∇L(δ + μz) − ∇L(δ)) / μ` over Rademacher probes `z`, taken
/// in absolute value and clamped below at `damping`.
pub fn estimate_hessian_diag<F, G>(
    mut grad_at: G,
    delta: &Array2<F>,
    grad: &Array2<F>,
    probes: usize,
    fd_step: f64,
    damping: f64,
    rng: &mut Rng,
) -> Result<HessianDiag<F>>
where
    F: Scalar,
    G: FnMut(&Array2<F>) -> Result<Array2<F>>,
{
    if probes == 0 {
        return Err(Error::InvalidConfig("hessian_probes must be at least 1".into()));
    }
    let mu = F::of(fd_step);
    let mut acc = Array2::<F>::zeros(delta.raw_dim());
    for _ in 0..probes {
        let z = Array2::from_shape_fn(delta.raw_dim(), |_| {
            if rng.random_bool(0.5) {
                F::one()
            } else {
                -F::one()
            }
        });
        let shifted = delta + &(&z * mu);
        let g = grad_at(&shifted)?;
        if g.dim() != delta.dim() {
            return Err(Error::shape("hessian probe gradient", delta.dim(), g.dim()));
        }
        Zip::from(&mut acc)
            .and(&z)
            .and(&g)
            .and(grad)
            .for_each(|a, &z, &g1, &g0| *a += z * (g1 - g0) / mu);
    }
    let inv = F::one() / F::of(probes as f64);
    let lambda = F::of(damping);
    let mut bad = false;
    let values = acc.mapv(|v| {
        let e = (v * inv).abs();
        if !e.is_finite() {
            bad = true;
        }
        e.max(lambda)
    });
    if bad {
        return Err(Error::HessianEstimateFailed);
    }
    Ok(HessianDiag {
        values,
        damping: lambda,
    })
}

/// `Π_H(δ + η·H⁻¹·g/‖g‖_F)`, projecting in the H-weighted norm.
pub fn ascent_step_pnm<F: Scalar>(
    delta: &Array2<F>,
    grad: &Array2<F>,
    h: &HessianDiag<F>,
    eta: F,
    epsilon: F,
) -> Array2<F> {
    let gnorm = frobenius(grad);
    if gnorm.as_f64() < MIN_GRAD_NORM {
        return delta.clone();
    }
    let mut out = delta.clone();
    Zip::from(&mut out)
        .and(grad)
        .and(&h.values)
        .for_each(|o, &g, &hv| *o += eta * (g / gnorm) / hv);
    project_h_ball(out, h, epsilon)
}
