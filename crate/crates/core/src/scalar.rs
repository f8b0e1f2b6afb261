//! Floating point abstraction shared by the model and the optimizers.
//!
//! Training runs in `f32`; gradient checks run the same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};

pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Raw bit pattern, widened to 64 bits.
    fn bits(self) -> u64;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// Frobenius norm, accumulated in row-major order.
pub fn frobenius<F: Scalar>(m: &Array2<F>) -> F {
    m.iter().fold(F::zero(), |acc, &v| acc + v * v).sqrt()
}

pub fn cast_matrix<F: Scalar, G: Scalar>(m: &Array2<F>) -> Array2<G> {
    m.mapv(|v| G::of(v.as_f64()))
}

pub fn all_finite<F: Scalar>(m: &Array2<F>) -> bool {
    m.iter().all(|v| v.is_finite())
}
