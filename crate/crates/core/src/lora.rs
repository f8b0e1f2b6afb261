//! Low-rank adapters on the query and value projections.
//!
//! An adapter replaces a frozen `d×k` weight `W` with `W + s·B·A`, where
//! `B` is `d×r`, `A` is `r×k` and `s = alpha / r`. `B` starts at zero so a
//! fresh adapter leaves the base model's function untouched.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tinylm::params::{fill_normal, next_version, TensorMut, TensorRef};
use crate::tinylm::{ModelConfig, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    /// Scaling numerator; the adapter update is multiplied by `alpha / rank`.
    pub alpha: f64,
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            init_std: 0.02,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let d = model.d_model;
        if self.rank == 0 || self.rank > d / 2 {
            return Err(Error::InvalidConfig(format!(
                "lora rank must lie in 1..={} for d_model {d}, got {}",
                d / 2,
                self.rank
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig("lora alpha must be positive".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::InvalidConfig("lora init_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdapterTarget {
    Query,
    Value,
}

impl AdapterTarget {
    pub const ALL: [AdapterTarget; 2] = [AdapterTarget::Query, AdapterTarget::Value];

    pub fn name(self) -> &'static str {
        match self {
            AdapterTarget::Query => "query",
            AdapterTarget::Value => "value",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoRAAdapter<F> {
    /// `r×k`
    pub a: Array2<F>,
    /// `d×r`
    pub b: Array2<F>,
    pub scaling: F,
}

impl<F: Scalar> LoRAAdapter<F> {
    pub fn new(d: usize, k: usize, config: &LoraConfig, rng: &mut Rng) -> Result<Self> {
        let r = config.rank;
        if r == 0 || r > d.min(k) / 2 {
            return Err(Error::InvalidConfig(format!(
                "rank {r} violates 1 <= r <= min({d}, {k})/2"
            )));
        }
        let mut a = Array2::zeros((r, k));
        fill_normal(&mut a, config.init_std, rng);
        Ok(LoRAAdapter {
            a,
            b: Array2::zeros((d, r)),
            scaling: F::of(config.scaling()),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    /// Dense `s·B·A`.
    pub fn delta(&self) -> Array2<F> {
        self.b.dot(&self.a) * self.scaling
    }

    fn zeros_like(&self) -> Self {
        LoRAAdapter {
            a: Array2::zeros(self.a.raw_dim()),
            b: Array2::zeros(self.b.raw_dim()),
            scaling: self.scaling,
        }
    }

    fn check(&self, w: &Array2<F>) -> Result<()> {
        let (d, k) = w.dim();
        if self.b.nrows() != d || self.a.ncols() != k || self.b.ncols() != self.a.nrows() {
            return Err(Error::shape("lora adapter", (d, k), (self.b.nrows(), self.a.ncols())));
        }
        Ok(())
    }
}

/// `W + s·B·A`; `w` is left as is.
pub fn effective_weight<F: Scalar>(w: &Array2<F>, adapter: &LoRAAdapter<F>) -> Result<Array2<F>> {
    adapter.check(w)?;
    Ok(w + &adapter.delta())
}

/// Folds the adapter into a dense matrix. Merging the same adapter twice adds
/// its update twice.
pub fn merge<F: Scalar>(adapter: &LoRAAdapter<F>, w: &Array2<F>) -> Result<Array2<F>> {
    effective_weight(w, adapter)
}

/// Adapter parameters for one `d×k` matrix: `r·(d + k)`.
pub fn adapter_param_count(d: usize, k: usize, rank: usize) -> usize {
    rank * (d + k)
}

/// Trainable parameters with query and value adapters in every layer.
pub fn trainable_count(config: &ModelConfig, rank: usize) -> usize {
    2 * config.n_layers * adapter_param_count(config.d_model, config.d_model, rank)
}

/// Parameters of the dense matrices the adapters stand in for.
pub fn full_count(config: &ModelConfig) -> usize {
    2 * config.n_layers * config.d_model * config.d_model
}

/// Query and value adapters for every layer, all of the same rank.
#[derive(Debug, Clone)]
pub struct AdapterSet<F> {
    layers: Vec<[LoRAAdapter<F>; 2]>,
    version: u64,
}

impl<F: Scalar> PartialEq for AdapterSet<F> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

fn slot(target: AdapterTarget) -> usize {
    match target {
        AdapterTarget::Query => 0,
        AdapterTarget::Value => 1,
    }
}

impl<F: Scalar> AdapterSet<F> {
    pub fn new(model: &ModelConfig, config: &LoraConfig, rng: &mut Rng) -> Result<Self> {
        config.validate(model)?;
        let d = model.d_model;
        let layers = (0..model.n_layers)
            .map(|_| {
                Ok([
                    LoRAAdapter::new(d, d, config, rng)?,
                    LoRAAdapter::new(d, d, config, rng)?,
                ])
            })
            .collect::<Result<_>>()?;
        Ok(AdapterSet {
            layers,
            version: next_version(),
        })
    }

    pub fn from_layers(layers: Vec<[LoRAAdapter<F>; 2]>) -> Result<Self> {
        let rank = layers
            .first()
            .map(|l| l[0].rank())
            .ok_or_else(|| Error::InvalidConfig("adapter set needs at least one layer".into()))?;
        if layers.iter().flatten().any(|a| a.rank() != rank) {
            return Err(Error::InvalidConfig("adapters must share one rank".into()));
        }
        Ok(AdapterSet {
            layers,
            version: next_version(),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn rank(&self) -> usize {
        self.layers[0][0].rank()
    }

    pub fn len(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn get(&self, layer: usize, target: AdapterTarget) -> &LoRAAdapter<F> {
        &self.layers[layer][slot(target)]
    }

    pub fn get_mut(&mut self, layer: usize, target: AdapterTarget) -> &mut LoRAAdapter<F> {
        self.version = next_version();
        &mut self.layers[layer][slot(target)]
    }

    /// Query and value adapters of one layer.
    pub fn pair_mut(&mut self, layer: usize) -> (&mut LoRAAdapter<F>, &mut LoRAAdapter<F>) {
        self.version = next_version();
        let [q, v] = &mut self.layers[layer];
        (q, v)
    }

    pub fn zeros_like(&self) -> Self {
        AdapterSet {
            layers: self
                .layers
                .iter()
                .map(|[q, v]| [q.zeros_like(), v.zeros_like()])
                .collect(),
            version: next_version(),
        }
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, F>> {
        let mut out = Vec::with_capacity(4 * self.layers.len());
        for (i, pair) in self.layers.iter().enumerate() {
            for (t, ad) in AdapterTarget::ALL.iter().zip(pair) {
                for (m, w) in [("a", &ad.a), ("b", &ad.b)] {
                    out.push(TensorRef {
                        name: format!("adapters.{i}.{}.{m}", t.name()),
                        shape: w.shape().to_vec(),
                        data: w.as_slice().unwrap(),
                    });
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, F>> {
        self.version = next_version();
        let mut out = Vec::with_capacity(4 * self.layers.len());
        for (i, pair) in self.layers.iter_mut().enumerate() {
            for (t, ad) in AdapterTarget::ALL.iter().zip(pair.iter_mut()) {
                for (m, w) in [("a", &mut ad.a), ("b", &mut ad.b)] {
                    out.push(TensorMut {
                        name: format!("adapters.{i}.{}.{m}", t.name()),
                        shape: w.shape().to_vec(),
                        data: w.as_slice_mut().unwrap(),
                    });
                }
            }
        }
        out
    }

    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.data.iter_mut().zip(src.data) {
                *d = *d + scale * s;
            }
        }
    }

    pub fn sum_squares(&self) -> F {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(F::zero(), |acc, &v| acc + v * v)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<G: Scalar>(&self) -> AdapterSet<G> {
        let c = |m: &Array2<F>| m.mapv(|v| G::of(v.as_f64()));
        AdapterSet {
            layers: self
                .layers
                .iter()
                .map(|pair| {
                    pair.clone().map(|ad| LoRAAdapter {
                        a: c(&ad.a),
                        b: c(&ad.b),
                        scaling: G::of(ad.scaling.as_f64()),
                    })
                })
                .collect(),
            version: next_version(),
        }
    }

    /// Copy of `params` with every adapter folded into its projection.
    pub fn merge_into(&self, params: &Parameters<F>) -> Result<Parameters<F>> {
        if params.config().n_layers != self.layers.len() {
            return Err(Error::shape(
                "adapter layers",
                (params.config().n_layers, 2),
                (self.layers.len(), 2),
            ));
        }
        let mut out = params.clone();
        for (i, [q, v]) in self.layers.iter().enumerate() {
            let wq = merge(q, &params.layers()[i].wq)?;
            let wv = merge(v, &params.layers()[i].wv)?;
            let layer = out.layer_mut(i);
            layer.wq = wq;
            layer.wv = wv;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::component_rng;
    use ndarray::array;

    #[test]
    fn fresh_adapter_is_identity() {
        let mut rng = component_rng(0, "lora");
        let cfg = LoraConfig { rank: 2, ..Default::default() };
        let ad = LoRAAdapter::<f64>::new(4, 4, &cfg, &mut rng).unwrap();
        let w = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        assert_eq!(effective_weight(&w, &ad).unwrap(), w);
        assert_eq!(merge(&ad, &w).unwrap(), w);
    }

    #[test]
    fn single_entry_update() {
        let mut ad = LoRAAdapter {
            a: Array2::<f64>::zeros((1, 4)),
            b: Array2::zeros((4, 1)),
            scaling: 1.0,
        };
        ad.a[[0, 0]] = 1.0;
        ad.b[[0, 0]] = 1.0;
        let out = effective_weight(&Array2::zeros((4, 4)), &ad).unwrap();
        let mut expected = Array2::zeros((4, 4));
        expected[[0, 0]] = 1.0;
        assert_eq!(out, expected);
    }

    #[test]
    fn matches_dense_product() {
        let w = array![
            [0.3, -1.2, 0.5, 0.0],
            [1.1, 0.4, -0.7, 0.2],
            [0.0, 0.9, 0.3, -0.5],
            [-0.6, 0.1, 0.8, 1.4]
        ];
        let ad = LoRAAdapter {
            a: array![[0.5, -0.25, 1.0, 0.0], [0.2, 0.3, -0.4, 0.6]],
            b: array![[1.0, 0.0], [0.5, -1.0], [0.0, 2.0], [-0.3, 0.7]],
            scaling: 2.0,
        };
        let out = effective_weight(&w, &ad).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut ba = 0.0f64;
                for r in 0..2 {
                    ba += ad.b[[i, r]] * ad.a[[r, j]];
                }
                assert!((out[[i, j]] - (w[[i, j]] + 2.0 * ba)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn superposition_in_each_factor() {
        let a1 = array![[0.5, -0.25, 1.0], [0.2, 0.3, -0.4]];
        let a2 = array![[0.1, 0.7, -0.2], [1.0, 0.0, 0.5]];
        let b1 = array![[1.0, 0.0], [0.5, -1.0], [0.0, 2.0]];
        let b2 = array![[0.3, 0.2], [-0.5, 0.1], [0.9, 0.4]];
        let w = Array2::<f64>::zeros((3, 3));
        let delta = |a: &Array2<f64>, b: &Array2<f64>| {
            let ad = LoRAAdapter { a: a.clone(), b: b.clone(), scaling: 1.5 };
            effective_weight(&w, &ad).unwrap()
        };
        let lhs = delta(&(&a1 + &a2), &b1);
        let rhs = delta(&a1, &b1) + delta(&a2, &b1);
        assert!((&lhs - &rhs).iter().all(|v| v.abs() < 1e-12));
        let lhs = delta(&a1, &(&b1 + &b2));
        let rhs = delta(&a1, &b1) + delta(&a1, &b2);
        assert!((&lhs - &rhs).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn merge_is_not_idempotent() {
        let w = Array2::<f64>::eye(4);
        let ad = LoRAAdapter {
            a: array![[1.0, 0.0, 0.0, 0.0]],
            b: array![[0.0], [1.0], [0.0], [0.0]],
            scaling: 1.0,
        };
        let once = merge(&ad, &w).unwrap();
        let twice = merge(&ad, &once).unwrap();
        assert_ne!(once, twice);
    }

    #[test]
    fn shape_mismatch() {
        let ad = LoRAAdapter {
            a: Array2::<f64>::zeros((1, 3)),
            b: Array2::zeros((4, 1)),
            scaling: 1.0,
        };
        assert!(matches!(
            effective_weight(&Array2::zeros((4, 4)), &ad),
            Err(Error::ShapeError { .. })
        ));
    }

    #[test]
    fn parameter_accounting() {
        assert_eq!(adapter_param_count(8, 8, 2), 32);
        assert_eq!(8 * 8, 64);
        let cfg = ModelConfig { d_model: 64, n_layers: 2, n_heads: 4, ..Default::default() };
        // 2 layers x 2 adapters x r(d + k) = 4 * 4 * 128
        assert_eq!(trainable_count(&cfg, 4), 2048);
        assert_eq!(full_count(&cfg), 2 * 2 * 64 * 64);
        // break-even at r = d/2
        assert_eq!(trainable_count(&cfg, 32), full_count(&cfg));
        for r in 1..32 {
            assert!(trainable_count(&cfg, r) < full_count(&cfg));
        }
    }

    #[test]
    fn rank_bound_is_enforced() {
        let mut rng = component_rng(0, "lora");
        let cfg = LoraConfig { rank: 3, ..Default::default() };
        assert!(LoRAAdapter::<f32>::new(4, 4, &cfg, &mut rng).is_err());
        let cfg = LoraConfig { rank: 0, ..Default::default() };
        assert!(LoRAAdapter::<f32>::new(4, 4, &cfg, &mut rng).is_err());
    }

    #[test]
    fn adapter_set_layout() {
        let mut rng = component_rng(3, "lora");
        let model = ModelConfig { d_model: 8, n_layers: 3, n_heads: 2, ..Default::default() };
        let set = AdapterSet::<f32>::new(&model, &LoraConfig { rank: 2, ..Default::default() }, &mut rng)
            .unwrap();
        assert_eq!(set.len(), 6);
        assert!(set.tensors().iter().all(|t| !t.name.is_empty()));
        let total: usize = set.tensors().iter().map(|t| t.data.len()).sum();
        assert_eq!(total, trainable_count(&model, 2));
        assert!(set.get(1, AdapterTarget::Value).b.iter().all(|&v| v == 0.0));
    }
}
