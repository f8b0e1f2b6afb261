use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

/// Fresh identity for a tensor collection; bumped on every mutable access so a
/// forward trace can tell whether the weights it saw are still current.
pub(crate) fn next_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 70,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 32,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        // forward is deterministic; stochastic regularisation is not implemented
        if self.dropout != 0.0 {
            return Err(Error::InvalidConfig("dropout must be 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d + 4 * d * d + 2 * d * self.d_ff + self.d_ff + d;
        self.vocab_size * d + self.n_layers * per_layer + 2 * d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_gain: Array1<F>,
    pub ln1_bias: Array1<F>,
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
    pub ln2_gain: Array1<F>,
    pub ln2_bias: Array1<F>,
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

impl<F: Scalar> LayerParams<F> {
    fn zeros(d: usize, d_ff: usize) -> Self {
        LayerParams {
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
            w1: Array2::zeros((d, d_ff)),
            b1: Array1::zeros(d_ff),
            w2: Array2::zeros((d_ff, d)),
            b2: Array1::zeros(d),
        }
    }
}

/// A named view of one tensor.
pub struct TensorRef<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [F],
}

pub struct TensorMut<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [F],
}

macro_rules! layer_fields {
    ([$($m:tt)*], $l:expr, $i:expr, $out:expr, $view:ident, $slice:ident) => {{
        let l = $l;
        let p = |n: &str| format!("layers.{}.{}", $i, n);
        let vectors = [
            ("ln1_gain", &$($m)* l.ln1_gain),
            ("ln1_bias", &$($m)* l.ln1_bias),
            ("ln2_gain", &$($m)* l.ln2_gain),
            ("ln2_bias", &$($m)* l.ln2_bias),
            ("b1", &$($m)* l.b1),
            ("b2", &$($m)* l.b2),
        ];
        let matrices = [
            ("wq", &$($m)* l.wq),
            ("wk", &$($m)* l.wk),
            ("wv", &$($m)* l.wv),
            ("wo", &$($m)* l.wo),
            ("w1", &$($m)* l.w1),
            ("w2", &$($m)* l.w2),
        ];
        for (name, v) in vectors {
            let shape = v.shape().to_vec();
            $out.push($view(p(name), v.$slice().unwrap(), shape));
        }
        for (name, w) in matrices {
            let shape = w.shape().to_vec();
            $out.push($view(p(name), w.$slice().unwrap(), shape));
        }
    }};
}

/// Base model weights. The output projection is tied to `embedding`.
#[derive(Debug, Clone)]
pub struct Parameters<F> {
    config: ModelConfig,
    embedding: Array2<F>,
    layers: Vec<LayerParams<F>>,
    lnf_gain: Array1<F>,
    lnf_bias: Array1<F>,
    version: u64,
}

impl<F: Scalar> PartialEq for Parameters<F> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.embedding == other.embedding
            && self.layers == other.layers
            && self.lnf_gain == other.lnf_gain
            && self.lnf_bias == other.lnf_bias
    }
}

impl<F: Scalar> Parameters<F> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(Parameters {
            config,
            embedding: Array2::zeros((config.vocab_size, d)),
            layers: (0..config.n_layers)
                .map(|_| LayerParams::zeros(d, config.d_ff))
                .collect(),
            lnf_gain: Array1::zeros(d),
            lnf_bias: Array1::zeros(d),
            version: next_version(),
        })
    }

    /// Gaussian initialisation: weights N(0, 0.02²) with residual output
    /// projections scaled by 1/√(2L), embeddings N(0, 0.1²), unit gains.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let std = 0.02;
        let resid_std = std / ((2 * config.n_layers) as f64).sqrt();
        fill_normal(&mut p.embedding, 0.1, rng);
        for l in &mut p.layers {
            l.ln1_gain.fill(F::one());
            l.ln2_gain.fill(F::one());
            fill_normal(&mut l.wq, std, rng);
            fill_normal(&mut l.wk, std, rng);
            fill_normal(&mut l.wv, std, rng);
            fill_normal(&mut l.wo, resid_std, rng);
            fill_normal(&mut l.w1, std, rng);
            fill_normal(&mut l.w2, resid_std, rng);
        }
        p.lnf_gain.fill(F::one());
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn embedding(&self) -> &Array2<F> {
        &self.embedding
    }

    pub fn embedding_mut(&mut self) -> &mut Array2<F> {
        self.version = next_version();
        &mut self.embedding
    }

    pub fn layers(&self) -> &[LayerParams<F>] {
        &self.layers
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut LayerParams<F> {
        self.version = next_version();
        &mut self.layers[i]
    }

    pub fn final_norm(&self) -> (&Array1<F>, &Array1<F>) {
        (&self.lnf_gain, &self.lnf_bias)
    }

    pub fn final_norm_mut(&mut self) -> (&mut Array1<F>, &mut Array1<F>) {
        self.version = next_version();
        (&mut self.lnf_gain, &mut self.lnf_bias)
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config already validated")
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, F>> {
        fn view<F>(name: String, data: &[F], shape: Vec<usize>) -> TensorRef<'_, F> {
            TensorRef { name, shape, data }
        }
        let mut out = vec![view(
            "embedding".into(),
            self.embedding.as_slice().unwrap(),
            self.embedding.shape().to_vec(),
        )];
        for (i, l) in self.layers.iter().enumerate() {
            layer_fields!([], l, i, out, view, as_slice);
        }
        out.push(view("lnf_gain".into(), self.lnf_gain.as_slice().unwrap(), vec![self.lnf_gain.len()]));
        out.push(view("lnf_bias".into(), self.lnf_bias.as_slice().unwrap(), vec![self.lnf_bias.len()]));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, F>> {
        fn view<F>(name: String, data: &mut [F], shape: Vec<usize>) -> TensorMut<'_, F> {
            TensorMut { name, shape, data }
        }
        self.version = next_version();
        let shape = self.embedding.shape().to_vec();
        let mut out = vec![view("embedding".into(), self.embedding.as_slice_mut().unwrap(), shape)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            layer_fields!([mut], l, i, out, view, as_slice_mut);
        }
        let n = self.lnf_gain.len();
        out.push(view("lnf_gain".into(), self.lnf_gain.as_slice_mut().unwrap(), vec![n]));
        out.push(view("lnf_bias".into(), self.lnf_bias.as_slice_mut().unwrap(), vec![n]));
        out
    }

    pub fn cast<G: Scalar>(&self) -> Parameters<G> {
        let mut out = Parameters::<G>::zeros(self.config).expect("config already validated");
        for (src, dst) in self.tensors().into_iter().zip(out.tensors_mut()) {
            for (d, &s) in dst.data.iter_mut().zip(src.data) {
                *d = G::of(s.as_f64());
            }
        }
        out
    }

    /// `self += scale * other`, tensor by tensor.
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
}

pub(crate) fn fill_normal<F: Scalar, D: ndarray::Dimension>(
    m: &mut ndarray::Array<F, D>,
    std: f64,
    rng: &mut Rng,
) {
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    for v in m.iter_mut() {
        *v = F::of(normal.sample(rng));
    }
}
