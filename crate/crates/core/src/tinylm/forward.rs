//! Forward pass with cached activations and the matching reverse pass.
//!
//! Pre-norm blocks: `h += Attn(LN1(h))`, `h += FFN(LN2(h))`, then a final
//! layer norm and the tied output head `logits = LNf(h) · Eᵀ`.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::lora::{AdapterSet, AdapterTarget, LoRAAdapter};
use crate::scalar::Scalar;

use super::params::Parameters;

const LN_EPS: f64 = 1e-5;

/// Sinusoidal position code, `n×d`.
pub fn positional_encoding<F: Scalar>(n: usize, d: usize) -> Array2<F> {
    Array2::from_shape_fn((n, d), |(pos, j)| {
        let freq = 10000f64.powf(-((j - j % 2) as f64) / d as f64);
        let angle = pos as f64 * freq;
        F::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Token embeddings plus position code.
pub fn embed<F: Scalar>(tokens: &[usize], params: &Parameters<F>) -> Result<Array2<F>> {
    let cfg = params.config();
    let d = cfg.d_model;
    if let Some(&id) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::VocabOverflow {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    let mut x = positional_encoding::<F>(tokens.len(), d);
    let e = params.embedding();
    for (mut row, &id) in x.rows_mut().into_iter().zip(tokens) {
        row += &e.row(id);
    }
    Ok(x)
}

#[derive(Debug, Clone)]
struct LnCache<F> {
    xhat: Array2<F>,
    rstd: Vec<F>,
}

#[derive(Debug, Clone)]
struct LayerTrace<F> {
    ln1: LnCache<F>,
    a1: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// `a1·B` for the query and value adapters.
    q_low: Option<Array2<F>>,
    v_low: Option<Array2<F>>,
    /// Per head, row-major `n×n`, zero above the diagonal.
    probs: Vec<Vec<F>>,
    ctx: Array2<F>,
    ln2: LnCache<F>,
    a2: Array2<F>,
    pre: Array2<F>,
    act: Array2<F>,
}

/// Activations recorded by [`Parameters::forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    params_version: u64,
    adapters_version: Option<u64>,
    tokens: Option<Vec<usize>>,
    layers: Vec<LayerTrace<F>>,
    lnf: LnCache<F>,
    hidden: Array2<F>,
}

impl<F: Scalar> ForwardTrace<F> {
    pub fn len(&self) -> usize {
        self.hidden.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.nrows() == 0
    }

    /// Final-layer hidden states (after the last layer norm), `n×d`.
    pub fn hidden(&self) -> &Array2<F> {
        &self.hidden
    }
}

/// Which gradients [`Parameters::backward`] should produce.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradRequest {
    pub params: bool,
    pub adapters: bool,
    pub input: bool,
}

impl GradRequest {
    pub const ALL: GradRequest = GradRequest {
        params: true,
        adapters: true,
        input: true,
    };
    pub const ADAPTERS: GradRequest = GradRequest {
        params: false,
        adapters: true,
        input: false,
    };
    pub const INPUT: GradRequest = GradRequest {
        params: false,
        adapters: false,
        input: true,
    };
    pub const PARAMS: GradRequest = GradRequest {
        params: true,
        adapters: false,
        input: false,
    };
}

#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub params: Option<Parameters<F>>,
    pub adapters: Option<AdapterSet<F>>,
    /// Gradient with respect to the model input, which is also the gradient
    /// with respect to an additive perturbation of it.
    pub input: Option<Array2<F>>,
}

fn ln_forward<F: Scalar>(
    x: &Array2<F>,
    gain: &Array1<F>,
    bias: &Array1<F>,
) -> (Array2<F>, LnCache<F>) {
    let (n, d) = x.dim();
    let dn = F::of(d as f64);
    let eps = F::of(LN_EPS);
    let mut xhat = Array2::zeros((n, d));
    let mut y = Array2::zeros((n, d));
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / dn;
        let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
        let r = F::one() / (var + eps).sqrt();
        rstd.push(r);
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[[i, j]] = h;
            y[[i, j]] = h * gain[j] + bias[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns `dx`; accumulates into `dgain`/`dbias` when given.
fn ln_backward<F: Scalar>(
    dy: &Array2<F>,
    cache: &LnCache<F>,
    gain: &Array1<F>,
    mut param_grads: Option<(&mut Array1<F>, &mut Array1<F>)>,
) -> Array2<F> {
    let (n, d) = dy.dim();
    let dn = F::of(d as f64);
    let mut dx = Array2::zeros((n, d));
    let mut dxhat = vec![F::zero(); d];
    for i in 0..n {
        let xh = cache.xhat.row(i);
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        for j in 0..d {
            let g = dy[[i, j]];
            if let Some((dg, db)) = param_grads.as_mut() {
                dg[j] = dg[j] + g * xh[j];
                db[j] = db[j] + g;
            }
            let v = g * gain[j];
            dxhat[j] = v;
            m1 = m1 + v;
            m2 = m2 + v * xh[j];
        }
        m1 = m1 / dn;
        m2 = m2 / dn;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[[i, j]] = r * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<F: Scalar>(u: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let half = F::of(0.5);
    half * u * (F::one() + (c * (u + k * u * u * u)).tanh())
}

fn gelu_grad<F: Scalar>(u: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let half = F::of(0.5);
    let t = (c * (u + k * u * u * u)).tanh();
    half * (F::one() + t) + half * u * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * u * u)
}

/// `x·W`, plus `s·(x·B)·A` when an adapter is present.
fn project<F: Scalar>(
    x: &Array2<F>,
    w: &Array2<F>,
    adapter: Option<&LoRAAdapter<F>>,
) -> (Array2<F>, Option<Array2<F>>) {
    let mut y = x.dot(w);
    let low = adapter.map(|ad| {
        let low = x.dot(&ad.b);
        y.scaled_add(ad.scaling, &low.dot(&ad.a));
        low
    });
    (y, low)
}

fn add_row_bias<F: Scalar>(m: &mut Array2<F>, bias: &Array1<F>) {
    for mut row in m.rows_mut() {
        row += bias;
    }
}

fn sum_rows_into<F: Scalar>(m: &Array2<F>, acc: &mut Array1<F>) {
    *acc += &m.sum_axis(Axis(0));
}

fn row_dot<F: Scalar>(a: ArrayView1<F>, b: ArrayView1<F>) -> F {
    a.iter().zip(b.iter()).fold(F::zero(), |s, (&x, &y)| s + x * y)
}

/// Causal multi-head attention; returns the context and per-head probabilities.
fn attention<F: Scalar>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    heads: usize,
) -> (Array2<F>, Vec<Vec<F>>) {
    let (n, d) = q.dim();
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut ctx = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(heads);
    let mut scores = vec![F::zero(); n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p = vec![F::zero(); n * n];
        for i in 0..n {
            let qi = q.row(i);
            let qi = qi.slice(ndarray::s![cols.clone()]);
            let mut max = F::neg_infinity();
            for j in 0..=i {
                let kj = k.row(j);
                let s = row_dot(qi, kj.slice(ndarray::s![cols.clone()])) * scale;
                scores[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut total = F::zero();
            for s in scores.iter_mut().take(i + 1) {
                *s = (*s - max).exp();
                total = total + *s;
            }
            for j in 0..=i {
                let pij = scores[j] / total;
                p[i * n + j] = pij;
                for c in cols.clone() {
                    ctx[[i, c]] = ctx[[i, c]] + pij * v[[j, c]];
                }
            }
        }
        probs.push(p);
    }
    (ctx, probs)
}

fn attention_backward<F: Scalar>(
    dctx: &Array2<F>,
    trace: &LayerTrace<F>,
    heads: usize,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let (q, k, v) = (&trace.q, &trace.k, &trace.v);
    let (n, d) = q.dim();
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    let mut dp = vec![F::zero(); n];
    for (h, p) in trace.probs.iter().enumerate() {
        let c0 = h * dh;
        for i in 0..n {
            let mut dot = F::zero();
            for j in 0..=i {
                let pij = p[i * n + j];
                let mut g = F::zero();
                for c in c0..c0 + dh {
                    g = g + dctx[[i, c]] * v[[j, c]];
                    dv[[j, c]] = dv[[j, c]] + pij * dctx[[i, c]];
                }
                dp[j] = g;
                dot = dot + pij * g;
            }
            for j in 0..=i {
                let ds = p[i * n + j] * (dp[j] - dot) * scale;
                for c in c0..c0 + dh {
                    dq[[i, c]] = dq[[i, c]] + ds * k[[j, c]];
                    dk[[j, c]] = dk[[j, c]] + ds * q[[i, c]];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Backward through `y = x·W + s·(x·B)·A`. Returns `dx`.
#[allow(clippy::too_many_arguments)]
fn project_backward<F: Scalar>(
    dy: &Array2<F>,
    x: &Array2<F>,
    w: &Array2<F>,
    adapter: Option<&LoRAAdapter<F>>,
    low: Option<&Array2<F>>,
    dw: Option<&mut Array2<F>>,
    dadapter: Option<&mut LoRAAdapter<F>>,
) -> Array2<F> {
    let mut dx = dy.dot(&w.t());
    if let Some(dw) = dw {
        *dw += &x.t().dot(dy);
    }
    if let Some(ad) = adapter {
        let dlow = dy.dot(&ad.a.t()); // n×r, before scaling
        dx.scaled_add(ad.scaling, &dlow.dot(&ad.b.t()));
        if let Some(g) = dadapter {
            let low = low.expect("adapter forward recorded x·B");
            g.a.scaled_add(ad.scaling, &low.t().dot(dy));
            g.b.scaled_add(ad.scaling, &x.t().dot(&dlow));
        }
    }
    dx
}

impl<F: Scalar> Parameters<F> {
    /// Runs the network on `embeddings + perturbation`.
    pub fn forward(
        &self,
        embeddings: &Array2<F>,
        perturbation: Option<&Array2<F>>,
        adapters: Option<&AdapterSet<F>>,
    ) -> Result<(Array2<F>, ForwardTrace<F>)> {
        let cfg = self.config();
        let (n, d) = embeddings.dim();
        if d != cfg.d_model || n == 0 || n > cfg.max_len {
            return Err(Error::shape("forward input", (n.clamp(1, cfg.max_len), cfg.d_model), (n, d)));
        }
        let mut h = embeddings.clone();
        if let Some(delta) = perturbation {
            if delta.dim() != (n, d) {
                return Err(Error::shape("perturbation", (n, d), delta.dim()));
            }
            h += delta;
        }
        if let Some(ad) = adapters {
            if ad.n_layers() != cfg.n_layers || ad.get(0, AdapterTarget::Query).b.nrows() != d {
                return Err(Error::shape("adapters", (cfg.n_layers, d), (ad.n_layers(), ad.get(0, AdapterTarget::Query).b.nrows())));
            }
        }
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (i, l) in self.layers().iter().enumerate() {
            let (a1, ln1) = ln_forward(&h, &l.ln1_gain, &l.ln1_bias);
            let (q, q_low) = project(&a1, &l.wq, adapters.map(|a| a.get(i, AdapterTarget::Query)));
            let k = a1.dot(&l.wk);
            let (v, v_low) = project(&a1, &l.wv, adapters.map(|a| a.get(i, AdapterTarget::Value)));
            let (ctx, probs) = attention(&q, &k, &v, cfg.n_heads);
            h += &ctx.dot(&l.wo);
            let (a2, ln2) = ln_forward(&h, &l.ln2_gain, &l.ln2_bias);
            let mut pre = a2.dot(&l.w1);
            add_row_bias(&mut pre, &l.b1);
            let act = pre.mapv(gelu);
            let mut ff = act.dot(&l.w2);
            add_row_bias(&mut ff, &l.b2);
            h += &ff;
            layers.push(LayerTrace {
                ln1,
                a1,
                q,
                k,
                v,
                q_low,
                v_low,
                probs,
                ctx,
                ln2,
                a2,
                pre,
                act,
            });
        }
        let (gain, bias) = self.final_norm();
        let (hidden, lnf) = ln_forward(&h, gain, bias);
        let logits = hidden.dot(&self.embedding().t());
        let trace = ForwardTrace {
            params_version: self.version(),
            adapters_version: adapters.map(AdapterSet::version),
            tokens: None,
            layers,
            lnf,
            hidden,
        };
        Ok((logits, trace))
    }

    /// Embeds `tokens` and runs [`forward`](Self::forward). The trace keeps
    /// the token ids so that the embedding gradient includes the input lookup.
    pub fn forward_tokens(
        &self,
        tokens: &[usize],
        perturbation: Option<&Array2<F>>,
        adapters: Option<&AdapterSet<F>>,
    ) -> Result<(Array2<F>, ForwardTrace<F>)> {
        let x = embed(tokens, self)?;
        let (logits, mut trace) = self.forward(&x, perturbation, adapters)?;
        trace.tokens = Some(tokens.to_vec());
        Ok((logits, trace))
    }

    /// Reverse pass for a scalar loss whose gradient with respect to the
    /// logits is `dlogits`.
    pub fn backward(
        &self,
        trace: &ForwardTrace<F>,
        adapters: Option<&AdapterSet<F>>,
        dlogits: &Array2<F>,
        request: GradRequest,
    ) -> Result<Gradients<F>> {
        if trace.params_version != self.version()
            || trace.adapters_version != adapters.map(AdapterSet::version)
            || trace.layers.len() != self.layers().len()
        {
            return Err(Error::TraceMismatch);
        }
        let cfg = self.config();
        let n = trace.len();
        if dlogits.dim() != (n, cfg.vocab_size) {
            return Err(Error::shape("dlogits", (n, cfg.vocab_size), dlogits.dim()));
        }
        let want_adapters = request.adapters && adapters.is_some();
        let mut gp = request.params.then(|| self.zeros_like());
        let mut ga = if want_adapters { adapters.map(AdapterSet::zeros_like) } else { None };

        let dhidden = dlogits.dot(self.embedding());
        if let Some(g) = gp.as_mut() {
            *g.embedding_mut() += &dlogits.t().dot(&trace.hidden);
        }
        let (gain, _) = self.final_norm();
        let mut dh = match gp.as_mut() {
            Some(g) => {
                let (dg, db) = g.final_norm_mut();
                ln_backward(&dhidden, &trace.lnf, gain, Some((dg, db)))
            }
            None => ln_backward(&dhidden, &trace.lnf, gain, None),
        };

        for (i, (l, t)) in self.layers().iter().zip(&trace.layers).enumerate().rev() {
            let mut gl = gp.as_mut().map(|g| g.layer_mut(i));
            // feed-forward branch
            let dff = &dh;
            if let Some(g) = gl.as_mut() {
                sum_rows_into(dff, &mut g.b2);
                g.w2 += &t.act.t().dot(dff);
            }
            let mut dpre = dff.dot(&l.w2.t());
            ndarray::Zip::from(&mut dpre).and(&t.pre).for_each(|g, &u| *g = *g * gelu_grad(u));
            if let Some(g) = gl.as_mut() {
                sum_rows_into(&dpre, &mut g.b1);
                g.w1 += &t.a2.t().dot(&dpre);
            }
            let da2 = dpre.dot(&l.w1.t());
            let dmid = match gl.as_mut() {
                Some(g) => {
                    let g = &mut **g;
                    ln_backward(&da2, &t.ln2, &l.ln2_gain, Some((&mut g.ln2_gain, &mut g.ln2_bias)))
                }
                None => ln_backward(&da2, &t.ln2, &l.ln2_gain, None),
            };
            dh += &dmid;

            // attention branch
            if let Some(g) = gl.as_mut() {
                g.wo += &t.ctx.t().dot(&dh);
            }
            let dctx = dh.dot(&l.wo.t());
            let (dq, dk, dv) = attention_backward(&dctx, t, cfg.n_heads);
            let (dwq, dwk, dwv) = match gl.as_mut() {
                Some(g) => {
                    let g = &mut **g;
                    (Some(&mut g.wq), Some(&mut g.wk), Some(&mut g.wv))
                }
                None => (None, None, None),
            };
            let (mut gq, mut gv) = match ga.as_mut() {
                Some(ga) => {
                    let (q, v) = ga.pair_mut(i);
                    (Some(q), Some(v))
                }
                None => (None, None),
            };
            let mut da1 = project_backward(
                &dq,
                &t.a1,
                &l.wq,
                adapters.map(|a| a.get(i, AdapterTarget::Query)),
                t.q_low.as_ref(),
                dwq,
                gq.as_deref_mut(),
            );
            da1 += &project_backward(&dk, &t.a1, &l.wk, None, None, dwk, None);
            da1 += &project_backward(
                &dv,
                &t.a1,
                &l.wv,
                adapters.map(|a| a.get(i, AdapterTarget::Value)),
                t.v_low.as_ref(),
                dwv,
                gv.as_deref_mut(),
            );
            let dres = match gl.as_mut() {
                Some(g) => {
                    let g = &mut **g;
                    ln_backward(&da1, &t.ln1, &l.ln1_gain, Some((&mut g.ln1_gain, &mut g.ln1_bias)))
                }
                None => ln_backward(&da1, &t.ln1, &l.ln1_gain, None),
            };
            dh += &dres;
        }

        if let (Some(g), Some(tokens)) = (gp.as_mut(), trace.tokens.as_ref()) {
            let e = g.embedding_mut();
            for (row, &id) in dh.rows().into_iter().zip(tokens) {
                let mut dst = e.row_mut(id);
                dst += &row;
            }
        }
        Ok(Gradients {
            params: gp,
            adapters: ga,
            input: request.input.then_some(dh),
        })
    }

    /// Final-layer hidden states for a token sequence, without perturbation.
    pub fn hidden_states(
        &self,
        tokens: &[usize],
        adapters: Option<&AdapterSet<F>>,
    ) -> Result<Array2<F>> {
        let (_, trace) = self.forward_tokens(tokens, None, adapters)?;
        Ok(trace.hidden)
    }
}
