//! Reconstruction cross-entropy and the virtual adversarial divergence.
//!
//! Both work on the rows that predict masked tokens: row `j - 1` of the
//! logits is scored against token `j` whenever `mask[j]` is set.

use ndarray::Array2;

use crate::corpus::PackedSequence;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `(row, target position)` pairs selected by a token mask.
pub fn prediction_rows(mask: &[bool]) -> Vec<(usize, usize)> {
    mask.iter()
        .enumerate()
        .filter(|&(j, &m)| m && j > 0)
        .map(|(j, _)| (j - 1, j))
        .collect()
}

fn log_softmax_row<F: Scalar>(row: ndarray::ArrayView1<F>, out: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let lse = row.iter().fold(F::zero(), |s, &v| s + (v - max).exp()).ln() + max;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        *o = v - lse;
    }
}

/// Row-wise softmax.
pub fn softmax<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = Array2::zeros(logits.raw_dim());
    let mut buf = vec![F::zero(); logits.ncols()];
    for (i, row) in logits.rows().into_iter().enumerate() {
        log_softmax_row(row, &mut buf);
        for (j, &v) in buf.iter().enumerate() {
            out[[i, j]] = v.exp();
        }
    }
    out
}

fn check_rows<F: Scalar>(logits: &Array2<F>, mask: &[bool]) -> Result<Vec<(usize, usize)>> {
    if logits.nrows() != mask.len() {
        return Err(Error::shape("loss mask", (mask.len(), logits.ncols()), logits.dim()));
    }
    let rows = prediction_rows(mask);
    if rows.is_empty() {
        return Err(Error::EmptyLossMask);
    }
    Ok(rows)
}

/// Mean next-token cross-entropy over the target positions of `packed`.
pub fn loss_rec<F: Scalar>(logits: &Array2<F>, packed: &PackedSequence) -> Result<F> {
    loss_rec_grad(logits, packed).map(|(l, _)| l)
}

/// [`loss_rec`] together with its gradient with respect to the logits.
pub fn loss_rec_grad<F: Scalar>(
    logits: &Array2<F>,
    packed: &PackedSequence,
) -> Result<(F, Array2<F>)> {
    let rows = check_rows(logits, &packed.mask)?;
    let v = logits.ncols();
    if let Some(&bad) = packed.tokens.iter().find(|&&t| t >= v) {
        return Err(Error::VocabOverflow { id: bad, vocab_size: v });
    }
    let inv = F::one() / F::of(rows.len() as f64);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut logp = vec![F::zero(); v];
    let mut total = F::zero();
    for &(r, pos) in &rows {
        log_softmax_row(logits.row(r), &mut logp);
        let target = packed.tokens[pos];
        total = total - logp[target];
        for (c, &lp) in logp.iter().enumerate() {
            grad[[r, c]] = lp.exp() * inv;
        }
        grad[[r, target]] = grad[[r, target]] - inv;
    }
    Ok((total * inv, grad))
}

/// Mean over masked rows of `KL(softmax(p) ‖ softmax(q))`.
pub fn kl_div<F: Scalar>(p: &Array2<F>, q: &Array2<F>, mask: &[bool]) -> Result<F> {
    kl_div_grad(p, q, mask).map(|(l, _)| l)
}

/// [`kl_div`] with its gradient with respect to `p`; `q` is held constant.
pub fn kl_div_grad<F: Scalar>(
    p: &Array2<F>,
    q: &Array2<F>,
    mask: &[bool],
) -> Result<(F, Array2<F>)> {
    if p.dim() != q.dim() {
        return Err(Error::shape("kl_div", p.dim(), q.dim()));
    }
    let rows = check_rows(p, mask)?;
    let v = p.ncols();
    let inv = F::one() / F::of(rows.len() as f64);
    let mut grad = Array2::zeros(p.raw_dim());
    let mut lp = vec![F::zero(); v];
    let mut lq = vec![F::zero(); v];
    let mut total = F::zero();
    for &(r, _) in &rows {
        log_softmax_row(p.row(r), &mut lp);
        log_softmax_row(q.row(r), &mut lq);
        let kl = lp
            .iter()
            .zip(&lq)
            .fold(F::zero(), |s, (&a, &b)| s + a.exp() * (a - b));
        total = total + kl;
        for c in 0..v {
            grad[[r, c]] = lp[c].exp() * (lp[c] - lq[c] - kl) * inv;
        }
    }
    Ok((total * inv, grad))
}
