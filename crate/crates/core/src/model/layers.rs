//! Forward and backward kernels for the building blocks.
//!
//! Activations of a whole batch are stacked row-wise into one matrix; each
//! example occupies a contiguous span of rows. Position-wise layers work on
//! the stacked matrix directly, attention works span by span.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{Attention, FeedForward, LayerNorm, Linear};
use super::{Float, ModelError, Result};

const LN_EPS: f64 = 1e-5;

/// Row span `(start, len)` of one example inside a stacked matrix.
pub(crate) type Span = (usize, usize);

impl<T: Float> Linear<T> {
    pub(crate) fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = Array2::zeros((x.nrows(), self.w.ncols()));
        general_mat_mul(T::one(), &x, &self.w, T::zero(), &mut y);
        y += &self.b;
        y
    }

    /// Accumulates weight gradients into `grad` and returns `dx`.
    pub(crate) fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) -> Array2<T> {
        general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
        let mut dx = Array2::zeros((dy.nrows(), self.w.nrows()));
        general_mat_mul(T::one(), &dy, &self.w.t(), T::zero(), &mut dx);
        dx
    }
}

pub(crate) struct NormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Float> LayerNorm<T> {
    pub(crate) fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, NormCache<T>) {
        let d = T::from_usize(x.ncols()).expect("width");
        let eps = T::lit(LN_EPS);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            *inv = T::one() / (var + eps).sqrt();
            let s = *inv;
            row.mapv_inplace(|v| v * s);
        }
        let y = &xhat * &self.gain + &self.bias;
        (y, NormCache { xhat, inv_std })
    }

    pub(crate) fn backward(&self, cache: &NormCache<T>, dy: ArrayView2<T>, grad: &mut LayerNorm<T>) -> Array2<T> {
        grad.gain += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let d = T::from_usize(dy.ncols()).expect("width");
        let mut dx = &dy * &self.gain;
        for ((mut row, xhat), &inv) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_d = row.sum() / d;
            let mean_dx = row.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
            Zip::from(&mut row).and(&xhat).for_each(|g, &xh| {
                *g = inv * (*g - mean_d - xh * mean_dx);
            });
        }
        dx
    }
}

/// How queries see keys inside a stacked batch.
pub(crate) struct AttnLayout<'a> {
    pub queries: &'a [Span],
    pub keys: &'a [Span],
    pub causal: bool,
    /// Per key row: `true` hides the key (padding).
    pub key_masked: Option<&'a [bool]>,
}

pub(crate) struct AttnCache<T> {
    xq: Array2<T>,
    xkv: Option<Array2<T>>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Attention weights per (example, head).
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
}

/// Softmax over the visible entries of each row; fully hidden rows become
/// all-zero. Row `i` sees keys `j <= i` when causal and never sees keys
/// flagged in `hidden`.
fn masked_softmax<T: Float>(scores: &mut Array2<T>, causal: bool, hidden: Option<&[bool]>) {
    let width = scores.ncols();
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let end = if causal { (i + 1).min(width) } else { width };
        let row = row.as_slice_mut().expect("contiguous scores");
        let visible = |j: usize| j < end && !hidden.is_some_and(|m| m[j]);
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate().take(end) {
            if visible(j) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            row.fill(T::zero());
            continue;
        }
        let mut sum = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if visible(j) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = T::zero();
            }
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

impl<T: Float> Attention<T> {
    /// `xkv = None` means self-attention over `xq`.
    pub(crate) fn forward(
        &self,
        xq: ArrayView2<T>,
        xkv: Option<ArrayView2<T>>,
        layout: &AttnLayout,
        n_heads: usize,
    ) -> (Array2<T>, AttnCache<T>) {
        let kv_in = xkv.unwrap_or(xq);
        let q = self.q.forward(xq);
        let k = self.k.forward(kv_in);
        let v = self.v.forward(kv_in);
        let d = q.ncols();
        let dh = d / n_heads;
        let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
        let mut ctx = Array2::zeros((q.nrows(), d));
        let mut probs = Vec::with_capacity(layout.queries.len() * n_heads);
        for (&(qs, ql), &(ks, kl)) in layout.queries.iter().zip(layout.keys) {
            for h in 0..n_heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(s![qs..qs + ql, cols.clone()]);
                let kh = k.slice(s![ks..ks + kl, cols.clone()]);
                let vh = v.slice(s![ks..ks + kl, cols.clone()]);
                let mut p = Array2::zeros((ql, kl));
                general_mat_mul(scale, &qh, &kh.t(), T::zero(), &mut p);
                masked_softmax(&mut p, layout.causal, layout.key_masked.map(|m| &m[ks..ks + kl]));
                let mut out = ctx.slice_mut(s![qs..qs + ql, cols]);
                general_mat_mul(T::one(), &p, &vh, T::zero(), &mut out);
                probs.push(p);
            }
        }
        let y = self.o.forward(ctx.view());
        let cache = AttnCache {
            xq: xq.to_owned(),
            xkv: xkv.map(|x| x.to_owned()),
            q,
            k,
            v,
            probs,
            ctx,
        };
        (y, cache)
    }

    /// Returns `(dxq, dxkv)`; for self-attention `dxkv` is already folded
    /// into `dxq` and the second value is `None`.
    pub(crate) fn backward(
        &self,
        cache: &AttnCache<T>,
        dy: ArrayView2<T>,
        layout: &AttnLayout,
        n_heads: usize,
        grad: &mut Attention<T>,
    ) -> (Array2<T>, Option<Array2<T>>) {
        let dctx = self.o.backward(cache.ctx.view(), dy, &mut grad.o);
        let d = cache.q.ncols();
        let dh = d / n_heads;
        let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        let mut probs = cache.probs.iter();
        for (&(qs, ql), &(ks, kl)) in layout.queries.iter().zip(layout.keys) {
            for h in 0..n_heads {
                let p = probs.next().expect("one cache entry per head");
                let cols = h * dh..(h + 1) * dh;
                let qh = cache.q.slice(s![qs..qs + ql, cols.clone()]);
                let kh = cache.k.slice(s![ks..ks + kl, cols.clone()]);
                let vh = cache.v.slice(s![ks..ks + kl, cols.clone()]);
                let dout = dctx.slice(s![qs..qs + ql, cols.clone()]);

                let mut dvh = dv.slice_mut(s![ks..ks + kl, cols.clone()]);
                general_mat_mul(T::one(), &p.t(), &dout, T::one(), &mut dvh);

                let mut dp = Array2::zeros((ql, kl));
                general_mat_mul(T::one(), &dout, &vh.t(), T::zero(), &mut dp);
                // softmax backward: ds = p * (dp - rowsum(dp * p))
                for (mut drow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                    let dot: T = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum();
                    Zip::from(&mut drow).and(&prow).for_each(|g, &pv| *g = pv * (*g - dot) * scale);
                }
                let mut dqh = dq.slice_mut(s![qs..qs + ql, cols.clone()]);
                general_mat_mul(T::one(), &dp, &kh, T::one(), &mut dqh);
                let mut dkh = dk.slice_mut(s![ks..ks + kl, cols]);
                general_mat_mul(T::one(), &dp.t(), &qh, T::one(), &mut dkh);
            }
        }
        let mut dxq = self.q.backward(cache.xq.view(), dq.view(), &mut grad.q);
        let kv_in = cache.xkv.as_ref().unwrap_or(&cache.xq);
        let mut dxkv = self.k.backward(kv_in.view(), dk.view(), &mut grad.k);
        dxkv += &self.v.backward(kv_in.view(), dv.view(), &mut grad.v);
        if cache.xkv.is_none() {
            dxq += &dxkv;
            (dxq, None)
        } else {
            (dxq, Some(dxkv))
        }
    }
}

pub(crate) struct FfnCache<T> {
    x: Array2<T>,
    hidden: Array2<T>,
}

impl<T: Float> FeedForward<T> {
    pub(crate) fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, FfnCache<T>) {
        let mut hidden = self.inner.forward(x);
        hidden.mapv_inplace(|v| v.max(T::zero()));
        let y = self.outer.forward(hidden.view());
        (
            y,
            FfnCache {
                x: x.to_owned(),
                hidden,
            },
        )
    }

    pub(crate) fn backward(&self, cache: &FfnCache<T>, dy: ArrayView2<T>, grad: &mut FeedForward<T>) -> Array2<T> {
        let mut dh = self.outer.backward(cache.hidden.view(), dy, &mut grad.outer);
        Zip::from(&mut dh).and(&cache.hidden).for_each(|g, &h| {
            if h <= T::zero() {
                *g = T::zero();
            }
        });
        self.inner.backward(cache.x.view(), dh.view(), &mut grad.inner)
    }
}

/// Inverted dropout mask (`0` or `1/(1-p)`), or `None` when inactive.
pub(crate) fn apply_dropout<T: Float>(x: &mut Array2<T>, mask: Option<&Array2<T>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

pub fn log_softmax_row<T: Float>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    row.iter().map(|&v| v - lse).collect()
}

/// Mean label-smoothed cross-entropy. The smoothed target puts `1 - eps` on
/// the reference plus `eps / V` on every class.
pub fn smoothed_cross_entropy<T: Float>(logits: ArrayView2<T>, refs: &[u32], eps: T) -> Result<T> {
    smoothed_cross_entropy_grad(logits, refs, eps).map(|(loss, _)| loss)
}

/// Loss together with its gradient with respect to the logits.
pub fn smoothed_cross_entropy_grad<T: Float>(
    logits: ArrayView2<T>,
    refs: &[u32],
    eps: T,
) -> Result<(T, Array2<T>)> {
    if logits.nrows() != refs.len() {
        return Err(ModelError::LengthMismatch {
            logits: logits.nrows(),
            refs: refs.len(),
        });
    }
    let vocab = logits.ncols();
    if let Some(&bad) = refs.iter().find(|&&r| r as usize >= vocab) {
        return Err(ModelError::ShapeMismatch(format!("reference id {bad} outside vocabulary {vocab}")));
    }
    let n = T::from_usize(refs.len().max(1)).expect("count");
    let v = T::from_usize(vocab).expect("vocab");
    let uniform = eps / v;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = T::zero();
    for ((row, mut g), &r) in logits.rows().into_iter().zip(grad.rows_mut()).zip(refs) {
        let row = row.to_vec();
        let logp = log_softmax_row(&row);
        let mut loss = T::zero();
        for (j, (&lp, gj)) in logp.iter().zip(g.iter_mut()).enumerate() {
            let target = if j == r as usize { T::one() - eps + uniform } else { uniform };
            loss -= target * lp;
            *gj = (lp.exp() - target) / n;
        }
        total += loss;
    }
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Array2::<f64>::zeros((3, 7));
        let loss = smoothed_cross_entropy(logits.view(), &[0, 3, 6], 0.0).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let logits = array![[margin, 0.0, 0.0]];
            let loss = smoothed_cross_entropy(logits.view(), &[0], 0.0).unwrap();
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn smoothed_loss_matches_hand_formula() {
        // V = 4, correct class probability p, the rest share 1 - p equally
        let p: f64 = 0.7;
        let other = (1.0 - p) / 3.0;
        let logits = array![[p.ln(), other.ln(), other.ln(), other.ln()]];
        let eps = 0.1;
        let loss = smoothed_cross_entropy(logits.view(), &[0], eps).unwrap();
        let expected = -((1.0 - eps + eps / 4.0) * p.ln() + 3.0 * (eps / 4.0) * other.ln());
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch() {
        let logits = Array2::<f64>::zeros((2, 4));
        assert!(matches!(
            smoothed_cross_entropy(logits.view(), &[1], 0.0),
            Err(ModelError::LengthMismatch { logits: 2, refs: 1 })
        ));
    }

    #[test]
    fn fully_masked_rows_are_zero() {
        let mut s = array![[1.0f64, 2.0], [3.0, 4.0]];
        masked_softmax(&mut s, false, None);
        s.row_mut(0).fill(0.0);
        let mut t = array![[1.0f64, 2.0]];
        masked_softmax(&mut t, false, Some(&[true, true]));
        assert_eq!(t.row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(s.row(0).to_vec(), vec![0.0, 0.0]);
        assert!((s.row(1).sum() - 1.0).abs() < 1e-12);
    }
}
