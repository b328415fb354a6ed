//! Incremental decoding with cached keys and values.

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2};

use super::layers::log_softmax_row;
use super::network::Transformer;
use super::{Float, Result};

/// Cross-attention keys and values, shared by every hypothesis of a source.
#[derive(Debug)]
struct SourceCache<T> {
    keys: Vec<Array2<T>>,
    values: Vec<Array2<T>>,
    masked: Vec<bool>,
}

/// Decoder state of one hypothesis. Cloning is cheap for the source part
/// and copies the self-attention cache.
#[derive(Clone, Debug)]
pub struct DecodeState<T> {
    source: Arc<SourceCache<T>>,
    /// Per decoder layer, row-major (steps × d_model).
    self_keys: Vec<Vec<T>>,
    self_values: Vec<Vec<T>>,
    steps: usize,
}

impl<T> DecodeState<T> {
    /// Number of tokens fed so far (bos included).
    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }
}

fn attend<T: Float>(
    q: ArrayView2<T>,
    keys: ArrayView2<T>,
    values: ArrayView2<T>,
    masked: Option<&[bool]>,
    n_heads: usize,
    out: &mut Array2<T>,
    row: usize,
) {
    let d = q.ncols();
    let dh = d / n_heads;
    let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(s![.., cols.clone()]);
        let kh = keys.slice(s![.., cols.clone()]);
        let vh = values.slice(s![.., cols.clone()]);
        let mut scores = Array2::zeros((1, kh.nrows()));
        general_mat_mul(scale, &qh, &kh.t(), T::zero(), &mut scores);
        let mut max = T::neg_infinity();
        for (j, &v) in scores.iter().enumerate() {
            if !masked.is_some_and(|m| m[j]) && v > max {
                max = v;
            }
        }
        let mut target = out.slice_mut(s![row..row + 1, cols]);
        if max == T::neg_infinity() {
            target.fill(T::zero());
            continue;
        }
        let mut sum = T::zero();
        for (j, v) in scores.iter_mut().enumerate() {
            *v = if masked.is_some_and(|m| m[j]) {
                T::zero()
            } else {
                (*v - max).exp()
            };
            sum += *v;
        }
        scores.mapv_inplace(|v| v / sum);
        general_mat_mul(T::one(), &scores, &vh, T::zero(), &mut target);
    }
}

impl<T: Float> Transformer<T> {
    /// Encodes `src` and returns an empty decoder state for it.
    pub fn start_decode(&self, src: &[u32]) -> Result<DecodeState<T>> {
        let (memory, masked) = self.encode_one(src)?;
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for layer in &self.params.decoder {
            keys.push(layer.cross_attn.k.forward(memory.view()));
            values.push(layer.cross_attn.v.forward(memory.view()));
        }
        let n = self.params.decoder.len();
        Ok(DecodeState {
            source: Arc::new(SourceCache {
                keys,
                values,
                masked,
            }),
            self_keys: vec![Vec::new(); n],
            self_values: vec![Vec::new(); n],
            steps: 0,
        })
    }

    /// Feeds one token to each state and returns next-token log-probabilities
    /// (one row per state). The first token fed should be bos.
    pub fn decode_step(&self, states: &mut [DecodeState<T>], tokens: &[u32]) -> Array2<T> {
        assert_eq!(states.len(), tokens.len(), "one token per state");
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let pos: Vec<usize> = states.iter().map(|s| s.steps).collect();
        let mut x = self.embed(tokens, &pos);
        for (l, layer) in self.params.decoder.iter().enumerate() {
            let (h, _) = layer.self_norm.forward(x.view());
            let q = layer.self_attn.q.forward(h.view());
            let k = layer.self_attn.k.forward(h.view());
            let v = layer.self_attn.v.forward(h.view());
            let mut ctx = Array2::zeros((states.len(), d));
            for (i, st) in states.iter_mut().enumerate() {
                st.self_keys[l].extend(k.row(i).iter());
                st.self_values[l].extend(v.row(i).iter());
                let n = st.steps + 1;
                let keys = ArrayView2::from_shape((n, d), &st.self_keys[l]).expect("cache shape");
                let values = ArrayView2::from_shape((n, d), &st.self_values[l]).expect("cache shape");
                attend(q.slice(s![i..i + 1, ..]), keys, values, None, heads, &mut ctx, i);
            }
            x += &layer.self_attn.o.forward(ctx.view());

            let (h, _) = layer.cross_norm.forward(x.view());
            let q = layer.cross_attn.q.forward(h.view());
            let mut ctx = Array2::zeros((states.len(), d));
            for (i, st) in states.iter().enumerate() {
                let src = &st.source;
                attend(
                    q.slice(s![i..i + 1, ..]),
                    src.keys[l].view(),
                    src.values[l].view(),
                    Some(&src.masked),
                    heads,
                    &mut ctx,
                    i,
                );
            }
            x += &layer.cross_attn.o.forward(ctx.view());

            let (h, _) = layer.ffn_norm.forward(x.view());
            x += &layer.ffn.forward(h.view()).0;
        }
        for st in states.iter_mut() {
            st.steps += 1;
        }
        let (hidden, _) = self.params.dec_norm.forward(x.view());
        let mut logits = self.project(hidden.view());
        for mut row in logits.rows_mut() {
            let lp = log_softmax_row(row.as_slice().expect("contiguous row"));
            row.iter_mut().zip(lp).for_each(|(r, v)| *r = v);
        }
        logits
    }
}
