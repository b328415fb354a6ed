use ndarray::{Array1, Array2};
use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::Float;
use crate::rng;

/// `y = x · w + b` with `w` stored as (in, out).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Array1<T>,
    pub bias: Array1<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub inner: Linear<T>,
    pub outer: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub self_norm: LayerNorm<T>,
    pub self_attn: Attention<T>,
    pub ffn_norm: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<T> {
    pub self_norm: LayerNorm<T>,
    pub self_attn: Attention<T>,
    pub cross_norm: LayerNorm<T>,
    pub cross_attn: Attention<T>,
    pub ffn_norm: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    /// (vocab, d_model), shared by source, target and (when tied) output.
    pub embed: Array2<T>,
    /// (vocab, d_model) output projection when embeddings are untied.
    pub out_proj: Option<Array2<T>>,
    pub out_bias: Array1<T>,
    pub encoder: Vec<EncoderLayer<T>>,
    pub enc_norm: LayerNorm<T>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub dec_norm: LayerNorm<T>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform<T: Float>(&mut self, rows: usize, cols: usize, limit: f64, scale: f64) -> Array2<T> {
        let dist = Uniform::new_inclusive(-limit, limit);
        Array2::from_shape_simple_fn((rows, cols), || T::lit(dist.sample(&mut self.rng) * scale))
    }

    fn linear<T: Float>(&mut self, n_in: usize, n_out: usize, scale: f64) -> Linear<T> {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        Linear {
            w: self.uniform(n_in, n_out, limit, scale),
            b: Array1::zeros(n_out),
        }
    }

    fn attention<T: Float>(&mut self, d: usize, out_scale: f64) -> Attention<T> {
        Attention {
            q: self.linear(d, d, 1.0),
            k: self.linear(d, d, 1.0),
            v: self.linear(d, d, 1.0),
            o: self.linear(d, d, out_scale),
        }
    }

    fn ffn<T: Float>(&mut self, d: usize, f: usize, out_scale: f64) -> FeedForward<T> {
        FeedForward {
            inner: self.linear(d, f, 1.0),
            outer: self.linear(f, d, out_scale),
        }
    }
}

fn norm<T: Float>(d: usize) -> LayerNorm<T> {
    LayerNorm {
        gain: Array1::ones(d),
        bias: Array1::zeros(d),
    }
}

impl<T: Float> Params<T> {
    /// Seeded Xavier-uniform initialisation. With depth scaling the output
    /// matrices of both residual branches in layer `l` are multiplied by
    /// `1/sqrt(l)`; all random draws happen in the same order either way.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut init = Init {
            rng: rng::seeded(cfg.seed),
        };
        let (d, f, v) = (cfg.d_model, cfg.ffn_dim, cfg.vocab_size);
        let embed_limit = (3.0 / d as f64).sqrt();
        let embed = init.uniform(v, d, embed_limit, 1.0);
        let out_proj = (!cfg.tied_embeddings).then(|| init.uniform(v, d, embed_limit, 1.0));
        let encoder = (1..=cfg.enc_layers)
            .map(|l| {
                let s = cfg.residual_scale(l);
                EncoderLayer {
                    self_norm: norm(d),
                    self_attn: init.attention(d, s),
                    ffn_norm: norm(d),
                    ffn: init.ffn(d, f, s),
                }
            })
            .collect();
        let decoder = (1..=cfg.dec_layers)
            .map(|l| {
                let s = cfg.residual_scale(l);
                DecoderLayer {
                    self_norm: norm(d),
                    self_attn: init.attention(d, s),
                    cross_norm: norm(d),
                    cross_attn: init.attention(d, s),
                    ffn_norm: norm(d),
                    ffn: init.ffn(d, f, s),
                }
            })
            .collect();
        Params {
            embed,
            out_proj,
            out_bias: Array1::zeros(v),
            encoder,
            enc_norm: norm(d),
            decoder,
            dec_norm: norm(d),
        }
    }

    /// Same shapes as `cfg` describes, all zeros.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut p = Self::init(cfg);
        p.fill(T::zero());
        p
    }

    pub fn fill(&mut self, value: T) {
        for (_, t) in self.tensors_mut() {
            t.fill(value);
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(T::zero());
        z
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Converts to another float type, tensor by tensor.
    pub fn cast<U: Float>(&self, cfg: &ModelConfig) -> Params<U> {
        let mut out = Params::<U>::zeros(cfg);
        for ((_, src), (_, dst)) in self.tensors().into_iter().zip(out.tensors_mut()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::from_f64(s.to_f64().expect("finite")).expect("representable");
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Params<T>, scale: T) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * *y;
            }
        }
    }

    pub fn sq_norm(&self) -> T {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|&x| x * x)
            .sum()
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = Vec::new();
        out.push(("embed".into(), slice(&self.embed)));
        if let Some(o) = &self.out_proj {
            out.push(("out_proj".into(), slice(o)));
        }
        out.push(("out_bias".into(), slice1(&self.out_bias)));
        for (i, layer) in self.encoder.iter().enumerate() {
            let p = format!("enc.{i}");
            norm_tensors(&mut out, &format!("{p}.self_norm"), &layer.self_norm);
            attn_tensors(&mut out, &format!("{p}.self_attn"), &layer.self_attn);
            norm_tensors(&mut out, &format!("{p}.ffn_norm"), &layer.ffn_norm);
            linear_tensors(&mut out, &format!("{p}.ffn.inner"), &layer.ffn.inner);
            linear_tensors(&mut out, &format!("{p}.ffn.outer"), &layer.ffn.outer);
        }
        norm_tensors(&mut out, "enc_norm", &self.enc_norm);
        for (i, layer) in self.decoder.iter().enumerate() {
            let p = format!("dec.{i}");
            norm_tensors(&mut out, &format!("{p}.self_norm"), &layer.self_norm);
            attn_tensors(&mut out, &format!("{p}.self_attn"), &layer.self_attn);
            norm_tensors(&mut out, &format!("{p}.cross_norm"), &layer.cross_norm);
            attn_tensors(&mut out, &format!("{p}.cross_attn"), &layer.cross_attn);
            norm_tensors(&mut out, &format!("{p}.ffn_norm"), &layer.ffn_norm);
            linear_tensors(&mut out, &format!("{p}.ffn.inner"), &layer.ffn.inner);
            linear_tensors(&mut out, &format!("{p}.ffn.outer"), &layer.ffn.outer);
        }
        norm_tensors(&mut out, "dec_norm", &self.dec_norm);
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = Vec::new();
        out.push(("embed".into(), slice_mut(&mut self.embed)));
        if let Some(o) = &mut self.out_proj {
            out.push(("out_proj".into(), slice_mut(o)));
        }
        out.push(("out_bias".into(), slice1_mut(&mut self.out_bias)));
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            let p = format!("enc.{i}");
            norm_tensors_mut(&mut out, &format!("{p}.self_norm"), &mut layer.self_norm);
            attn_tensors_mut(&mut out, &format!("{p}.self_attn"), &mut layer.self_attn);
            norm_tensors_mut(&mut out, &format!("{p}.ffn_norm"), &mut layer.ffn_norm);
            linear_tensors_mut(&mut out, &format!("{p}.ffn.inner"), &mut layer.ffn.inner);
            linear_tensors_mut(&mut out, &format!("{p}.ffn.outer"), &mut layer.ffn.outer);
        }
        norm_tensors_mut(&mut out, "enc_norm", &mut self.enc_norm);
        for (i, layer) in self.decoder.iter_mut().enumerate() {
            let p = format!("dec.{i}");
            norm_tensors_mut(&mut out, &format!("{p}.self_norm"), &mut layer.self_norm);
            attn_tensors_mut(&mut out, &format!("{p}.self_attn"), &mut layer.self_attn);
            norm_tensors_mut(&mut out, &format!("{p}.cross_norm"), &mut layer.cross_norm);
            attn_tensors_mut(&mut out, &format!("{p}.cross_attn"), &mut layer.cross_attn);
            norm_tensors_mut(&mut out, &format!("{p}.ffn_norm"), &mut layer.ffn_norm);
            linear_tensors_mut(&mut out, &format!("{p}.ffn.inner"), &mut layer.ffn.inner);
            linear_tensors_mut(&mut out, &format!("{p}.ffn.outer"), &mut layer.ffn.outer);
        }
        norm_tensors_mut(&mut out, "dec_norm", &mut self.dec_norm);
        out
    }
}

fn slice<T>(a: &Array2<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}
fn slice1<T>(a: &Array1<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}
fn slice_mut<T>(a: &mut Array2<T>) -> &mut [T] {
    a.as_slice_mut().expect("standard layout")
}
fn slice1_mut<T>(a: &mut Array1<T>) -> &mut [T] {
    a.as_slice_mut().expect("standard layout")
}

fn linear_tensors<'a, T>(out: &mut Vec<(String, &'a [T])>, p: &str, l: &'a Linear<T>) {
    out.push((format!("{p}.w"), slice(&l.w)));
    out.push((format!("{p}.b"), slice1(&l.b)));
}
fn norm_tensors<'a, T>(out: &mut Vec<(String, &'a [T])>, p: &str, n: &'a LayerNorm<T>) {
    out.push((format!("{p}.gain"), slice1(&n.gain)));
    out.push((format!("{p}.bias"), slice1(&n.bias)));
}
fn attn_tensors<'a, T>(out: &mut Vec<(String, &'a [T])>, p: &str, a: &'a Attention<T>) {
    linear_tensors(out, &format!("{p}.q"), &a.q);
    linear_tensors(out, &format!("{p}.k"), &a.k);
    linear_tensors(out, &format!("{p}.v"), &a.v);
    linear_tensors(out, &format!("{p}.o"), &a.o);
}

fn linear_tensors_mut<'a, T>(out: &mut Vec<(String, &'a mut [T])>, p: &str, l: &'a mut Linear<T>) {
    out.push((format!("{p}.w"), slice_mut(&mut l.w)));
    out.push((format!("{p}.b"), slice1_mut(&mut l.b)));
}
fn norm_tensors_mut<'a, T>(out: &mut Vec<(String, &'a mut [T])>, p: &str, n: &'a mut LayerNorm<T>) {
    out.push((format!("{p}.gain"), slice1_mut(&mut n.gain)));
    out.push((format!("{p}.bias"), slice1_mut(&mut n.bias)));
}
fn attn_tensors_mut<'a, T>(out: &mut Vec<(String, &'a mut [T])>, p: &str, a: &'a mut Attention<T>) {
    linear_tensors_mut(out, &format!("{p}.q"), &mut a.q);
    linear_tensors_mut(out, &format!("{p}.k"), &mut a.k);
    linear_tensors_mut(out, &format!("{p}.v"), &mut a.v);
    linear_tensors_mut(out, &format!("{p}.o"), &mut a.o);
}
