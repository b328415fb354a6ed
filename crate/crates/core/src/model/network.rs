use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{
    apply_dropout, log_softmax_row, smoothed_cross_entropy_grad, AttnCache, AttnLayout, FfnCache,
    NormCache, Span,
};
use super::params::Params;
use super::{Float, ModelError, Result};

/// One training pair of token ids, without bos/eos.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

/// Stacked token layout of a batch.
pub(crate) struct Batch {
    src_ids: Vec<u32>,
    src_pos: Vec<usize>,
    src_spans: Vec<Span>,
    src_masked: Vec<bool>,
    dec_ids: Vec<u32>,
    dec_pos: Vec<usize>,
    tgt_spans: Vec<Span>,
    targets: Vec<u32>,
}

impl Batch {
    /// Source gets eos appended; the decoder reads `[bos] + prefix`.
    fn new<'a>(cfg: &ModelConfig, pairs: impl IntoIterator<Item = (&'a [u32], &'a [u32])>) -> Batch {
        let mut b = Batch {
            src_ids: Vec::new(),
            src_pos: Vec::new(),
            src_spans: Vec::new(),
            src_masked: Vec::new(),
            dec_ids: Vec::new(),
            dec_pos: Vec::new(),
            tgt_spans: Vec::new(),
            targets: Vec::new(),
        };
        for (src, prefix) in pairs {
            b.src_spans.push((b.src_ids.len(), src.len() + 1));
            for (i, &t) in src.iter().chain(std::iter::once(&cfg.eos_id)).enumerate() {
                b.src_ids.push(t);
                b.src_pos.push(i);
                b.src_masked.push(t == cfg.pad_id);
            }
            b.tgt_spans.push((b.dec_ids.len(), prefix.len() + 1));
            for (i, &t) in std::iter::once(&cfg.bos_id).chain(prefix).enumerate() {
                b.dec_ids.push(t);
                b.dec_pos.push(i);
            }
        }
        b
    }

    fn training(cfg: &ModelConfig, batch: &[Example]) -> Batch {
        let mut b = Batch::new(cfg, batch.iter().map(|e| (e.src.as_slice(), e.tgt.as_slice())));
        for e in batch {
            b.targets.extend_from_slice(&e.tgt);
            b.targets.push(cfg.eos_id);
        }
        b
    }

    fn enc_layout(&self) -> AttnLayout<'_> {
        AttnLayout {
            queries: &self.src_spans,
            keys: &self.src_spans,
            causal: false,
            key_masked: Some(&self.src_masked),
        }
    }

    fn dec_layout(&self) -> AttnLayout<'_> {
        AttnLayout {
            queries: &self.tgt_spans,
            keys: &self.tgt_spans,
            causal: true,
            key_masked: None,
        }
    }

    fn cross_layout(&self) -> AttnLayout<'_> {
        AttnLayout {
            queries: &self.tgt_spans,
            keys: &self.src_spans,
            causal: false,
            key_masked: Some(&self.src_masked),
        }
    }
}

pub(crate) struct Dropout<'a> {
    rng: Option<&'a mut ChaCha8Rng>,
    p: f64,
}

impl<'a> Dropout<'a> {
    pub(crate) fn off() -> Self {
        Dropout { rng: None, p: 0.0 }
    }

    fn mask<T: Float>(&mut self, rows: usize, cols: usize) -> Option<Array2<T>> {
        let rng = self.rng.as_mut()?;
        if self.p <= 0.0 {
            return None;
        }
        let keep = T::lit(1.0 / (1.0 - self.p));
        let threshold = (self.p * u32::MAX as f64) as u32;
        Some(Array2::from_shape_simple_fn((rows, cols), || {
            if rng.gen::<u32>() < threshold {
                T::zero()
            } else {
                keep
            }
        }))
    }
}

struct EncLayerCache<T> {
    n1: NormCache<T>,
    attn: AttnCache<T>,
    d1: Option<Array2<T>>,
    n2: NormCache<T>,
    ffn: FfnCache<T>,
    d2: Option<Array2<T>>,
}

struct DecLayerCache<T> {
    n1: NormCache<T>,
    attn: AttnCache<T>,
    d1: Option<Array2<T>>,
    n2: NormCache<T>,
    cross: AttnCache<T>,
    d2: Option<Array2<T>>,
    n3: NormCache<T>,
    ffn: FfnCache<T>,
    d3: Option<Array2<T>>,
}

struct Caches<T> {
    src_drop: Option<Array2<T>>,
    enc: Vec<EncLayerCache<T>>,
    enc_norm: NormCache<T>,
    memory: Array2<T>,
    tgt_drop: Option<Array2<T>>,
    dec: Vec<DecLayerCache<T>>,
    dec_norm: NormCache<T>,
    hidden: Array2<T>,
}

/// Sinusoidal position code for one (position, dimension) pair.
pub(crate) fn position_code(pos: usize, dim: usize, d_model: usize) -> f64 {
    let rate = 10000f64.powf((dim - dim % 2) as f64 / d_model as f64);
    let angle = pos as f64 / rate;
    if dim % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

impl<T: Float> Transformer<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(Transformer { config, params })
    }

    /// Pairs a config with existing parameters, checking every tensor shape.
    pub fn from_parts(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let expected = Params::<T>::zeros(&config);
        let want = expected.tensors();
        let got = params.tensors();
        if want.len() != got.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} tensors, config expects {}",
                got.len(),
                want.len()
            )));
        }
        for ((wn, w), (gn, g)) in want.iter().zip(&got) {
            if wn != gn || w.len() != g.len() {
                return Err(ModelError::ShapeMismatch(format!("tensor {gn} does not match {wn}")));
            }
        }
        Ok(Transformer { config, params })
    }

    pub fn cast<U: Float>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            params: self.params.cast(&self.config),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(t) => Err(ModelError::ShapeMismatch(format!(
                "token id {t} outside vocabulary {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    pub(crate) fn embed(&self, ids: &[u32], pos: &[usize]) -> Array2<T> {
        let d = self.config.d_model;
        let scale = T::lit((d as f64).sqrt());
        let max_pos = pos.iter().max().map_or(0, |&p| p + 1);
        let table: Vec<T> = (0..max_pos * d)
            .map(|k| T::lit(position_code(k / d, k % d, d)))
            .collect();
        let mut x = Array2::zeros((ids.len(), d));
        for ((mut row, &id), &p) in x.rows_mut().into_iter().zip(ids).zip(pos) {
            let e = self.params.embed.row(id as usize);
            let pe = &table[p * d..(p + 1) * d];
            for ((v, &w), &c) in row.iter_mut().zip(e.iter()).zip(pe) {
                *v = w * scale + c;
            }
        }
        x
    }

    fn embed_backward(&self, ids: &[u32], dx: ArrayView2<T>, grad: &mut Params<T>) {
        let scale = T::lit((self.config.d_model as f64).sqrt());
        for (row, &id) in dx.rows().into_iter().zip(ids) {
            grad.embed.row_mut(id as usize).scaled_add(scale, &row);
        }
    }

    fn out_matrix(&self) -> &Array2<T> {
        self.params.out_proj.as_ref().unwrap_or(&self.params.embed)
    }

    pub(crate) fn project(&self, hidden: ArrayView2<T>) -> Array2<T> {
        let w = self.out_matrix();
        let mut logits = Array2::zeros((hidden.nrows(), w.nrows()));
        general_mat_mul(T::one(), &hidden, &w.t(), T::zero(), &mut logits);
        logits += &self.params.out_bias;
        logits
    }

    fn run(&self, b: &Batch, drop: &mut Dropout) -> (Array2<T>, Caches<T>) {
        let cfg = &self.config;
        let heads = cfg.n_heads;

        let mut x = self.embed(&b.src_ids, &b.src_pos);
        let src_drop = drop.mask(x.nrows(), x.ncols());
        apply_dropout(&mut x, src_drop.as_ref());
        let layout = b.enc_layout();
        let mut enc = Vec::with_capacity(self.params.encoder.len());
        for layer in &self.params.encoder {
            let (h, n1) = layer.self_norm.forward(x.view());
            let (mut a, attn) = layer.self_attn.forward(h.view(), None, &layout, heads);
            let d1 = drop.mask(a.nrows(), a.ncols());
            apply_dropout(&mut a, d1.as_ref());
            x += &a;
            let (h, n2) = layer.ffn_norm.forward(x.view());
            let (mut f, ffn) = layer.ffn.forward(h.view());
            let d2 = drop.mask(f.nrows(), f.ncols());
            apply_dropout(&mut f, d2.as_ref());
            x += &f;
            enc.push(EncLayerCache { n1, attn, d1, n2, ffn, d2 });
        }
        let (memory, enc_norm) = self.params.enc_norm.forward(x.view());

        let mut y = self.embed(&b.dec_ids, &b.dec_pos);
        let tgt_drop = drop.mask(y.nrows(), y.ncols());
        apply_dropout(&mut y, tgt_drop.as_ref());
        let self_layout = b.dec_layout();
        let cross_layout = b.cross_layout();
        let mut dec = Vec::with_capacity(self.params.decoder.len());
        for layer in &self.params.decoder {
            let (h, n1) = layer.self_norm.forward(y.view());
            let (mut a, attn) = layer.self_attn.forward(h.view(), None, &self_layout, heads);
            let d1 = drop.mask(a.nrows(), a.ncols());
            apply_dropout(&mut a, d1.as_ref());
            y += &a;
            let (h, n2) = layer.cross_norm.forward(y.view());
            let (mut c, cross) = layer.cross_attn.forward(h.view(), Some(memory.view()), &cross_layout, heads);
            let d2 = drop.mask(c.nrows(), c.ncols());
            apply_dropout(&mut c, d2.as_ref());
            y += &c;
            let (h, n3) = layer.ffn_norm.forward(y.view());
            let (mut f, ffn) = layer.ffn.forward(h.view());
            let d3 = drop.mask(f.nrows(), f.ncols());
            apply_dropout(&mut f, d3.as_ref());
            y += &f;
            dec.push(DecLayerCache { n1, attn, d1, n2, cross, d2, n3, ffn, d3 });
        }
        let (hidden, dec_norm) = self.params.dec_norm.forward(y.view());
        let logits = self.project(hidden.view());
        let caches = Caches {
            src_drop,
            enc,
            enc_norm,
            memory,
            tgt_drop,
            dec,
            dec_norm,
            hidden,
        };
        (logits, caches)
    }

    fn backward(&self, b: &Batch, c: &Caches<T>, dlogits: ArrayView2<T>) -> Params<T> {
        let heads = self.config.n_heads;
        let p = &self.params;
        let mut g = p.zeros_like();

        g.out_bias += &dlogits.sum_axis(Axis(0));
        let w = self.out_matrix();
        let mut dh = Array2::zeros((dlogits.nrows(), w.ncols()));
        general_mat_mul(T::one(), &dlogits, w, T::zero(), &mut dh);
        let gw = g.out_proj.as_mut().unwrap_or(&mut g.embed);
        general_mat_mul(T::one(), &dlogits.t(), &c.hidden, T::one(), gw);

        let mut dy = p.dec_norm.backward(&c.dec_norm, dh.view(), &mut g.dec_norm);
        let mut dmem = Array2::zeros(c.memory.raw_dim());
        let self_layout = b.dec_layout();
        let cross_layout = b.cross_layout();
        for ((layer, lc), lg) in p.decoder.iter().zip(&c.dec).zip(g.decoder.iter_mut()).rev() {
            let mut df = dy.clone();
            apply_dropout(&mut df, lc.d3.as_ref());
            let dhf = layer.ffn.backward(&lc.ffn, df.view(), &mut lg.ffn);
            dy += &layer.ffn_norm.backward(&lc.n3, dhf.view(), &mut lg.ffn_norm);

            let mut dc = dy.clone();
            apply_dropout(&mut dc, lc.d2.as_ref());
            let (dhc, dm) = layer.cross_attn.backward(&lc.cross, dc.view(), &cross_layout, heads, &mut lg.cross_attn);
            dmem += &dm.expect("cross attention returns memory gradient");
            dy += &layer.cross_norm.backward(&lc.n2, dhc.view(), &mut lg.cross_norm);

            let mut da = dy.clone();
            apply_dropout(&mut da, lc.d1.as_ref());
            let (dha, _) = layer.self_attn.backward(&lc.attn, da.view(), &self_layout, heads, &mut lg.self_attn);
            dy += &layer.self_norm.backward(&lc.n1, dha.view(), &mut lg.self_norm);
        }
        apply_dropout(&mut dy, c.tgt_drop.as_ref());
        self.embed_backward(&b.dec_ids, dy.view(), &mut g);

        let mut dx = p.enc_norm.backward(&c.enc_norm, dmem.view(), &mut g.enc_norm);
        let layout = b.enc_layout();
        for ((layer, lc), lg) in p.encoder.iter().zip(&c.enc).zip(g.encoder.iter_mut()).rev() {
            let mut df = dx.clone();
            apply_dropout(&mut df, lc.d2.as_ref());
            let dhf = layer.ffn.backward(&lc.ffn, df.view(), &mut lg.ffn);
            dx += &layer.ffn_norm.backward(&lc.n2, dhf.view(), &mut lg.ffn_norm);

            let mut da = dx.clone();
            apply_dropout(&mut da, lc.d1.as_ref());
            let (dha, _) = layer.self_attn.backward(&lc.attn, da.view(), &layout, heads, &mut lg.self_attn);
            dx += &layer.self_norm.backward(&lc.n1, dha.view(), &mut lg.self_norm);
        }
        apply_dropout(&mut dx, c.src_drop.as_ref());
        self.embed_backward(&b.src_ids, dx.view(), &mut g);
        g
    }

    /// Logits for every decoder position given `[bos] + prefix`: row `i` is
    /// the next-token distribution after `prefix[..i]`, so the result has
    /// `prefix.len() + 1` rows. Dropout is off.
    pub fn forward(&self, src: &[u32], prefix: &[u32]) -> Result<Array2<T>> {
        self.check_ids(src)?;
        self.check_ids(prefix)?;
        let b = Batch::new(&self.config, [(src, prefix)]);
        Ok(self.run(&b, &mut Dropout::off()).0)
    }

    /// Teacher-forced log-probability of `tgt` (which normally ends in eos).
    pub fn score_hypothesis(&self, src: &[u32], tgt: &[u32]) -> Result<T> {
        Ok(self.score_batch(src, &[tgt.to_vec()])?[0])
    }

    /// Scores several targets for the same source in one stacked pass.
    pub fn score_batch(&self, src: &[u32], tgts: &[Vec<u32>]) -> Result<Vec<T>> {
        self.check_ids(src)?;
        for t in tgts {
            self.check_ids(t)?;
        }
        let b = Batch::new(
            &self.config,
            tgts.iter().map(|t| (src, &t[..t.len().saturating_sub(1)])),
        );
        let (logits, _) = self.run(&b, &mut Dropout::off());
        let mut out = Vec::with_capacity(tgts.len());
        for (t, &(start, _)) in tgts.iter().zip(&b.tgt_spans) {
            let mut total = T::zero();
            for (i, &tok) in t.iter().enumerate() {
                let row = logits.row(start + i).to_vec();
                total += log_softmax_row(&row)[tok as usize];
            }
            out.push(total);
        }
        Ok(out)
    }

    /// Mean smoothed cross-entropy per target token, dropout off.
    pub fn loss(&self, batch: &[Example], smoothing: T) -> Result<T> {
        self.loss_and_grad_with(batch, smoothing, Dropout::off(), false)
            .map(|(l, _)| l)
    }

    /// Loss and gradients. With an rng and nonzero dropout in the config,
    /// dropout masks are drawn from it.
    pub fn loss_and_grad(
        &self,
        batch: &[Example],
        smoothing: T,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(T, Params<T>)> {
        let drop = Dropout {
            rng,
            p: self.config.dropout as f64,
        };
        let (loss, grad) = self.loss_and_grad_with(batch, smoothing, drop, true)?;
        Ok((loss, grad.expect("gradient requested")))
    }

    fn loss_and_grad_with(
        &self,
        batch: &[Example],
        smoothing: T,
        mut drop: Dropout,
        want_grad: bool,
    ) -> Result<(T, Option<Params<T>>)> {
        if batch.is_empty() {
            return Err(ModelError::ShapeMismatch("empty batch".into()));
        }
        for e in batch {
            self.check_ids(&e.src)?;
            self.check_ids(&e.tgt)?;
        }
        let b = Batch::training(&self.config, batch);
        let (logits, caches) = self.run(&b, &mut drop);
        let (loss, dlogits) = smoothed_cross_entropy_grad(logits.view(), &b.targets, smoothing)?;
        let grad = want_grad.then(|| self.backward(&b, &caches, dlogits.view()));
        Ok((loss, grad))
    }

    /// Encoder output for one source (eos appended), plus the key mask.
    pub(crate) fn encode_one(&self, src: &[u32]) -> Result<(Array2<T>, Vec<bool>)> {
        self.check_ids(src)?;
        let b = Batch::new(&self.config, [(src, &[][..])]);
        let heads = self.config.n_heads;
        let mut x = self.embed(&b.src_ids, &b.src_pos);
        let layout = b.enc_layout();
        for layer in &self.params.encoder {
            let (h, _) = layer.self_norm.forward(x.view());
            let (a, _) = layer.self_attn.forward(h.view(), None, &layout, heads);
            x += &a;
            let (h, _) = layer.ffn_norm.forward(x.view());
            let (f, _) = layer.ffn.forward(h.view());
            x += &f;
        }
        let (memory, _) = self.params.enc_norm.forward(x.view());
        Ok((memory, b.src_masked))
    }
}
