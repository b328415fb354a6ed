use std::path::PathBuf;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::network::{Example, Transformer};
use super::params::Params;
use super::{ModelConfig, ModelError, Result};
use crate::rng;
use crate::subword::EmbeddingTransfer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup to the peak, then decay with `1/sqrt(step)`.
    InverseSqrt { warmup: usize },
}

impl LrSchedule {
    /// Learning rate at 1-based `step` for peak rate `peak`.
    pub fn rate(&self, peak: f64, step: usize) -> f64 {
        let step = step.max(1) as f64;
        match *self {
            LrSchedule::Constant => peak,
            LrSchedule::InverseSqrt { warmup } => {
                let w = warmup.max(1) as f64;
                peak * (step / w).min((w / step).sqrt())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Params<f32>,
    v: Params<f32>,
    t: usize,
}

impl Adam {
    pub fn new(config: AdamConfig, like: &Params<f32>) -> Self {
        Adam {
            config,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    /// One update; returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut Params<f32>, grad: &mut Params<f32>, lr: f64) -> f64 {
        let norm = (grad.sq_norm() as f64).sqrt();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => (c / norm) as f32,
            _ => 1.0,
        };
        self.t += 1;
        let (b1, b2) = (self.config.beta1 as f32, self.config.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = lr as f32;
        let eps = self.config.eps as f32;
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors_mut())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
            for (((p, g), m), v) in p.iter_mut().zip(g.iter_mut()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = *g * clip;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        norm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub name: String,
    pub kind: StageKind,
    pub data: Vec<Example>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub label_smoothing: f64,
    /// Fine-tune only: start with fresh optimizer moments and step count
    /// instead of continuing the previous stage's.
    pub reset_optimizer: bool,
    pub log_every: usize,
}

impl Stage {
    pub fn new(name: impl Into<String>, kind: StageKind, data: Vec<Example>, steps: usize) -> Self {
        Stage {
            name: name.into(),
            kind,
            data,
            steps,
            batch_size: 32,
            lr: 1e-3,
            schedule: LrSchedule::InverseSqrt { warmup: 200 },
            label_smoothing: 0.1,
            reset_optimizer: false,
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainPlan {
    pub stages: Vec<Stage>,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidPlan(m));
        if self.stages.is_empty() {
            return bad("a plan needs at least one stage".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if self.stages[..i].iter().any(|o| o.name == s.name) {
                return bad(format!("duplicate stage name {:?}", s.name));
            }
            if s.steps > 0 && s.data.is_empty() {
                return bad(format!("stage {:?} has steps but no data", s.name));
            }
            if s.batch_size == 0 {
                return bad(format!("stage {:?} has batch size 0", s.name));
            }
            if !(0.0..1.0).contains(&s.label_smoothing) {
                return bad(format!("stage {:?}: label smoothing outside [0, 1)", s.name));
            }
            if !(s.lr.is_finite() && s.lr >= 0.0) {
                return bad(format!("stage {:?}: bad learning rate", s.name));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

impl LogEntry {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log entry serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub kind: StageKind,
    pub steps: usize,
    /// Mean training loss over the last `log_every` steps.
    pub final_loss: Option<f64>,
    pub log: Vec<LogEntry>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Transformer<f32>,
    pub reports: Vec<StageReport>,
}

impl TrainOutcome {
    pub fn log(&self) -> impl Iterator<Item = &LogEntry> {
        self.reports.iter().flat_map(|r| &r.log)
    }
}

/// Runs a plan stage by stage on one model.
#[derive(Clone, Debug, Default)]
pub struct Trainer {
    /// When set, a checkpoint is written after each stage (and on divergence).
    pub checkpoint_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new() -> Self {
        Trainer::default()
    }

    pub fn with_checkpoints(dir: impl Into<PathBuf>) -> Self {
        Trainer {
            checkpoint_dir: Some(dir.into()),
        }
    }

    pub fn train(&self, mut model: Transformer<f32>, plan: &TrainPlan) -> Result<TrainOutcome> {
        plan.validate()?;
        let mut adam = Adam::new(plan.adam.clone(), &model.params);
        let mut reports = Vec::new();
        for (si, stage) in plan.stages.iter().enumerate() {
            if stage.kind == StageKind::Pretrain || stage.reset_optimizer {
                adam = Adam::new(plan.adam.clone(), &model.params);
            }
            let mut rng = rng::seeded(rng::derive(plan.seed, si as u64));
            let report = self.run_stage(&mut model, &mut adam, stage, &mut rng)?;
            reports.push(report);
        }
        Ok(TrainOutcome { model, reports })
    }

    fn run_stage(
        &self,
        model: &mut Transformer<f32>,
        adam: &mut Adam,
        stage: &Stage,
        rng: &mut ChaCha8Rng,
    ) -> Result<StageReport> {
        let mut order: Vec<usize> = (0..stage.data.len()).collect();
        let mut cursor = order.len();
        let mut log = Vec::new();
        let mut window = Vec::new();
        let every = stage.log_every.max(1);
        let smoothing = stage.label_smoothing as f32;
        for step in 1..=stage.steps {
            let mut batch = Vec::with_capacity(stage.batch_size);
            while batch.len() < stage.batch_size.min(stage.data.len()) {
                if cursor == order.len() {
                    order.shuffle(rng);
                    cursor = 0;
                }
                batch.push(stage.data[order[cursor]].clone());
                cursor += 1;
            }
            let (loss, mut grad) = model.loss_and_grad(&batch, smoothing, Some(rng))?;
            if !loss.is_finite() || !grad.all_finite() {
                return Err(self.diverged(model, stage, step));
            }
            let lr = stage.schedule.rate(stage.lr, adam.steps() + 1);
            let snapshot = model.params.clone();
            adam.step(&mut model.params, &mut grad, lr);
            if !model.params.all_finite() {
                model.params = snapshot;
                return Err(self.diverged(model, stage, step));
            }
            window.push(loss as f64);
            if step % every == 0 || step == stage.steps {
                let mean = window.iter().sum::<f64>() / window.len() as f64;
                let entry = LogEntry {
                    stage: stage.name.clone(),
                    step,
                    loss: mean,
                    lr,
                };
                log::debug!("{}", entry.to_json_line());
                log.push(entry);
                window.clear();
            }
        }
        let checkpoint = match &self.checkpoint_dir {
            Some(dir) => {
                let path = dir.join(format!("{}.ckpt", stage.name));
                save_checkpoint(&path, model)?;
                Some(path)
            }
            None => None,
        };
        Ok(StageReport {
            name: stage.name.clone(),
            kind: stage.kind,
            steps: stage.steps,
            final_loss: log.last().map(|e| e.loss),
            log,
            checkpoint,
        })
    }

    fn diverged(&self, model: &Transformer<f32>, stage: &Stage, step: usize) -> ModelError {
        if let Some(dir) = &self.checkpoint_dir {
            let path = dir.join(format!("{}.diverged.ckpt", stage.name));
            if let Err(e) = save_checkpoint(&path, model) {
                log::warn!("could not write {}: {e}", path.display());
            }
        }
        ModelError::DivergedLoss {
            stage: stage.name.clone(),
            step,
            last_good: Box::new(model.clone()),
        }
    }
}

/// Builds a model for a new vocabulary from a trained one: every layer is
/// copied, embedding rows follow `transfer` and unmapped rows keep the
/// seeded initialisation of `config`.
pub fn transfer_embeddings(
    from: &Transformer<f32>,
    config: ModelConfig,
    transfer: &EmbeddingTransfer,
) -> Result<Transformer<f32>> {
    if transfer.rows.len() != config.vocab_size {
        return Err(ModelError::ShapeMismatch(format!(
            "transfer map has {} rows for vocabulary {}",
            transfer.rows.len(),
            config.vocab_size
        )));
    }
    let mut target = config.clone();
    target.vocab_size = from.config.vocab_size;
    target.seed = from.config.seed;
    if target != from.config {
        return Err(ModelError::ShapeMismatch(
            "architectures differ beyond the vocabulary".into(),
        ));
    }
    let mut fresh = Transformer::<f32>::new(config)?;
    let old = &from.params;
    let copy_rows = |dst: &mut Array2<f32>, src: &Array2<f32>| {
        for (i, r) in transfer.rows.iter().enumerate() {
            if let Some(j) = r {
                dst.row_mut(i).assign(&src.row(*j as usize));
            }
        }
    };
    let p = &mut fresh.params;
    copy_rows(&mut p.embed, &old.embed);
    if let (Some(dst), Some(src)) = (p.out_proj.as_mut(), old.out_proj.as_ref()) {
        copy_rows(dst, src);
    }
    for (i, r) in transfer.rows.iter().enumerate() {
        if let Some(j) = r {
            p.out_bias[i] = old.out_bias[*j as usize];
        }
    }
    p.encoder = old.encoder.clone();
    p.enc_norm = old.enc_norm.clone();
    p.decoder = old.decoder.clone();
    p.dec_norm = old.dec_norm.clone();
    Ok(fresh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;

    fn cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            preset: Preset::Custom,
            vocab_size: vocab,
            d_model: 32,
            n_heads: 4,
            ffn_dim: 64,
            enc_layers: 1,
            dec_layers: 1,
            dropout: 0.0,
            depth_scaled_init: false,
            tied_embeddings: true,
            seed: 11,
            bos_id: 1,
            eos_id: 2,
            pad_id: 3,
        }
    }

    fn copy_data(n: usize, seed: u64) -> Vec<Example> {
        use rand::Rng;
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| {
                let len = r.gen_range(2..=5);
                let s: Vec<u32> = (0..len).map(|_| r.gen_range(5..12)).collect();
                Example { src: s.clone(), tgt: s }
            })
            .collect()
    }

    fn token_accuracy(model: &Transformer<f32>, data: &[Example]) -> f64 {
        let (mut hit, mut total) = (0, 0);
        for e in data {
            let logits = model.forward(&e.src, &e.tgt).unwrap();
            let refs: Vec<u32> = e.tgt.iter().copied().chain([2]).collect();
            for (row, &r) in logits.rows().into_iter().zip(&refs) {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
                hit += (best.0 as u32 == r) as usize;
                total += 1;
            }
        }
        hit as f64 / total as f64
    }

    #[test]
    fn schedule_shapes() {
        let s = LrSchedule::InverseSqrt { warmup: 100 };
        assert!((s.rate(1.0, 50) - 0.5).abs() < 1e-12);
        assert!((s.rate(1.0, 100) - 1.0).abs() < 1e-12);
        assert!((s.rate(1.0, 400) - 0.5).abs() < 1e-12);
        assert_eq!(LrSchedule::Constant.rate(0.3, 9), 0.3);
    }

    #[test]
    fn zero_step_plan_is_identity() {
        let model = Transformer::<f32>::new(cfg(12)).unwrap();
        let plan = TrainPlan {
            stages: vec![Stage::new("pre", StageKind::Pretrain, copy_data(4, 0), 0)],
            ..Default::default()
        };
        let out = Trainer::new().train(model.clone(), &plan).unwrap();
        assert_eq!(out.model, model);
        assert!(out.reports[0].log.is_empty());
    }

    #[test]
    fn invalid_plans() {
        assert!(TrainPlan::default().validate().is_err());
        let plan = TrainPlan {
            stages: vec![Stage::new("a", StageKind::Pretrain, vec![], 3)],
            ..Default::default()
        };
        assert!(plan.validate().is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let mut c = cfg(12);
        c.dropout = 0.1;
        let plan = TrainPlan {
            stages: vec![Stage::new("pre", StageKind::Pretrain, copy_data(40, 1), 15)],
            seed: 5,
            ..Default::default()
        };
        let a = Trainer::new().train(Transformer::new(c.clone()).unwrap(), &plan).unwrap();
        let b = Trainer::new().train(Transformer::new(c).unwrap(), &plan).unwrap();
        assert_eq!(a.model, b.model);
        let la: Vec<_> = a.log().map(|e| e.loss.to_bits()).collect();
        let lb: Vec<_> = b.log().map(|e| e.loss.to_bits()).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn finetune_continues_from_previous_stage() {
        let data = copy_data(40, 2);
        let pre = Stage::new("pre", StageKind::Pretrain, data.clone(), 10);
        let fine = Stage::new("fine", StageKind::Finetune, data.clone(), 5);
        let model = Transformer::<f32>::new(cfg(12)).unwrap();
        let both = TrainPlan {
            stages: vec![pre.clone(), fine.clone()],
            ..Default::default()
        };
        let only_fine = TrainPlan {
            stages: vec![fine],
            ..Default::default()
        };
        let only_pre = TrainPlan {
            stages: vec![pre],
            ..Default::default()
        };
        let a = Trainer::new().train(model.clone(), &both).unwrap();
        let b = Trainer::new().train(model.clone(), &only_fine).unwrap();
        let p = Trainer::new().train(model, &only_pre).unwrap();
        assert_ne!(a.model, b.model);
        assert_ne!(a.model, p.model);
        // the fine-tune schedule picks up where pre-training stopped
        assert_eq!(a.reports[1].log[0].lr, LrSchedule::InverseSqrt { warmup: 200 }.rate(1e-3, 15));
    }

    #[test]
    fn nan_loss_reports_last_good_params() {
        let mut model = Transformer::<f32>::new(cfg(12)).unwrap();
        model.params.out_bias[5] = f32::NAN;
        let plan = TrainPlan {
            stages: vec![Stage::new("pre", StageKind::Pretrain, copy_data(4, 0), 3)],
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        match Trainer::with_checkpoints(dir.path()).train(model.clone(), &plan) {
            Err(ModelError::DivergedLoss { step, last_good, .. }) => {
                assert_eq!(step, 1);
                assert_eq!(last_good.params.embed, model.params.embed);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        assert!(dir.path().join("pre.diverged.ckpt").exists());
    }

    #[test]
    fn learns_to_copy() {
        let data = copy_data(400, 3);
        let mut stage = Stage::new("copy", StageKind::Pretrain, data.clone(), 1200);
        stage.lr = 3e-3;
        stage.schedule = LrSchedule::InverseSqrt { warmup: 60 };
        stage.label_smoothing = 0.0;
        let plan = TrainPlan {
            stages: vec![stage],
            seed: 1,
            ..Default::default()
        };
        let out = Trainer::new().train(Transformer::new(cfg(12)).unwrap(), &plan).unwrap();
        let acc = token_accuracy(&out.model, &copy_data(100, 4));
        assert!(acc > 0.99, "copy accuracy {acc}");
    }

    #[test]
    fn embedding_transfer_copies_mapped_rows() {
        let from = Transformer::<f32>::new(cfg(12)).unwrap();
        let transfer = EmbeddingTransfer {
            rows: vec![Some(0), Some(1), Some(2), Some(3), Some(9), None],
        };
        let mut c = cfg(6);
        c.seed = 99;
        let to = transfer_embeddings(&from, c.clone(), &transfer).unwrap();
        assert_eq!(to.params.embed.row(4), from.params.embed.row(9));
        let fresh = Transformer::<f32>::new(c).unwrap();
        assert_eq!(to.params.embed.row(5), fresh.params.embed.row(5));
        assert_eq!(to.params.encoder, from.params.encoder);
    }
}
