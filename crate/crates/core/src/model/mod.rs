//! A small transformer encoder-decoder.
//!
//! Everything is written out by hand on top of `ndarray`: forward pass,
//! backward pass, Adam, checkpoints and incremental decoding. The network is
//! generic over the float type so the same code runs in `f32` for training
//! and in `f64` for gradient checks and exact decoding oracles.
//!
//! Layers use pre-normalisation (`x + f(norm(x))`) with a final norm on both
//! stacks; source and target share one embedding table, which is also the
//! output projection unless `tied_embeddings` is off.

mod checkpoint;
mod config;
mod infer;
mod layers;
mod network;
mod params;
mod train;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::FromPrimitive;
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ModelConfig, Preset};
pub use infer::DecodeState;
pub use layers::{log_softmax_row, smoothed_cross_entropy, smoothed_cross_entropy_grad};
pub use network::{Example, Transformer};
pub use params::Params;
pub use train::{
    Adam, AdamConfig, LogEntry, LrSchedule, Stage, StageKind, StageReport, TrainOutcome,
    TrainPlan, Trainer, transfer_embeddings,
};

/// Scalar type the network can run in.
pub trait Float:
    num_traits::Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Float for f32 {}
impl Float for f64 {}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{logits} logit rows vs {refs} reference ids")]
    LengthMismatch { logits: usize, refs: usize },
    #[error("loss diverged at stage {stage:?}, step {step}")]
    DivergedLoss {
        stage: String,
        step: usize,
        /// Parameters before the failing step.
        last_good: Box<Transformer<f32>>,
    },
    #[error("training plan: {0}")]
    InvalidPlan(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
