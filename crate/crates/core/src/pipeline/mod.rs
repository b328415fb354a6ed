//! Configured experiments: prepare, segment, train, decode, rescore and
//! evaluate, with every artifact written under a run directory and recorded
//! by content hash in a [`RunManifest`].

mod config;
mod report;
mod run;
pub mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{
    CharInit, CorpusDecl, CorpusRole, ExperimentConfig, GridSpec, LoadedConfig, ModelSpec,
    MultitaskConfig, MultitaskMode, RescoreSpec, StageSpec, TrainSpec,
};
pub use report::{compare_runs, Comparison, ComparisonRow};
pub use run::run_experiment;

use crate::decode::GridResult;

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: BoxError,
    },
    #[error("run {run} has no metric for {direction}")]
    MissingMetric { run: String, direction: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit code: 1 for configuration problems, 2 for failures while
    /// running.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn stage(stage: &str, source: impl Into<BoxError>) -> Self {
        PipelineError::Stage {
            stage: stage.to_string(),
            source: source.into(),
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// 0..=100
    pub bleu: f64,
    /// 0..=1
    pub chrf: f64,
    /// Fraction of sentences reproduced exactly.
    pub exact_match: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub corpus: String,
    pub segments: usize,
    pub base: Scores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescored: Option<Scores>,
}

impl DirectionMetrics {
    /// Rescored scores when rescoring ran, otherwise the decoder's own.
    pub fn final_scores(&self) -> Scores {
        self.rescored.unwrap_or(self.base)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub model: String,
    pub stage: String,
    pub steps: usize,
    pub examples: usize,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeChoice {
    pub length_norm: f64,
    pub beam_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config_hash: String,
    /// Input file label to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Path relative to the run directory to content hash.
    pub artifacts: BTreeMap<String, String>,
    pub training: Vec<StageSummary>,
    pub decode: DecodeChoice,
    /// Keyed by direction, e.g. `xa-xb`.
    pub metrics: BTreeMap<String, DirectionMetrics>,
    /// Hash of everything above.
    pub content_hash: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn compute_hash(&self) -> String {
        let mut copy = self.clone();
        copy.content_hash = String::new();
        sha256_hex(serde_json::to_string(&copy).expect("manifest serializes").as_bytes())
    }

    pub fn verify(&self) -> bool {
        self.compute_hash() == self.content_hash
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(format!("manifest: {e}")))
    }

    /// Reads `manifest.json` from a run directory (or the file itself).
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| PipelineError::io(&file, e))?;
        Self::from_json(&text)
    }
}
