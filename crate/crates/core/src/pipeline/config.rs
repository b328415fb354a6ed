use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::corpus::{self, BalancePolicy, DEFAULT_SEP};
use crate::decode::{BeamConfig, GridMetric, RescoreConfig};
use crate::eval::MetricConfig;
use crate::model::{AdamConfig, LrSchedule, ModelConfig, Preset, Stage, StageKind};
use crate::subword::SegmenterMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusRole {
    Train,
    Backtranslation,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusDecl {
    pub name: String,
    /// Base path of `<path>.src`, `<path>.tgt` and `<path>.json`, relative
    /// to the config file.
    pub path: PathBuf,
    pub role: CorpusRole,
    /// Backtranslation only: the training corpus this one is mixed into.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix_into: Option<String>,
    /// Backtranslation only: sample size relative to the parallel corpus,
    /// e.g. `"1/2"` or `"0.5"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MultitaskMode {
    #[default]
    None,
    Vertical,
    Horizontal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultitaskConfig {
    #[serde(default)]
    pub mode: MultitaskMode,
    /// G2P rule file for the source language.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules: Option<PathBuf>,
    #[serde(default = "default_sep")]
    pub sep: String,
}

fn default_sep() -> String {
    DEFAULT_SEP.to_string()
}

impl Default for MultitaskConfig {
    fn default() -> Self {
        MultitaskConfig {
            mode: MultitaskMode::None,
            rules: None,
            sep: default_sep(),
        }
    }
}

/// Per-field overrides on top of a preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enc_layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dec_layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_scaled_init: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tied_embeddings: Option<bool>,
}

impl ModelSpec {
    pub fn build(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        let mut c = ModelConfig::preset(self.preset.unwrap_or(Preset::Base), vocab_size, seed);
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(d_model, n_heads, ffn_dim, enc_layers, dec_layers, dropout, depth_scaled_init, tied_embeddings);
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    pub kind: StageKind,
    /// Training corpora used by this stage; empty means all of them.
    #[serde(default)]
    pub corpora: Vec<String>,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_schedule")]
    pub schedule: LrSchedule,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default)]
    pub reset_optimizer: bool,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_schedule() -> LrSchedule {
    LrSchedule::InverseSqrt { warmup: 200 }
}
fn default_smoothing() -> f64 {
    0.1
}
fn default_log_every() -> usize {
    50
}

impl StageSpec {
    pub(crate) fn to_stage(&self, data: Vec<crate::model::Example>) -> Stage {
        Stage {
            name: self.name.clone(),
            kind: self.kind,
            data,
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            schedule: self.schedule.clone(),
            label_smoothing: self.label_smoothing,
            reset_optimizer: self.reset_optimizer,
            log_every: self.log_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Training pairs with more tokens than this on either side are skipped.
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
}

fn default_max_tokens() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_grid: Vec<f64>,
    pub b_grid: Vec<usize>,
    #[serde(default = "default_metric")]
    pub metric: GridMetric,
}

fn default_metric() -> GridMetric {
    GridMetric::Bleu
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CharInit {
    #[default]
    Scratch,
    /// Start from the trained subword model, keeping every layer and the
    /// embeddings of single-character units.
    FromSubword,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RescoreSpec {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_rescore_norm")]
    pub length_norm: f64,
    /// Hypotheses per sentence handed to the rescorer.
    #[serde(default = "default_nbest")]
    pub nbest: usize,
    #[serde(default)]
    pub init: CharInit,
    /// Character model architecture; defaults to the main model's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    pub stages: Vec<StageSpec>,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_rescore_norm() -> f64 {
    1.0
}
fn default_nbest() -> usize {
    20
}

impl RescoreSpec {
    pub fn config(&self) -> RescoreConfig {
        RescoreConfig {
            lambda: self.lambda,
            length_norm: self.length_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub corpora: Vec<CorpusDecl>,
    #[serde(default)]
    pub balance: BalancePolicy,
    #[serde(default)]
    pub multitask: MultitaskConfig,
    pub segmenter: SegmenterMode,
    #[serde(default)]
    pub model: ModelSpec,
    pub train: TrainSpec,
    #[serde(default)]
    pub decode: BeamConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescore: Option<RescoreSpec>,
    #[serde(default)]
    pub metrics: MetricConfig,
}

/// A config together with the directory its relative paths start from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<LoadedConfig, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let config = Self::from_json(&text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = LoadedConfig { config, base_dir };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn corpora_with(&self, role: CorpusRole) -> impl Iterator<Item = &CorpusDecl> {
        self.corpora.iter().filter(move |c| c.role == role)
    }

    fn validate_static(&self) -> Result<(), PipelineError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(config_err("name must be a plain non-empty identifier"));
        }
        let mut names = BTreeSet::new();
        for c in &self.corpora {
            if !names.insert(c.name.as_str()) {
                return Err(config_err(format!("duplicate corpus name {:?}", c.name)));
            }
        }
        if self.corpora_with(CorpusRole::Test).next().is_none() {
            return Err(config_err("at least one test corpus is required"));
        }
        let train: BTreeSet<&str> = self.corpora_with(CorpusRole::Train).map(|c| c.name.as_str()).collect();
        if train.is_empty() {
            return Err(config_err("at least one training corpus is required"));
        }
        for c in &self.corpora {
            let bt = c.role == CorpusRole::Backtranslation;
            if bt != c.mix_into.is_some() || bt != c.ratio.is_some() {
                return Err(config_err(format!(
                    "corpus {:?}: mix_into and ratio are required for backtranslation and only there",
                    c.name
                )));
            }
            if let Some(target) = &c.mix_into {
                if !train.contains(target.as_str()) {
                    return Err(config_err(format!("corpus {:?} mixes into unknown corpus {target:?}", c.name)));
                }
            }
            if let Some(r) = &c.ratio {
                corpus::parse_ratio(r).map_err(|e| config_err(format!("corpus {:?}: {e}", c.name)))?;
            }
        }
        let check_stages = |stages: &[StageSpec], what: &str| -> Result<(), PipelineError> {
            if stages.is_empty() {
                return Err(config_err(format!("{what}: at least one stage is required")));
            }
            let mut seen = BTreeSet::new();
            for s in stages {
                if s.name.is_empty() || s.name.contains(['/', '\\', '.']) {
                    return Err(config_err(format!("{what}: stage name {:?} must be a plain identifier", s.name)));
                }
                if !seen.insert(s.name.as_str()) {
                    return Err(config_err(format!("{what}: duplicate stage {:?}", s.name)));
                }
                if s.batch_size == 0 {
                    return Err(config_err(format!("{what}: stage {:?} has batch size 0", s.name)));
                }
                if !(0.0..1.0).contains(&s.label_smoothing) {
                    return Err(config_err(format!("{what}: stage {:?} label smoothing outside [0, 1)", s.name)));
                }
                for c in &s.corpora {
                    if !train.contains(c.as_str()) {
                        return Err(config_err(format!("{what}: stage {:?} uses unknown corpus {c:?}", s.name)));
                    }
                }
            }
            Ok(())
        };
        check_stages(&self.train.stages, "train")?;
        match self.multitask.mode {
            MultitaskMode::None => {}
            _ if self.multitask.rules.is_none() => {
                return Err(config_err("multitask modes need a G2P rule file"));
            }
            MultitaskMode::Horizontal if self.multitask.sep.trim().is_empty() || self.multitask.sep.contains(' ') => {
                return Err(config_err("separator must be a single non-empty token"));
            }
            _ => {}
        }
        let probe = self.model.build(64, self.seed);
        probe.validate().map_err(|e| config_err(e.to_string()))?;
        self.decode.validate().map_err(|e| config_err(e.to_string()))?;
        if let Some(g) = &self.grid {
            if self.corpora_with(CorpusRole::Dev).next().is_none() {
                return Err(config_err("grid search needs a dev corpus"));
            }
            if g.n_grid.is_empty() || g.b_grid.is_empty() {
                return Err(config_err("grid search needs nonempty grids"));
            }
            if g.n_grid.iter().any(|n| !(n.is_finite() && *n >= 0.0)) || g.b_grid.contains(&0) {
                return Err(config_err("grid values must be n >= 0 and b >= 1"));
            }
        }
        if let Some(r) = &self.rescore {
            r.config().validate().map_err(|e| config_err(e.to_string()))?;
            if r.nbest == 0 {
                return Err(config_err("rescore.nbest must be positive"));
            }
            if r.init == CharInit::FromSubword && !matches!(self.segmenter, SegmenterMode::Bpe { .. }) {
                return Err(config_err("from_subword init needs a subword (bpe) segmenter"));
            }
            if let Some(m) = &r.model {
                m.build(64, self.seed).validate().map_err(|e| config_err(e.to_string()))?;
            }
            check_stages(&r.stages, "rescore")?;
        }
        Ok(())
    }
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let c = &self.config;
        c.validate_static()?;
        for decl in &c.corpora {
            let base = self.resolve(&decl.path);
            for ext in ["src", "tgt", "json"] {
                let mut f = base.clone().into_os_string();
                f.push(format!(".{ext}"));
                if !Path::new(&f).is_file() {
                    return Err(config_err(format!(
                        "corpus {:?}: missing {}",
                        decl.name,
                        Path::new(&f).display()
                    )));
                }
            }
        }
        if let Some(rules) = &c.multitask.rules {
            if !self.resolve(rules).is_file() {
                return Err(config_err(format!("missing rule file {}", rules.display())));
            }
        }
        Ok(())
    }
}
