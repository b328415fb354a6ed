//! Beam search with length normalisation, (n, b) grid search, n-best files
//! and character-level rescoring.
//!
//! A hypothesis' normalised score is `raw / length^n`, where the length
//! counts the end-of-sentence token. At every step all expansions of the
//! live hypotheses compete for the free beam slots; expansions ending in
//! `</s>` move to the finished pool and permanently use up their slot, so at
//! most `b` hypotheses finish. With `b = 1` this is greedy decoding. At
//! `max_len` only `</s>` may be appended.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, EvalError, MetricConfig};
use crate::model::{DecodeState, Float, ModelError, Transformer};
use crate::subword::{SubwordModel, UNK_ID};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("length must be at least 1")]
    ZeroLength,
    #[error("invalid beam config: {0}")]
    InvalidConfig(String),
    #[error("invalid rescore config: {0}")]
    InvalidRescore(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("n-best line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DecodeError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Exponent `n` in `raw / length^n`.
    pub length_norm: f64,
    pub max_len: usize,
    pub nbest: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 8,
            length_norm: 1.0,
            max_len: 200,
            nbest: 1,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DecodeError::InvalidConfig(m.into()));
        if self.beam_size == 0 {
            return bad("beam size must be at least 1");
        }
        if !(self.length_norm.is_finite() && self.length_norm >= 0.0) {
            return bad("length normalisation exponent must be finite and non-negative");
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1");
        }
        if self.nbest == 0 || self.nbest > self.beam_size {
            return bad("nbest must be between 1 and the beam size");
        }
        Ok(())
    }
}

/// Result of rescoring one hypothesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rescored {
    /// Normalised score before rescoring.
    pub original: f64,
    pub char_raw: f64,
    pub char_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Target ids, ending in `</s>` when finished. Empty when read from text.
    pub tokens: Vec<u32>,
    pub text: Option<String>,
    pub raw_logprob: f64,
    /// `raw / length^n`, or the combined score after rescoring.
    pub normalized_score: f64,
    /// `false` only for the fallback returned when nothing finished.
    pub finished: bool,
    pub rescored: Option<Rescored>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    pub source_id: usize,
    pub hypotheses: Vec<Hypothesis>,
}

/// Descending score, then lexicographic token ids, then text.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.normalized_score
        .total_cmp(&a.normalized_score)
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| a.text.cmp(&b.text))
}

impl NBestList {
    pub fn sort(&mut self) {
        self.hypotheses.sort_by(rank);
    }

    pub fn is_sorted(&self) -> bool {
        self.hypotheses
            .windows(2)
            .all(|w| w[0].normalized_score >= w[1].normalized_score)
    }

    pub fn best(&self) -> Option<&Hypothesis> {
        self.hypotheses.first()
    }
}

pub fn length_normalize(raw: f64, length: usize, n: f64) -> Result<f64> {
    if length == 0 {
        return Err(DecodeError::ZeroLength);
    }
    Ok(raw / (length as f64).powf(n))
}

struct Live<T> {
    tokens: Vec<u32>,
    raw: f64,
    state: DecodeState<T>,
    logprobs: Vec<f64>,
}

struct Candidate {
    parent: usize,
    token: u32,
    raw: f64,
}

/// Length-normalised beam search for one source sentence.
pub fn beam_search<T: Float>(model: &Transformer<T>, src: &[u32], cfg: &BeamConfig) -> Result<NBestList> {
    cfg.validate()?;
    let mc = &model.config;
    let n = cfg.length_norm;
    let norm = |raw: f64, len: usize| raw / (len as f64).powf(n);

    let mut start = vec![model.start_decode(src)?];
    let lp = model.decode_step(&mut start, &[mc.bos_id]);
    let mut live = vec![Live {
        tokens: Vec::new(),
        raw: 0.0,
        state: start.pop().expect("one state"),
        logprobs: lp.row(0).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();
    let mut best_unfinished: Option<Hypothesis> = None;

    for len in 1..=cfg.max_len {
        let last = len == cfg.max_len;
        let mut cands = Vec::new();
        for (pi, h) in live.iter().enumerate() {
            for (t, &lp) in h.logprobs.iter().enumerate() {
                let t = t as u32;
                if t == mc.bos_id || t == mc.pad_id || (last && t != mc.eos_id) {
                    continue;
                }
                let raw = h.raw + lp;
                if raw.is_finite() {
                    cands.push(Candidate { parent: pi, token: t, raw });
                }
            }
        }
        // same length everywhere, so raw order is normalised order
        cands.sort_by(|a, b| {
            b.raw.total_cmp(&a.raw).then_with(|| {
                live[a.parent]
                    .tokens
                    .iter()
                    .chain([&a.token])
                    .cmp(live[b.parent].tokens.iter().chain([&b.token]))
            })
        });
        cands.truncate(cfg.beam_size - pool.len());

        let mut next_states = Vec::new();
        let mut next = Vec::new();
        for c in cands {
            let mut tokens = live[c.parent].tokens.clone();
            tokens.push(c.token);
            if c.token == mc.eos_id {
                pool.push(Hypothesis {
                    tokens,
                    text: None,
                    raw_logprob: c.raw,
                    normalized_score: norm(c.raw, len),
                    finished: true,
                    rescored: None,
                });
            } else {
                next_states.push(live[c.parent].state.clone());
                next.push((tokens, c.raw));
            }
        }
        if let Some((tokens, raw)) = next.first() {
            let h = Hypothesis {
                tokens: tokens.clone(),
                text: None,
                raw_logprob: *raw,
                normalized_score: norm(*raw, len),
                finished: false,
                rescored: None,
            };
            best_unfinished = Some(h);
        }
        if next.is_empty() || pool.len() >= cfg.beam_size {
            break;
        }
        pool.sort_by(rank);
        if pool.len() >= cfg.nbest {
            // no completion of a live hypothesis can score above raw / max_len^n
            let kth = pool[cfg.nbest - 1].normalized_score;
            let bound = next.iter().map(|(_, r)| norm(*r, cfg.max_len)).fold(f64::NEG_INFINITY, f64::max);
            if kth > bound {
                break;
            }
        }
        let feed: Vec<u32> = next.iter().map(|(t, _)| *t.last().expect("nonempty")).collect();
        let lp = model.decode_step(&mut next_states, &feed);
        live = next
            .into_iter()
            .zip(next_states)
            .enumerate()
            .map(|(i, ((tokens, raw), state))| Live {
                tokens,
                raw,
                state,
                logprobs: lp.row(i).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
            })
            .collect();
    }

    pool.sort_by(rank);
    pool.truncate(cfg.nbest);
    if pool.is_empty() {
        if let Some(h) = best_unfinished {
            log::warn!("no hypothesis finished within {} tokens", cfg.max_len);
            pool.push(h);
        }
    }
    Ok(NBestList {
        source_id: 0,
        hypotheses: pool,
    })
}

/// Greedy decoding: the most probable token at every step.
pub fn greedy<T: Float>(model: &Transformer<T>, src: &[u32], max_len: usize) -> Result<Vec<u32>> {
    let mc = &model.config;
    let mut state = vec![model.start_decode(src)?];
    let mut feed = mc.bos_id;
    let mut out = Vec::new();
    for len in 1..=max_len {
        let lp = model.decode_step(&mut state, &[feed]);
        let best = lp
            .row(0)
            .iter()
            .enumerate()
            .filter(|&(t, _)| {
                let t = t as u32;
                t != mc.bos_id && t != mc.pad_id && (len < max_len || t == mc.eos_id)
            })
            .fold(None, |acc: Option<(u32, T)>, (t, &v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((t as u32, v)),
            });
        let Some((t, _)) = best else { break };
        out.push(t);
        if t == mc.eos_id {
            break;
        }
        feed = t;
    }
    Ok(out)
}

/// Decodes `text` and fills in hypothesis texts.
pub fn translate<T: Float>(
    model: &Transformer<T>,
    src_seg: &SubwordModel,
    tgt_seg: &SubwordModel,
    text: &str,
    cfg: &BeamConfig,
) -> Result<NBestList> {
    let src = src_seg.encode(text);
    let mut list = beam_search(model, &src, cfg)?;
    for h in &mut list.hypotheses {
        h.text = tgt_seg.decode(&h.tokens).ok();
    }
    Ok(list)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMetric {
    Bleu,
    Chrf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub length_norm: f64,
    pub beam_size: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub length_norm: f64,
    pub beam_size: usize,
    pub score: f64,
    pub table: Vec<GridCell>,
}

/// Development set for grid search: source text and reference text.
pub struct DevSet<'a> {
    pub sources: &'a [String],
    pub references: &'a [String],
    /// Cut hypotheses at this separator before scoring (multi-task output).
    pub strip_sep: Option<&'a str>,
}

/// Decodes the dev set for every `(n, b)` cell and keeps the best one.
/// Ties go to the smaller beam, then the smaller exponent.
#[allow(clippy::too_many_arguments)]
pub fn grid_search<T: Float>(
    model: &Transformer<T>,
    src_seg: &SubwordModel,
    tgt_seg: &SubwordModel,
    dev: &DevSet,
    n_grid: &[f64],
    b_grid: &[usize],
    max_len: usize,
    metric: GridMetric,
) -> Result<GridResult> {
    if n_grid.is_empty() || b_grid.is_empty() {
        return Err(DecodeError::InvalidConfig("empty grid".into()));
    }
    let cfg = MetricConfig::default();
    let mut table = Vec::with_capacity(n_grid.len() * b_grid.len());
    for &n in n_grid {
        for &b in b_grid {
            let beam = BeamConfig {
                beam_size: b,
                length_norm: n,
                max_len,
                nbest: 1,
            };
            let mut hyps = Vec::with_capacity(dev.sources.len());
            for s in dev.sources {
                let list = translate(model, src_seg, tgt_seg, s, &beam)?;
                hyps.push(list.best().and_then(|h| h.text.clone()).unwrap_or_default());
            }
            let report = match dev.strip_sep {
                Some(sep) => eval::evaluate_multitask(&hyps, dev.references, sep, &cfg)?,
                None => eval::evaluate(&hyps, dev.references, &cfg)?,
            };
            let score = match metric {
                GridMetric::Bleu => report.bleu_score().unwrap_or(0.0),
                GridMetric::Chrf => report.chrf.unwrap_or(0.0),
            };
            log::info!("grid n={n} b={b}: {score}");
            table.push(GridCell {
                length_norm: n,
                beam_size: b,
                score,
            });
        }
    }
    let best = pick_best(&table);
    Ok(GridResult {
        length_norm: best.length_norm,
        beam_size: best.beam_size,
        score: best.score,
        table,
    })
}

fn pick_best(table: &[GridCell]) -> &GridCell {
    table
        .iter()
        .min_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.beam_size.cmp(&b.beam_size))
                .then(a.length_norm.total_cmp(&b.length_norm))
        })
        .expect("nonempty table")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescoreConfig {
    /// Weight of the character-model score; 0 keeps the original ranking.
    pub lambda: f64,
    /// Exponent for normalising the character-model score by its length;
    /// 0 uses the raw log-probability.
    pub length_norm: f64,
}

impl Default for RescoreConfig {
    fn default() -> Self {
        RescoreConfig {
            lambda: 1.0,
            length_norm: 1.0,
        }
    }
}

impl RescoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(DecodeError::InvalidRescore(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.length_norm.is_finite() && self.length_norm >= 0.0) {
            return Err(DecodeError::InvalidRescore("bad length normalisation exponent".into()));
        }
        Ok(())
    }
}

/// Re-ranks `nbest` with a character-level model. Each hypothesis text is
/// re-encoded with `char_seg`; hypotheses without text or with characters
/// outside the character vocabulary are dropped with a warning.
pub fn rescore<T: Float>(
    nbest: &NBestList,
    source: &str,
    char_model: &Transformer<T>,
    char_seg: &SubwordModel,
    cfg: &RescoreConfig,
) -> Result<NBestList> {
    cfg.validate()?;
    let src = char_seg.encode(source);
    let eos = char_model.config.eos_id;
    let mut kept = Vec::new();
    let mut targets = Vec::new();
    for h in &nbest.hypotheses {
        let Some(text) = &h.text else {
            log::warn!("sentence {}: hypothesis without text dropped", nbest.source_id);
            continue;
        };
        let mut ids = char_seg.encode(text);
        if ids.contains(&UNK_ID) || ids.iter().any(|&t| t as usize >= char_model.vocab_size()) {
            log::warn!("sentence {}: cannot encode {text:?} at character level, dropped", nbest.source_id);
            continue;
        }
        ids.push(eos);
        targets.push(ids);
        kept.push(h);
    }
    let scores = if targets.is_empty() {
        Vec::new()
    } else {
        char_model.score_batch(&src, &targets)?
    };
    let mut hypotheses = Vec::with_capacity(kept.len());
    for ((h, ids), s) in kept.into_iter().zip(&targets).zip(scores) {
        let char_raw = s.to_f64().unwrap_or(f64::NAN);
        let char_norm = length_normalize(char_raw, ids.len(), cfg.length_norm)?;
        let original = h.rescored.as_ref().map_or(h.normalized_score, |r| r.original);
        let combined = if cfg.lambda == 0.0 {
            h.normalized_score
        } else if cfg.lambda == 1.0 {
            char_norm
        } else {
            (1.0 - cfg.lambda) * h.normalized_score + cfg.lambda * char_norm
        };
        let mut h = h.clone();
        h.normalized_score = combined;
        h.rescored = Some(Rescored {
            original,
            char_raw,
            char_norm,
        });
        hypotheses.push(h);
    }
    let mut out = NBestList {
        source_id: nbest.source_id,
        hypotheses,
    };
    if cfg.lambda != 0.0 {
        out.sort();
    }
    Ok(out)
}

/// Longest run of an immediately repeated character group in `text`,
/// as `(repetitions, group)`. Text without any repetition gives `(1, "")`.
pub fn repetition_run(text: &str) -> (usize, String) {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut best = (1, String::new());
    for period in 1..=n / 2 {
        for start in 0..n.saturating_sub(2 * period - 1) {
            let mut reps = 1;
            while start + (reps + 1) * period <= n
                && chars[start..start + period] == chars[start + reps * period..start + (reps + 1) * period]
            {
                reps += 1;
            }
            if reps > best.0 {
                best = (reps, chars[start..start + period].iter().collect());
            }
        }
    }
    best
}

/// One line per hypothesis: `id ||| text ||| raw ||| normalized`.
/// Numbers use Rust's shortest round-trip formatting.
pub fn format_nbest(lists: &[NBestList]) -> String {
    let mut out = String::new();
    for list in lists {
        for h in &list.hypotheses {
            let text = h.text.as_deref().unwrap_or("");
            writeln!(
                out,
                "{} ||| {} ||| {} ||| {}",
                list.source_id, text, h.raw_logprob, h.normalized_score
            )
            .expect("write to string");
        }
    }
    out
}

pub fn parse_nbest(text: &str) -> Result<Vec<NBestList>> {
    let mut lists: Vec<NBestList> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: &str| DecodeError::Parse {
            line: i + 1,
            message: m.to_string(),
        };
        let fields: Vec<&str> = line.split(" ||| ").collect();
        if fields.len() != 4 {
            return Err(err("expected 4 fields separated by ' ||| '"));
        }
        let id: usize = fields[0].trim().parse().map_err(|_| err("bad sentence id"))?;
        let raw: f64 = fields[2].trim().parse().map_err(|_| err("bad raw score"))?;
        let norm: f64 = fields[3].trim().parse().map_err(|_| err("bad normalized score"))?;
        let h = Hypothesis {
            tokens: Vec::new(),
            text: Some(fields[1].to_string()),
            raw_logprob: raw,
            normalized_score: norm,
            finished: true,
            rescored: None,
        };
        match lists.last_mut() {
            Some(l) if l.source_id == id => l.hypotheses.push(h),
            _ => lists.push(NBestList {
                source_id: id,
                hypotheses: vec![h],
            }),
        }
    }
    Ok(lists)
}

pub fn write_nbest(path: &Path, lists: &[NBestList]) -> Result<()> {
    fs::write(path, format_nbest(lists))?;
    Ok(())
}

pub fn read_nbest(path: &Path) -> Result<Vec<NBestList>> {
    parse_nbest(&fs::read_to_string(path)?)
}
