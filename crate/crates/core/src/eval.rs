//! Corpus-level BLEU and chrF.
//!
//! Both metrics NFC-normalise their inputs. BLEU tokenises on whitespace
//! (no `13a`-style punctuation splitting), so absolute values are comparable
//! within this toolkit but not with published scores. chrF drops whitespace
//! and works on character n-grams.
//!
//! Orders for which neither side has any n-gram (a one-word corpus has no
//! bigrams) are left out of the averages instead of counting as zero. That
//! keeps `metric(h, h)` at its maximum for every nonempty `h`.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::strip_phoneme_suffix;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("{hyps} hypotheses vs {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("no segments to score")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Smoothing {
    #[default]
    None,
    /// Adds `k` to matches and totals of every order above unigrams.
    AddK { k: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_order: usize,
    pub smoothing: Smoothing,
}

impl Default for BleuConfig {
    fn default() -> Self {
        BleuConfig {
            max_order: 4,
            smoothing: Smoothing::None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChrfConfig {
    pub order: usize,
    pub beta: f64,
}

impl Default for ChrfConfig {
    fn default() -> Self {
        ChrfConfig { order: 6, beta: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricConfig {
    #[serde(default)]
    pub bleu: BleuConfig,
    #[serde(default)]
    pub chrf: ChrfConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuStats {
    /// 0..=100
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<BleuStats>,
    /// 0..=1
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chrf: Option<f64>,
    pub segments: usize,
}

impl MetricReport {
    /// BLEU to one decimal, chrF to three.
    pub fn summary(&self) -> String {
        let mut parts = Vec::new();
        if let Some(b) = &self.bleu {
            parts.push(format!("BLEU {:.1}", b.score));
        }
        if let Some(c) = self.chrf {
            parts.push(format!("chrF2 {c:.3}"));
        }
        parts.join(" ")
    }

    pub fn bleu_score(&self) -> Option<f64> {
        self.bleu.as_ref().map(|b| b.score)
    }

    fn merge(self, other: MetricReport) -> MetricReport {
        MetricReport {
            bleu: self.bleu.or(other.bleu),
            chrf: self.chrf.or(other.chrf),
            segments: self.segments.max(other.segments),
        }
    }
}

fn check_lengths<H, R>(hyps: &[H], refs: &[R]) -> Result<(), EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if refs.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

fn ngram_counts<T: Eq + Hash + Clone>(items: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut counts = HashMap::new();
    if items.len() >= n {
        for gram in items.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// (clipped matches, hypothesis n-grams, reference n-grams)
fn order_stats<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T], n: usize) -> (u64, u64, u64) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (
        matches,
        hyp.len().saturating_sub(n - 1) as u64,
        reference.len().saturating_sub(n - 1) as u64,
    )
}

fn words(text: &str) -> Vec<String> {
    text.nfc()
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn chars_no_space(text: &str) -> Vec<char> {
    text.nfc().filter(|c| !c.is_whitespace()).collect()
}

pub fn bleu<H: AsRef<str>, R: AsRef<str>>(
    hyps: &[H],
    refs: &[R],
    cfg: &BleuConfig,
) -> Result<MetricReport, EvalError> {
    check_lengths(hyps, refs)?;
    let order = cfg.max_order.max(1);
    let mut matches = vec![0u64; order];
    let mut totals = vec![0u64; order];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let h = words(h.as_ref());
        let r = words(r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=order {
            let (m, t, _) = order_stats(&h, &r, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }

    let precisions: Vec<f64> = (0..order)
        .map(|i| {
            let (m, t) = (matches[i] as f64, totals[i] as f64);
            match cfg.smoothing {
                Smoothing::AddK { k } if i > 0 && t > 0.0 => (m + k) / (t + k),
                _ if t > 0.0 => m / t,
                _ => 0.0,
            }
        })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp()
    };
    let effective: Vec<f64> = (0..order)
        .filter(|&i| totals[i] > 0)
        .map(|i| precisions[i])
        .collect();
    let score = if effective.is_empty() || effective.iter().any(|&p| p <= 0.0) {
        0.0
    } else {
        let mean_log = effective.iter().map(|p| p.ln()).sum::<f64>() / effective.len() as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    Ok(MetricReport {
        bleu: Some(BleuStats {
            score,
            precisions,
            brevity_penalty,
            matches,
            totals,
            hyp_len,
            ref_len,
        }),
        chrf: None,
        segments: refs.len(),
    })
}

/// chrF of one segment.
pub fn chrf_segment(hyp: &str, reference: &str, cfg: &ChrfConfig) -> f64 {
    let h = chars_no_space(hyp);
    let r = chars_no_space(reference);
    if h.is_empty() && r.is_empty() {
        return 1.0;
    }
    let (mut p_sum, mut r_sum, mut effective) = (0.0, 0.0, 0usize);
    for n in 1..=cfg.order.max(1) {
        let (m, ht, rt) = order_stats(&h, &r, n);
        if ht == 0 && rt == 0 {
            continue;
        }
        effective += 1;
        if ht > 0 {
            p_sum += m as f64 / ht as f64;
        }
        if rt > 0 {
            r_sum += m as f64 / rt as f64;
        }
    }
    let precision = p_sum / effective as f64;
    let recall = r_sum / effective as f64;
    let b2 = cfg.beta * cfg.beta;
    let denom = b2 * precision + recall;
    if denom > 0.0 {
        (1.0 + b2) * precision * recall / denom
    } else {
        0.0
    }
}

/// Arithmetic mean of segment-level chrF.
pub fn chrf<H: AsRef<str>, R: AsRef<str>>(
    hyps: &[H],
    refs: &[R],
    cfg: &ChrfConfig,
) -> Result<MetricReport, EvalError> {
    check_lengths(hyps, refs)?;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| chrf_segment(h.as_ref(), r.as_ref(), cfg))
        .sum();
    Ok(MetricReport {
        bleu: None,
        chrf: Some(total / refs.len() as f64),
        segments: refs.len(),
    })
}

/// BLEU and chrF together.
pub fn evaluate<H: AsRef<str>, R: AsRef<str>>(
    hyps: &[H],
    refs: &[R],
    cfg: &MetricConfig,
) -> Result<MetricReport, EvalError> {
    Ok(bleu(hyps, refs, &cfg.bleu)?.merge(chrf(hyps, refs, &cfg.chrf)?))
}

/// Scores multi-task output after cutting each hypothesis at `sep_token`.
pub fn evaluate_multitask<H: AsRef<str>, R: AsRef<str>>(
    raw_hyps: &[H],
    refs: &[R],
    sep_token: &str,
    cfg: &MetricConfig,
) -> Result<MetricReport, EvalError> {
    let stripped: Vec<&str> = raw_hyps
        .iter()
        .map(|h| strip_phoneme_suffix(h.as_ref(), sep_token))
        .collect();
    evaluate(&stripped, refs, cfg)
}
