use std::collections::BTreeSet;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result, RunManifest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub system: String,
    /// One entry per direction, in [`Comparison::directions`] order.
    pub bleu: Vec<f64>,
    pub chrf: Vec<f64>,
    pub delta_bleu: Vec<f64>,
    pub delta_chrf: Vec<f64>,
}

/// BLEU and chrF per run and direction, with differences to a baseline run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub directions: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

/// Tabulates the final (rescored when available) scores of each run.
/// `baseline` names the reference run and defaults to the first one.
pub fn compare_runs(manifests: &[RunManifest], baseline: Option<&str>) -> Result<Comparison> {
    let first = manifests
        .first()
        .ok_or_else(|| PipelineError::Config("nothing to compare".into()))?;
    let base = match baseline {
        Some(name) => manifests
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| PipelineError::Config(format!("unknown baseline run {name:?}")))?,
        None => first,
    };
    let directions: Vec<String> = manifests
        .iter()
        .flat_map(|m| m.metrics.keys().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let values = |m: &RunManifest| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut bleu = Vec::with_capacity(directions.len());
        let mut chrf = Vec::with_capacity(directions.len());
        for d in &directions {
            let s = m
                .metrics
                .get(d)
                .ok_or_else(|| PipelineError::MissingMetric {
                    run: m.name.clone(),
                    direction: d.clone(),
                })?
                .final_scores();
            bleu.push(s.bleu);
            chrf.push(s.chrf);
        }
        Ok((bleu, chrf))
    };
    let (base_bleu, base_chrf) = values(base)?;
    let mut rows = Vec::with_capacity(manifests.len());
    for m in manifests {
        let (bleu, chrf) = values(m)?;
        let delta_bleu = bleu.iter().zip(&base_bleu).map(|(a, b)| a - b).collect();
        let delta_chrf = chrf.iter().zip(&base_chrf).map(|(a, b)| a - b).collect();
        rows.push(ComparisonRow {
            system: m.name.clone(),
            bleu,
            chrf,
            delta_bleu,
            delta_chrf,
        });
    }
    Ok(Comparison {
        baseline: base.name.clone(),
        directions,
        rows,
    })
}

impl Comparison {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }

    /// Markdown table: system, BLEU per direction, ChrF per direction, then
    /// the differences to the baseline.
    pub fn to_markdown(&self) -> String {
        let mut header = vec!["system".to_string()];
        for prefix in ["BLEU", "ChrF", "ΔBLEU", "ΔChrF"] {
            header.extend(self.directions.iter().map(|d| format!("{prefix} {d}")));
        }
        let mut out = String::new();
        writeln!(out, "| {} |", header.join(" | ")).unwrap();
        writeln!(out, "|{}", "---|".repeat(header.len())).unwrap();
        for r in &self.rows {
            let mut cells = vec![r.system.clone()];
            cells.extend(r.bleu.iter().map(|v| format!("{v:.1}")));
            cells.extend(r.chrf.iter().map(|v| format!("{v:.3}")));
            cells.extend(r.delta_bleu.iter().map(|v| format!("{v:+.1}")));
            cells.extend(r.delta_chrf.iter().map(|v| format!("{v:+.3}")));
            writeln!(out, "| {} |", cells.join(" | ")).unwrap();
        }
        writeln!(out, "\nBaseline: {}", self.baseline).unwrap();
        out
    }
}
