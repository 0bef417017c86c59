//! Context-efficiency and answer-quality metrics, and per-strategy reports.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Trajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("trajectory {0} has no steps")]
    EmptyTrajectory(String),
    #[error("runs come from different corpora: {0} and {1}")]
    MixedCorpora(String, String),
    #[error("strategy {0} has no runs")]
    EmptyStrategy(String),
}

/// max_t |C_t|.
pub fn peak(t: &Trajectory) -> Result<usize, MetricsError> {
    t.per_step
        .iter()
        .map(|s| s.context_tokens)
        .max()
        .ok_or_else(|| MetricsError::EmptyTrajectory(t.workflow_id.clone()))
}

/// Σ_t |C_t| in millions of tokens.
pub fn dependency(t: &Trajectory) -> Result<f64, MetricsError> {
    if t.per_step.is_empty() {
        return Err(MetricsError::EmptyTrajectory(t.workflow_id.clone()));
    }
    Ok(dependency_tokens(t) as f64 / 1e6)
}

/// Σ_t |C_t| in tokens.
pub fn dependency_tokens(t: &Trajectory) -> u64 {
    t.per_step.iter().map(|s| s.context_tokens as u64).sum()
}

/// Lowercase, trim, collapse whitespace. Articles are kept.
pub fn normalize(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

pub fn em(pred: &str, gold: &str) -> f64 {
    if normalize(pred) == normalize(gold) {
        1.0
    } else {
        0.0
    }
}

/// Token-level F1 with multiset overlap.
pub fn f1(pred: &str, gold: &str) -> f64 {
    let (p, g) = (normalize(pred), normalize(gold));
    let (p, g): (Vec<&str>, Vec<&str>) = (p.split_whitespace().collect(), g.split_whitespace().collect());
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// One evaluated run: the trajectory plus what it is scored against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRun {
    pub corpus_id: String,
    /// Number of plan steps; used for difficulty strata.
    pub plan_len: usize,
    pub gold: Option<String>,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRuns {
    pub strategy: String,
    pub runs: Vec<ScoredRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy: String,
    pub n: usize,
    /// Exact match against the gold answer.
    pub acc: f64,
    pub f1: f64,
    pub steps: f64,
    /// Mean per-run peak, in tokens.
    pub peak_tokens: f64,
    /// Mean per-run dependency, in millions of tokens.
    pub dep_mtokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub corpus_id: String,
    pub config_digest: String,
    pub rows: Vec<ReportRow>,
    /// Standard deviation of each column across difficulty strata.
    pub std_rows: Vec<ReportRow>,
}

/// Plan-length strata for the spread rows.
pub const STRATA: [(&str, usize, usize); 3] = [("short", 0, 12), ("medium", 13, 21), ("long", 22, usize::MAX)];

fn row(strategy: &str, runs: &[&ScoredRun]) -> Result<ReportRow, MetricsError> {
    let n = runs.len();
    let mut r =
        ReportRow { strategy: strategy.into(), n, acc: 0.0, f1: 0.0, steps: 0.0, peak_tokens: 0.0, dep_mtokens: 0.0 };
    if n == 0 {
        return Ok(r);
    }
    for run in runs {
        let t = &run.trajectory;
        let gold = run.gold.as_deref().unwrap_or("");
        r.acc += em(&t.final_answer, gold);
        r.f1 += f1(&t.final_answer, gold);
        r.steps += t.per_step.len() as f64;
        r.peak_tokens += peak(t)? as f64;
        r.dep_mtokens += dependency(t)?;
    }
    let nf = n as f64;
    r.acc /= nf;
    r.f1 /= nf;
    r.steps /= nf;
    r.peak_tokens /= nf;
    r.dep_mtokens /= nf;
    Ok(r)
}

fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn build_report(corpus_id: &str, config_digest: &str, sets: &[StrategyRuns]) -> Result<RunReport, MetricsError> {
    let mut rows = Vec::new();
    let mut std_rows = Vec::new();
    for set in sets {
        if set.runs.is_empty() {
            return Err(MetricsError::EmptyStrategy(set.strategy.clone()));
        }
        if let Some(other) = set.runs.iter().find(|r| r.corpus_id != corpus_id) {
            return Err(MetricsError::MixedCorpora(corpus_id.into(), other.corpus_id.clone()));
        }
        let all: Vec<&ScoredRun> = set.runs.iter().collect();
        rows.push(row(&set.strategy, &all)?);
        let strata: Vec<ReportRow> = STRATA
            .iter()
            .map(|&(_, lo, hi)| {
                let sub: Vec<&ScoredRun> = set.runs.iter().filter(|r| (lo..=hi).contains(&r.plan_len)).collect();
                row(&set.strategy, &sub)
            })
            .collect::<Result<_, _>>()?;
        let present: Vec<&ReportRow> = strata.iter().filter(|r| r.n > 0).collect();
        let col = |f: fn(&ReportRow) -> f64| population_std(&present.iter().map(|r| f(r)).collect::<Vec<_>>());
        std_rows.push(ReportRow {
            strategy: set.strategy.clone(),
            n: present.len(),
            acc: col(|r| r.acc),
            f1: col(|r| r.f1),
            steps: col(|r| r.steps),
            peak_tokens: col(|r| r.peak_tokens),
            dep_mtokens: col(|r| r.dep_mtokens),
        });
    }
    Ok(RunReport { corpus_id: corpus_id.into(), config_digest: config_digest.into(), rows, std_rows })
}

impl RunReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "corpus {}  config {}", self.corpus_id, self.config_digest);
        let _ = writeln!(
            out,
            "{:<20} {:>5} {:>7} {:>7} {:>8} {:>12} {:>12}",
            "strategy", "n", "acc", "f1", "steps", "peak (tok)", "dep (Mtok)"
        );
        let line = |out: &mut String, label: &str, r: &ReportRow| {
            let _ = writeln!(
                out,
                "{:<20} {:>5} {:>7.3} {:>7.3} {:>8.2} {:>12.1} {:>12.6}",
                label, r.n, r.acc, r.f1, r.steps, r.peak_tokens, r.dep_mtokens
            );
        };
        for r in &self.rows {
            line(&mut out, &r.strategy, r);
        }
        if !self.std_rows.is_empty() {
            let _ = writeln!(out, "std across strata (n = strata present)");
            for r in &self.std_rows {
                line(&mut out, &r.strategy, r);
            }
        }
        out
    }
}
