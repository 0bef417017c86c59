//! Outcome-level filters deciding which compressed runs count as successful.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Embedder, EmbeddingVector, Judge, JudgeLabel, JudgeRequest, JudgeVerdict};
use crate::model::{Trajectory, Workflow};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

pub fn cosine<T: Scalar>(u: &EmbeddingVector<T>, v: &EmbeddingVector<T>) -> Result<T, ScoringError> {
    if u.dim() != v.dim() {
        return Err(ScoringError::DimensionMismatch(u.dim(), v.dim()));
    }
    if u.is_zero() || v.is_zero() {
        return Err(ScoringError::ZeroVector);
    }
    let dot: T = u.values.iter().zip(&v.values).map(|(&a, &b)| a * b).sum();
    let c = dot / (u.norm * v.norm);
    // rounding can push |c| a hair past 1
    Ok(c.max(-T::one()).min(T::one()))
}

/// s = cos(embed(y_full), embed(y_comp)).
pub fn semantic_equivalence(y_full: &str, y_comp: &str, embedder: &dyn Embedder) -> Result<f64, ScoringError> {
    cosine(&embedder.embed(y_full)?, &embedder.embed(y_comp)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub theta: f64,
    /// Require s ≥ θ. Disabled only for filter ablations.
    pub use_equivalence: bool,
    /// Reject judge = worse. Disabled only for filter ablations.
    pub use_judge: bool,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { theta: 0.85, use_equivalence: true, use_judge: true }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), String> {
        if self.theta > 0.0 && self.theta <= 1.0 {
            Ok(())
        } else {
            Err(format!("theta must lie in (0, 1], got {}", self.theta))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    LowEquivalence,
    DegenerateRatio,
    EmptyCompression,
    JudgeWorse,
    Truncated,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureReason::LowEquivalence => "low_equivalence",
            FailureReason::DegenerateRatio => "degenerate_ratio",
            FailureReason::EmptyCompression => "empty_compression",
            FailureReason::JudgeWorse => "judge_worse",
            FailureReason::Truncated => "truncated",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessLabel {
    pub success: bool,
    pub equivalence_s: f64,
    pub judge: JudgeVerdict,
    pub per_step_ratios: Vec<f64>,
    pub failure_reasons: BTreeSet<FailureReason>,
}

/// The quantities the success rule looks at, separated from how they were obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelInputs {
    pub s: f64,
    pub ratios: Vec<f64>,
    /// Whether each compressed context was non-empty.
    pub non_empty: Vec<bool>,
    pub judge: JudgeVerdict,
    pub truncated: bool,
}

/// success ⇔ s ≥ θ ∧ ∀t 0 < r_t < 1 ∧ contexts non-empty ∧ judge ≠ worse ∧ not truncated.
pub fn decide(inputs: LabelInputs, th: &Thresholds) -> SuccessLabel {
    let mut reasons = BTreeSet::new();
    if inputs.truncated {
        reasons.insert(FailureReason::Truncated);
    }
    // written negated so a NaN similarity fails too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if th.use_equivalence && !(inputs.s >= th.theta) {
        reasons.insert(FailureReason::LowEquivalence);
    }
    if inputs.ratios.iter().any(|&r| !(r > 0.0 && r < 1.0)) {
        reasons.insert(FailureReason::DegenerateRatio);
    }
    if inputs.non_empty.iter().any(|ok| !ok) {
        reasons.insert(FailureReason::EmptyCompression);
    }
    if th.use_judge && inputs.judge.label == JudgeLabel::Worse {
        reasons.insert(FailureReason::JudgeWorse);
    }
    SuccessLabel {
        success: reasons.is_empty(),
        equivalence_s: inputs.s,
        judge: inputs.judge,
        per_step_ratios: inputs.ratios,
        failure_reasons: reasons,
    }
}

/// A full-context run and a compressed run of the same workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPair {
    pub full: Trajectory,
    pub compressed: Trajectory,
}

/// Applies the success rule to a pair. Empty answers get s = 0.
pub fn label_trajectory(
    w: &Workflow,
    pair: &TrajectoryPair,
    th: &Thresholds,
    embedder: &dyn Embedder,
    judge: &dyn Judge,
) -> Result<SuccessLabel, BackendError> {
    let (full, comp) = (&pair.full, &pair.compressed);
    let s = match semantic_equivalence(&full.final_answer, &comp.final_answer, embedder) {
        Ok(s) => s,
        Err(ScoringError::Backend(e)) => return Err(e),
        Err(_) => 0.0,
    };
    let judge = judge.judge(&JudgeRequest {
        workflow_desc: w.describe(),
        y_full: full.final_answer.clone(),
        y_comp: comp.final_answer.clone(),
        gold: w.gold_answer.clone(),
    })?;
    let recs = &comp.compression_records;
    let mut ratios: Vec<f64> = recs.iter().map(|r| r.ratio).collect();
    let mut non_empty: Vec<bool> = recs.iter().map(|r| !r.compressed_text.trim().is_empty()).collect();
    if recs.is_empty() {
        // nothing was compressed, which is degenerate by definition
        ratios.push(1.0);
        non_empty.push(true);
    }
    let truncated = full.truncated || comp.truncated;
    Ok(decide(LabelInputs { s, ratios, non_empty, judge, truncated }, th))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(xs: &[f64]) -> EmbeddingVector<f64> {
        EmbeddingVector::new(xs.to_vec())
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine(&v(&[1.0, 0.0]), &v(&[1.0, 1.0])).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
        assert_eq!(cosine(&v(&[0.0, 0.0]), &v(&[1.0, 1.0])), Err(ScoringError::ZeroVector));
        assert!(matches!(cosine(&v(&[1.0]), &v(&[1.0, 1.0])), Err(ScoringError::DimensionMismatch(1, 2))));
        let a = EmbeddingVector::<f32>::new(vec![3.0, 4.0]);
        assert_abs_diff_eq!(cosine(&a, &a).unwrap(), 1.0f32, epsilon = 1e-6);
    }

    fn verdict(label: JudgeLabel) -> JudgeVerdict {
        JudgeVerdict { label, rationale: String::new() }
    }

    fn inputs(s: f64, r: f64, label: JudgeLabel) -> LabelInputs {
        LabelInputs { s, ratios: vec![0.5, r], non_empty: vec![true, true], judge: verdict(label), truncated: false }
    }

    #[test]
    fn rule_examples() {
        let th = Thresholds::default();
        assert!(decide(inputs(0.90, 0.5, JudgeLabel::Equal), &th).success);
        let l = decide(inputs(0.80, 0.5, JudgeLabel::Equal), &th);
        assert_eq!(l.failure_reasons, BTreeSet::from([FailureReason::LowEquivalence]));
        let l = decide(inputs(0.95, 1.0, JudgeLabel::Equal), &th);
        assert_eq!(l.failure_reasons, BTreeSet::from([FailureReason::DegenerateRatio]));
        let l = decide(inputs(1.0, 0.5, JudgeLabel::Worse), &th);
        assert_eq!(l.failure_reasons, BTreeSet::from([FailureReason::JudgeWorse]));
    }

    #[test]
    fn switches_disable_filters() {
        let th = Thresholds { use_equivalence: false, use_judge: false, ..Thresholds::default() };
        assert!(decide(inputs(0.1, 0.5, JudgeLabel::Worse), &th).success);
        assert!(!decide(inputs(0.1, 1.0, JudgeLabel::Worse), &th).success);
    }

    #[test]
    fn nan_similarity_fails() {
        assert!(!decide(inputs(f64::NAN, 0.5, JudgeLabel::Equal), &Thresholds::default()).success);
    }
}
