use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrajectoryMode {
    Full,
    Compressed,
    Baseline(String),
}

impl fmt::Display for TrajectoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrajectoryMode::Full => f.write_str("full"),
            TrajectoryMode::Compressed => f.write_str("compressed"),
            TrajectoryMode::Baseline(name) => write!(f, "baseline:{name}"),
        }
    }
}

impl FromStr for TrajectoryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(TrajectoryMode::Full),
            "compressed" => Ok(TrajectoryMode::Compressed),
            _ => s
                .strip_prefix("baseline:")
                .filter(|n| !n.is_empty())
                .map(|n| TrajectoryMode::Baseline(n.to_string()))
                .ok_or_else(|| format!("unknown trajectory mode `{s}`")),
        }
    }
}

impl Serialize for TrajectoryMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TrajectoryMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// |C_t| of the context the agent acted on.
    pub context_tokens: usize,
    pub context_digest: String,
    pub agent_output: String,
    pub tool_results: Vec<String>,
}

/// Per-step compression statistics, with the texts needed for supervision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionRecord {
    pub step: usize,
    pub k: usize,
    pub plan_slice: String,
    pub original_tokens: usize,
    pub compressed_tokens: usize,
    pub ratio: f64,
    pub prompt_id: String,
    pub original_text: String,
    pub compressed_text: String,
    pub valid: bool,
}

impl CompressionRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        step: usize,
        k: usize,
        plan_slice: String,
        prompt_id: String,
        original_tokens: usize,
        compressed_tokens: usize,
        original_text: String,
        compressed_text: String,
    ) -> Self {
        let ratio = compression_ratio(compressed_tokens, original_tokens);
        let valid = is_valid_compression(ratio, &compressed_text);
        CompressionRecord {
            step,
            k,
            plan_slice,
            original_tokens,
            compressed_tokens,
            ratio,
            prompt_id,
            original_text,
            compressed_text,
            valid,
        }
    }

    /// Recomputes validity from the stored fields.
    pub fn check_valid(&self) -> bool {
        is_valid_compression(self.ratio, &self.compressed_text)
            && self.ratio == compression_ratio(self.compressed_tokens, self.original_tokens)
    }
}

/// r = compressed / original; NaN when the original is empty.
pub fn compression_ratio(compressed: usize, original: usize) -> f64 {
    if original == 0 {
        f64::NAN
    } else {
        compressed as f64 / original as f64
    }
}

/// Non-degenerate compression: 0 < r < 1 and non-empty output.
pub fn is_valid_compression(ratio: f64, compressed_text: &str) -> bool {
    ratio > 0.0 && ratio < 1.0 && !compressed_text.trim().is_empty()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub workflow_id: String,
    pub mode: TrajectoryMode,
    pub per_step: Vec<StepRecord>,
    pub final_answer: String,
    pub compression_records: Vec<CompressionRecord>,
    /// Step or token budget exceeded before the plan completed.
    #[serde(default)]
    pub truncated: bool,
    /// At least one step fell back to the uncompressed context.
    #[serde(default)]
    pub fallback: bool,
}

impl Trajectory {
    pub fn context_tokens(&self) -> Vec<usize> {
        self.per_step.iter().map(|s| s.context_tokens).collect()
    }

    /// Number of steps whose agent output reported a missing fact.
    pub fn missing_fact_steps(&self) -> usize {
        self.per_step
            .iter()
            .filter(|s| {
                s.agent_output
                    .lines()
                    .rev()
                    .find(|l| !l.trim().is_empty())
                    .is_some_and(|l| l.trim().starts_with(crate::backends::MISSING_FACT))
            })
            .count()
    }

    /// Usable as supervision: complete and never fell back mid-run.
    pub fn is_clean(&self) -> bool {
        !self.truncated && !self.fallback
    }
}
