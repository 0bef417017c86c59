use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{fnv1a64, BackendError, CompletionBackend, CompletionRequest, Judge, Message};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeLabel {
    Better,
    Equal,
    /// The compressed answer is strictly worse than the full-context one.
    Worse,
}

impl fmt::Display for JudgeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JudgeLabel::Better => "better",
            JudgeLabel::Equal => "equal",
            JudgeLabel::Worse => "worse",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub label: JudgeLabel,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgeRequest {
    pub workflow_desc: String,
    pub y_full: String,
    pub y_comp: String,
    /// Ground truth, consulted only by the rule-based mock.
    pub gold: Option<String>,
}

/// Gold-aware rule judge.
///
/// Identical answers are `equal`; a compressed answer that alone matches gold is
/// `better`; one that alone misses gold is `worse`; anything else is `equal`.
/// With `leniency > 0` a seeded hash of the request downgrades that fraction of
/// `worse` verdicts to `equal`, modelling an imperfect evaluator.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RuleJudge {
    pub leniency: f64,
    pub seed: u64,
}

impl RuleJudge {
    pub fn strict() -> Self {
        RuleJudge::default()
    }

    pub fn lenient(leniency: f64, seed: u64) -> Self {
        RuleJudge { leniency, seed }
    }

    fn overlooks(&self, req: &JudgeRequest) -> bool {
        if self.leniency <= 0.0 {
            return false;
        }
        let key = format!("{}\u{1f}{}\u{1f}{}\u{1f}{}", self.seed, req.workflow_desc, req.y_full, req.y_comp);
        let u = (fnv1a64(key.as_bytes()) >> 11) as f64 / (1u64 << 53) as f64;
        u < self.leniency
    }
}

impl Judge for RuleJudge {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeVerdict, BackendError> {
        let verdict = |label, rationale: &str| JudgeVerdict { label, rationale: rationale.to_string() };
        let (full, comp) = (req.y_full.trim(), req.y_comp.trim());
        if full == comp {
            return Ok(verdict(JudgeLabel::Equal, "answers are identical"));
        }
        let Some(gold) = req.gold.as_deref().map(str::trim) else {
            return Ok(verdict(JudgeLabel::Equal, "no reference available to separate the answers"));
        };
        Ok(match (full == gold, comp == gold) {
            (false, true) => verdict(JudgeLabel::Better, "only the compressed answer is correct"),
            (true, false) if self.overlooks(req) => verdict(JudgeLabel::Equal, "the answers look interchangeable"),
            (true, false) => verdict(JudgeLabel::Worse, "the compressed answer lost information the full answer had"),
            _ => verdict(JudgeLabel::Equal, "neither answer is preferable"),
        })
    }
}

/// LLM-backed judge. Unparseable verdicts count as `worse`.
pub struct LlmJudge {
    backend: Arc<dyn CompletionBackend>,
}

impl LlmJudge {
    pub fn new(backend: Arc<dyn CompletionBackend>) -> Self {
        LlmJudge { backend }
    }

    pub fn request(req: &JudgeRequest) -> CompletionRequest {
        let system = "You compare two answers to the same task. The first was produced with the full context, \
the second with a compressed context. Reply with one word, better, equal or worse, describing the \
second answer relative to the first, followed by a one-sentence rationale.";
        let user = format!(
            "WORKFLOW:\n{}\n\nFULL-CONTEXT ANSWER:\n{}\n\nCOMPRESSED-CONTEXT ANSWER:\n{}",
            req.workflow_desc, req.y_full, req.y_comp
        );
        let mut r = CompletionRequest::new(vec![Message::system(system), Message::user(user)]);
        r.max_tokens = 128;
        r
    }

    pub fn parse_verdict(text: &str) -> Option<JudgeVerdict> {
        let trimmed = text.trim();
        let first = trimmed.split_whitespace().next()?;
        let word = first.trim_matches(|c: char| !c.is_alphanumeric()).to_ascii_lowercase();
        let label = match word.as_str() {
            "better" => JudgeLabel::Better,
            "equal" => JudgeLabel::Equal,
            "worse" => JudgeLabel::Worse,
            _ => return None,
        };
        let rationale = trimmed[first.len()..].trim_start_matches([':', '.', ',', '-', ' ']).trim().to_string();
        Some(JudgeVerdict { label, rationale })
    }
}

impl Judge for LlmJudge {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeVerdict, BackendError> {
        let resp = self.backend.complete(&Self::request(req))?;
        Ok(Self::parse_verdict(&resp.text).unwrap_or_else(|| {
            tracing::warn!(response = %resp.text, "unparseable judge verdict, counting it as worse");
            JudgeVerdict { label: JudgeLabel::Worse, rationale: format!("unparseable verdict: {}", resp.text.trim()) }
        }))
    }
}
