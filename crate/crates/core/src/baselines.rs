//! Reference context strategies. All of them leave the system prompt and plan
//! text untouched and only reduce state sections.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, CompletionBackend, CompletionRequest, Embedder, Message};
use crate::model::{ContextState, Entry};
use crate::scoring::cosine;

pub const DEFAULT_PROMPTING_INSTRUCTION: &str =
    "Summarize the agent's progress so far. Keep every computed value and drop everything else.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub fifo_turns: usize,
    pub retrieval_top_m: usize,
    pub prompting_instruction: String,
    pub extractive_keep_fraction: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            fifo_turns: 2,
            retrieval_top_m: 4,
            prompting_instruction: DEFAULT_PROMPTING_INSTRUCTION.to_string(),
            extractive_keep_fraction: 0.5,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.fifo_turns < 1 || self.retrieval_top_m < 1 {
            return Err("fifo_turns and retrieval_top_m must be at least 1".into());
        }
        if !(self.extractive_keep_fraction > 0.0 && self.extractive_keep_fraction < 1.0) {
            return Err(format!("extractive_keep_fraction must lie in (0, 1), got {}", self.extractive_keep_fraction));
        }
        Ok(())
    }
}

/// Keeps the last `turns` steps of history and observations. I0, memory and
/// untagged entries are kept.
pub fn fifo_compress(c: &ContextState, turns: usize) -> ContextState {
    let steps: BTreeSet<usize> = c.history.iter().chain(&c.observations).filter_map(|e| e.step).collect();
    let window: HashSet<usize> = steps.iter().rev().take(turns.max(1)).copied().collect();
    let keep = |es: &[Entry]| -> Vec<Entry> {
        es.iter().filter(|e| e.step.is_none_or(|s| window.contains(&s))).cloned().collect()
    };
    ContextState { history: keep(&c.history), observations: keep(&c.observations), ..c.clone() }
}

/// (step, section, index): later entries win ties.
type Recency = (usize, usize, usize);

/// Keeps the `top_m` history/observation entries closest to `query`.
///
/// Ties go to the more recent entry; entries embedding to the zero vector rank
/// last. Kept entries stay in their original order.
pub fn retrieval_compress(
    c: &ContextState,
    query: &str,
    embedder: &dyn Embedder,
    top_m: usize,
) -> Result<ContextState, BackendError> {
    let q = embedder.embed(query)?;
    // (section, index, recency) in chronological order
    let mut pool: Vec<(usize, usize, Recency)> = Vec::new();
    for (sec, es) in [&c.history, &c.observations].into_iter().enumerate() {
        for (i, e) in es.iter().enumerate() {
            pool.push((sec, i, (e.step.unwrap_or(0), sec, i)));
        }
    }
    let mut scored: Vec<(f64, Recency, usize, usize)> = Vec::with_capacity(pool.len());
    for (sec, i, recency) in pool {
        let e = if sec == 0 { &c.history[i] } else { &c.observations[i] };
        let score = cosine(&embedder.embed(&e.text)?, &q).unwrap_or(f64::NEG_INFINITY);
        scored.push((score, recency, sec, i));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    let kept: HashSet<(usize, usize)> = scored.iter().take(top_m).map(|x| (x.2, x.3)).collect();
    let pick = |sec: usize, es: &[Entry]| -> Vec<Entry> {
        es.iter().enumerate().filter(|(i, _)| kept.contains(&(sec, *i))).map(|(_, e)| e.clone()).collect()
    };
    Ok(ContextState { history: pick(0, &c.history), observations: pick(1, &c.observations), ..c.clone() })
}

/// One completion call whose answer replaces history and observations.
pub fn prompting_compress(
    c: &ContextState,
    backend: &dyn CompletionBackend,
    instruction: &str,
) -> Result<ContextState, BackendError> {
    let req = CompletionRequest::new(vec![Message::system(instruction), Message::user(c.render())]);
    let summary = backend.complete(&req)?.text.trim().to_string();
    let history = if summary.is_empty() { Vec::new() } else { vec![Entry::untagged(summary)] };
    Ok(ContextState { history, observations: Vec::new(), ..c.clone() })
}

fn tokens(text: &str) -> HashSet<&str> {
    text.split_whitespace().collect()
}

/// Token-set overlap between a line and the slice.
pub fn overlap_score(line: &str, slice_tokens: &HashSet<&str>) -> usize {
    tokens(line).iter().filter(|t| slice_tokens.contains(*t)).count()
}

/// Deletion-only compression of state lines.
///
/// Candidate units are the lines of I0 and memory and the rendered lines of each
/// history/observation/retrieved entry. Each is scored by token overlap with the
/// slice; the top `ceil(keep_fraction · units)` survive (ties favour later
/// lines). An entry whose value line is dropped is dropped whole, so no line
/// changes meaning on re-rendering.
pub fn extractive_compress(c: &ContextState, slice: &str, keep_fraction: f64) -> ContextState {
    let slice_tokens = tokens(slice);
    // (group, entry-or-line index, line index, rendered text)
    let mut units: Vec<(usize, usize, usize, String)> = Vec::new();
    for (i, line) in c.initial_input.lines().enumerate() {
        units.push((0, i, 0, line.to_string()));
    }
    for (i, line) in c.memory.iter().enumerate() {
        units.push((1, i, 0, line.clone()));
    }
    for (g, es) in [(2, &c.history), (3, &c.observations), (4, &c.retrieved)] {
        for (i, e) in es.iter().enumerate() {
            for (j, line) in e.render_lines().into_iter().enumerate() {
                units.push((g, i, j, line));
            }
        }
    }
    let n_keep = ((keep_fraction.clamp(0.0, 1.0) * units.len() as f64).ceil() as usize).min(units.len());
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.sort_by(|&a, &b| {
        overlap_score(&units[b].3, &slice_tokens).cmp(&overlap_score(&units[a].3, &slice_tokens)).then(b.cmp(&a))
    });
    let kept: HashSet<(usize, usize, usize)> =
        order[..n_keep].iter().map(|&u| (units[u].0, units[u].1, units[u].2)).collect();

    let lines = |g: usize, src: Vec<&str>| -> Vec<String> {
        src.into_iter().enumerate().filter(|(i, _)| kept.contains(&(g, *i, 0))).map(|(_, l)| l.to_string()).collect()
    };
    let entries = |g: usize, es: &[Entry]| -> Vec<Entry> {
        es.iter()
            .enumerate()
            .filter_map(|(i, e)| {
                let parts: Vec<&str> = e.text.split('\n').collect();
                let last = parts.len() - 1;
                if !kept.contains(&(g, i, last)) {
                    return None;
                }
                let text: Vec<&str> =
                    parts.iter().enumerate().filter(|(j, _)| kept.contains(&(g, i, *j))).map(|(_, l)| *l).collect();
                Some(Entry { step: e.step, text: text.join("\n") })
            })
            .collect()
    };
    ContextState {
        initial_input: lines(0, c.initial_input.lines().collect()).join("\n"),
        memory: lines(1, c.memory.iter().map(String::as_str).collect()),
        history: entries(2, &c.history),
        observations: entries(3, &c.observations),
        retrieved: entries(4, &c.retrieved),
        ..c.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{CompletionResponse, HashEmbedder};

    fn five_turns() -> ContextState {
        let mut c = ContextState::initial("acct = 1", "sys", "1. [lookup] lookup acct");
        for s in 1..=5 {
            c.history.push(Entry::tagged(s, format!("CALL read_file path=/f{s}")));
            c.observations.push(Entry::tagged(s, format!("{}", s * 10)));
        }
        c.step = 6;
        c
    }

    #[test]
    fn fifo_keeps_last_turns() {
        let c = five_turns();
        let out = fifo_compress(&c, 2);
        let steps: Vec<usize> = out.history.iter().filter_map(|e| e.step).collect();
        assert_eq!(steps, vec![4, 5]);
        assert_eq!(out.observations.iter().filter_map(|e| e.step).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(out.initial_input, c.initial_input);
        assert_eq!(fifo_compress(&c, 5), c);
        assert_eq!(fifo_compress(&c, 9), c);
        assert!(out.tokens() <= c.tokens());
    }

    #[test]
    fn retrieval_keeps_exact_match() {
        let c = five_turns();
        let out = retrieval_compress(&c, "30", &HashEmbedder::default(), 1).unwrap();
        assert_eq!(out.observations, vec![Entry::tagged(3, "30")]);
        assert!(out.history.is_empty());
        assert_eq!(retrieval_compress(&c, "x", &HashEmbedder::default(), 10).unwrap(), c);
        assert_eq!(out.plan_text, c.plan_text);
    }

    struct Stub;

    impl CompletionBackend for Stub {
        fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
            Ok(CompletionResponse::counted(req, "SUMMARY".into()))
        }
    }

    #[test]
    fn prompting_replaces_history() {
        let c = five_turns();
        let out = prompting_compress(&c, &Stub, DEFAULT_PROMPTING_INSTRUCTION).unwrap();
        assert_eq!(out.history, vec![Entry::untagged("SUMMARY")]);
        assert!(out.observations.is_empty());
        assert_eq!(out.plan_text, c.plan_text);
        assert_eq!(out.system_prompt, c.system_prompt);
        assert!(out.tokens() < c.tokens());
    }

    #[test]
    fn extractive_prefers_overlapping_lines() {
        let c = ContextState::initial("acct_7 = 5\nnoise line here\nother words only", "sys", "p");
        let out = extractive_compress(&c, "1. [lookup] lookup acct_7", 0.3);
        assert_eq!(out.initial_input, "acct_7 = 5");
        let all = extractive_compress(&c, "x", 0.999);
        assert_eq!(all.initial_input, c.initial_input);
    }

    #[test]
    fn extractive_never_leaves_headless_entries() {
        let mut c = ContextState::initial("", "sys", "p");
        c.history.push(Entry::tagged(1, "Thought: add $1 $2 please\n9"));
        let out = extractive_compress(&c, "add $1 $2", 0.5);
        // the reasoning line wins on overlap but the value line did not survive
        assert!(out.history.is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(BaselineConfig::default().validate().is_ok());
        let bad = BaselineConfig { extractive_keep_fraction: 1.0, ..BaselineConfig::default() };
        assert!(bad.validate().is_err());
    }
}
