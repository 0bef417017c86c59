//! The agent's per-step context state and its text rendering.
//!
//! Rendered layout, fixed order, empty sections omitted:
//!
//! ```text
//! ## SYSTEM
//! ## PLAN
//! ## INPUT
//! ## MEMORY
//! ## HISTORY
//! ## OBSERVATIONS
//! ## RETRIEVED
//! ```
//!
//! Entries in the last three sections are rendered one line per text line.
//! Lines of an entry tagged with step `s` are prefixed `$s > `, except the final
//! line which is written `$s = ` (a fact line) unless it is a tool call. Untagged
//! entries are written verbatim.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tokens::{token_count, TokenCounter};

pub const SECTION_SYSTEM: &str = "## SYSTEM";
pub const SECTION_PLAN: &str = "## PLAN";
pub const SECTION_INPUT: &str = "## INPUT";
pub const SECTION_MEMORY: &str = "## MEMORY";
pub const SECTION_HISTORY: &str = "## HISTORY";
pub const SECTION_OBSERVATIONS: &str = "## OBSERVATIONS";
pub const SECTION_RETRIEVED: &str = "## RETRIEVED";

/// Prefix of an agent output line that requests a tool.
pub const CALL_PREFIX: &str = "CALL ";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Preamble,
    System,
    Plan,
    Input,
    Memory,
    History,
    Observations,
    Retrieved,
}

impl Section {
    fn from_header(line: &str) -> Option<Section> {
        Some(match line {
            SECTION_SYSTEM => Section::System,
            SECTION_PLAN => Section::Plan,
            SECTION_INPUT => Section::Input,
            SECTION_MEMORY => Section::Memory,
            SECTION_HISTORY => Section::History,
            SECTION_OBSERVATIONS => Section::Observations,
            SECTION_RETRIEVED => Section::Retrieved,
            _ => return None,
        })
    }

    fn is_state(self) -> bool {
        !matches!(self, Section::System | Section::Plan)
    }
}

/// One history, observation or retrieval entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub step: Option<usize>,
    pub text: String,
}

impl Entry {
    pub fn tagged(step: usize, text: impl Into<String>) -> Self {
        Entry { step: Some(step), text: text.into() }
    }

    pub fn untagged(text: impl Into<String>) -> Self {
        Entry { step: None, text: text.into() }
    }

    /// The entry's value: its last non-empty line.
    pub fn value(&self) -> Option<&str> {
        self.text.lines().rev().map(str::trim).find(|l| !l.is_empty())
    }

    pub fn render_lines(&self) -> Vec<String> {
        let Some(step) = self.step else {
            return self.text.split('\n').map(str::to_string).collect();
        };
        let lines: Vec<&str> = self.text.split('\n').collect();
        let last = lines.len() - 1;
        lines
            .iter()
            .enumerate()
            .map(|(i, line)| {
                if i == last && !line.starts_with(CALL_PREFIX) && !line.is_empty() {
                    format!("${step} = {line}")
                } else {
                    format!("${step} > {line}")
                }
            })
            .collect()
    }

    pub fn render(&self) -> String {
        self.render_lines().join("\n")
    }
}

/// Agent context C_t = {I0, P, Π, H, O, R, M} at step t.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextState {
    pub initial_input: String,
    pub system_prompt: String,
    pub plan_text: String,
    pub history: Vec<Entry>,
    pub observations: Vec<Entry>,
    pub retrieved: Vec<Entry>,
    pub memory: Vec<String>,
    pub step: usize,
}

impl ContextState {
    /// C_1 = {I0, P, Π}.
    pub fn initial(initial_input: &str, system_prompt: &str, plan_text: &str) -> Self {
        ContextState {
            initial_input: initial_input.to_string(),
            system_prompt: system_prompt.to_string(),
            plan_text: plan_text.to_string(),
            history: Vec::new(),
            observations: Vec::new(),
            retrieved: Vec::new(),
            memory: Vec::new(),
            step: 1,
        }
    }

    pub fn render(&self) -> String {
        render_context(self)
    }

    pub fn tokens(&self) -> usize {
        token_count(&self.render())
    }

    pub fn tokens_with(&self, counter: &dyn TokenCounter) -> usize {
        counter.count(&self.render())
    }

    /// Hex SHA-256 of the rendering.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    /// Every `key = value` line in the state sections, last occurrence winning.
    pub fn facts(&self) -> HashMap<String, String> {
        facts_in_rendered(&self.render())
    }

    /// Inverse of [`render_context`] up to section delimiters. Text before the
    /// first header is kept as memory notes. Consecutive lines with the same step
    /// tag form one entry.
    pub fn parse(text: &str, step: usize) -> ContextState {
        let mut c = ContextState {
            initial_input: String::new(),
            system_prompt: String::new(),
            plan_text: String::new(),
            history: Vec::new(),
            observations: Vec::new(),
            retrieved: Vec::new(),
            memory: Vec::new(),
            step: step.max(1),
        };
        let mut section = Section::Preamble;
        let mut block: Vec<&str> = Vec::new();
        let flush = |c: &mut ContextState, section: Section, block: &mut Vec<&str>| {
            let lines = std::mem::take(block);
            match section {
                Section::Preamble | Section::Memory => {
                    c.memory.extend(lines.into_iter().filter(|l| !l.trim().is_empty()).map(str::to_string))
                }
                Section::System => c.system_prompt = lines.join("\n"),
                Section::Plan => c.plan_text = lines.join("\n"),
                Section::Input => c.initial_input = lines.join("\n"),
                Section::History => c.history = parse_entries(&lines),
                Section::Observations => c.observations = parse_entries(&lines),
                Section::Retrieved => c.retrieved = parse_entries(&lines),
            }
        };
        for line in text.lines() {
            if let Some(next) = Section::from_header(line.trim_end()) {
                flush(&mut c, section, &mut block);
                section = next;
            } else {
                block.push(line);
            }
        }
        flush(&mut c, section, &mut block);
        c
    }

    /// Highest step tag in history or observations.
    pub fn last_tagged_step(&self) -> Option<usize> {
        self.history.iter().chain(&self.observations).filter_map(|e| e.step).max()
    }
}

/// Renders sections in fixed order: system prompt, plan, initial input, memory,
/// history, observations, retrieved.
pub fn render_context(c: &ContextState) -> String {
    let mut out: Vec<String> = Vec::new();
    let mut push = |header: &str, body: String| {
        if !body.is_empty() {
            out.push(header.to_string());
            out.push(body);
        }
    };
    push(SECTION_SYSTEM, c.system_prompt.clone());
    push(SECTION_PLAN, c.plan_text.clone());
    push(SECTION_INPUT, c.initial_input.clone());
    push(SECTION_MEMORY, c.memory.join("\n"));
    let entries = |es: &[Entry]| es.iter().map(Entry::render).collect::<Vec<_>>().join("\n");
    push(SECTION_HISTORY, entries(&c.history));
    push(SECTION_OBSERVATIONS, entries(&c.observations));
    push(SECTION_RETRIEVED, entries(&c.retrieved));
    out.join("\n")
}

/// Splits `$s > rest` / `$s = rest` into the step and the rest.
pub fn split_tag(line: &str) -> Option<(usize, &str)> {
    let rest = line.strip_prefix('$')?;
    let digits = rest.find(|ch: char| !ch.is_ascii_digit())?;
    let step: usize = rest[..digits].parse().ok()?;
    let tail = &rest[digits..];
    for marker in [" > ", " = "] {
        if let Some(body) = tail.strip_prefix(marker) {
            return Some((step, body));
        }
    }
    for marker in [" >", " ="] {
        if tail == marker {
            return Some((step, ""));
        }
    }
    None
}

fn parse_entries(lines: &[&str]) -> Vec<Entry> {
    let mut entries: Vec<Entry> = Vec::new();
    for line in lines {
        let (step, body) = match split_tag(line) {
            Some((s, body)) => (Some(s), body),
            None => (None, *line),
        };
        match entries.last_mut() {
            Some(prev) if prev.step == step => {
                prev.text.push('\n');
                prev.text.push_str(body);
            }
            _ => entries.push(Entry { step, text: body.to_string() }),
        }
    }
    entries
}

/// Parses a `key = value` line (or a bare `key=value` token). The key is a
/// single token.
pub fn parse_fact_line(line: &str) -> Option<(&str, &str)> {
    let line = line.trim();
    let (key, value) = match line.split_once(' ') {
        Some((key, rest)) => (key, rest.strip_prefix("= ")?.trim()),
        None => line.split_once('=')?,
    };
    if key.is_empty() || value.is_empty() {
        return None;
    }
    Some((key, value))
}

/// Facts visible in a rendered context, skipping the system and plan sections.
pub fn facts_in_rendered(text: &str) -> HashMap<String, String> {
    let mut facts = HashMap::new();
    let mut section = Section::Preamble;
    for line in text.lines() {
        if let Some(next) = Section::from_header(line.trim_end()) {
            section = next;
            continue;
        }
        if !section.is_state() {
            continue;
        }
        if let Some((k, v)) = parse_fact_line(line) {
            facts.insert(k.to_string(), v.to_string());
        }
    }
    facts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ContextState {
        let mut c = ContextState::initial("acct = 7\n[log 1] noise", "sys", "1. [lookup] lookup acct");
        c.history.push(Entry::tagged(1, "Thought: read it\n7"));
        c.history.push(Entry::tagged(2, "CALL search term=alpha"));
        c.observations.push(Entry::tagged(2, "d3"));
        c.memory.push("note one".into());
        c.step = 3;
        c
    }

    #[test]
    fn only_system_prompt() {
        let c = ContextState::initial("", "sys", "");
        assert_eq!(c.render(), "## SYSTEM\nsys");
    }

    #[test]
    fn rendering_is_deterministic_and_ordered() {
        let c = sample();
        let r = c.render();
        assert_eq!(r, c.render());
        let pos = |h: &str| r.find(h).unwrap();
        assert!(pos(SECTION_SYSTEM) < pos(SECTION_PLAN));
        assert!(pos(SECTION_PLAN) < pos(SECTION_INPUT));
        assert!(pos(SECTION_INPUT) < pos(SECTION_MEMORY));
        assert!(pos(SECTION_MEMORY) < pos(SECTION_HISTORY));
        assert!(pos(SECTION_HISTORY) < pos(SECTION_OBSERVATIONS));
        assert!(r.contains("$1 > Thought: read it\n$1 = 7"));
        assert!(r.contains("$2 > CALL search term=alpha"));
        assert!(r.contains("$2 = d3"));
    }

    #[test]
    fn adding_observation_grows_tokens() {
        let mut c = sample();
        let before = c.tokens();
        c.observations.push(Entry::tagged(3, "42"));
        assert!(c.tokens() > before);
    }

    #[test]
    fn facts_skip_plan_and_system() {
        let mut c = sample();
        c.plan_text = "x = 1".into();
        let facts = c.facts();
        assert_eq!(facts.get("acct").map(String::as_str), Some("7"));
        assert_eq!(facts.get("$1").map(String::as_str), Some("7"));
        assert_eq!(facts.get("$2").map(String::as_str), Some("d3"));
        assert!(!facts.contains_key("x"));
    }

    #[test]
    fn parse_inverts_render() {
        let c = sample();
        assert_eq!(ContextState::parse(&c.render(), 3), c);
    }

    #[test]
    fn preamble_becomes_memory() {
        let c = ContextState::parse("free text\n## SYSTEM\nsys", 1);
        assert_eq!(c.memory, vec!["free text".to_string()]);
        assert_eq!(c.system_prompt, "sys");
    }

    fn line() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9 ]{0,12}"
    }

    fn entry() -> impl Strategy<Value = Entry> {
        (proptest::option::of(1usize..40), proptest::collection::vec(line(), 1..3))
            .prop_map(|(step, lines)| Entry { step, text: lines.join("\n") })
    }

    proptest! {
        #[test]
        fn render_parse_roundtrip(
            input in proptest::collection::vec(line(), 0..4),
            history in proptest::collection::vec(entry(), 0..5),
            observations in proptest::collection::vec(entry(), 0..5),
        ) {
            // consecutive entries with the same tag merge on parse
            let dedup = |es: Vec<Entry>| {
                let mut out: Vec<Entry> = Vec::new();
                for e in es {
                    if out.last().map(|p| p.step == e.step).unwrap_or(false) { continue; }
                    out.push(e);
                }
                out
            };
            let c = ContextState {
                initial_input: input.join("\n"),
                system_prompt: "sys".into(),
                plan_text: "plan".into(),
                history: dedup(history),
                observations: dedup(observations),
                retrieved: vec![],
                memory: vec![],
                step: 2,
            };
            prop_assert_eq!(ContextState::parse(&c.render(), 2), c);
        }
    }
}
