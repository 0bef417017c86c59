//! Compression-side mocks: a prompt-sensitive teacher and a heuristic summarizer.
//!
//! Compression requests use a fixed layout in the last user message:
//!
//! ```text
//! === NEXT_TASKS ===
//! <rendered plan slice>
//! === CONTEXT ===
//! <rendered context>
//! ```
//!
//! The response is the compressed context, rendered the same way as the input.

use std::collections::HashSet;

use super::{BackendError, CompletionBackend, CompletionRequest, CompletionResponse, DIRECTIVES};
use crate::model::{parse_fact_line, ContextState, Entry, Instruction, CALL_PREFIX};

pub const NEXT_TASKS_HEADER: &str = "=== NEXT_TASKS ===";
pub const CONTEXT_HEADER: &str = "=== CONTEXT ===";

pub fn compression_input(slice: &str, context: &str) -> String {
    format!("{NEXT_TASKS_HEADER}\n{slice}\n{CONTEXT_HEADER}\n{context}")
}

/// Inverse of [`compression_input`]: `(slice, context)`.
pub fn split_compression_input(text: &str) -> Option<(&str, &str)> {
    let rest = text.strip_prefix(NEXT_TASKS_HEADER)?.strip_prefix('\n')?;
    let marker = format!("\n{CONTEXT_HEADER}\n");
    if let Some(i) = rest.find(&marker) {
        return Some((&rest[..i], &rest[i + marker.len()..]));
    }
    // empty slice or empty context
    if let Some(ctx) = rest.strip_prefix(&format!("{CONTEXT_HEADER}\n")) {
        return Some(("", ctx));
    }
    rest.strip_suffix(&format!("\n{CONTEXT_HEADER}")).map(|s| (s, ""))
}

/// Parses rendered slice lines `id. [kind] instruction (after ..)`.
pub fn slice_tasks(slice: &str) -> Vec<(usize, Instruction)> {
    slice
        .lines()
        .filter_map(|line| {
            let (id, rest) = line.trim().split_once(". ")?;
            let id: usize = id.parse().ok()?;
            let rest = rest.trim_start();
            let rest = match rest.strip_prefix('[') {
                Some(r) => r.split_once("] ")?.1,
                None => rest,
            };
            let rest = match rest.rfind(" (after ") {
                Some(i) if rest.ends_with(')') => &rest[..i],
                _ => rest,
            };
            Some((id, rest.parse().ok()?))
        })
        .collect()
}

/// What a mock teacher keeps, derived from the directives present in its prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TeacherPolicy {
    /// Keep exactly the fact values the slice references; otherwise only the
    /// latest step.
    pub keep_referenced: bool,
    pub drop_input_prose: bool,
    pub strip_reasoning: bool,
    pub drop_system: bool,
    pub remaining_plan_only: bool,
    pub plan_as_slice: bool,
}

impl TeacherPolicy {
    pub fn from_prompt(prompt: &str) -> Self {
        let has = |i: usize| prompt.contains(DIRECTIVES[i]);
        TeacherPolicy {
            keep_referenced: has(3),
            drop_input_prose: has(0),
            strip_reasoning: has(1) || has(9),
            drop_system: has(4),
            remaining_plan_only: has(6),
            plan_as_slice: has(7),
        }
    }

    /// Behaviour of a student distilled from good teacher compressions.
    pub fn distilled() -> Self {
        TeacherPolicy {
            keep_referenced: true,
            drop_input_prose: true,
            strip_reasoning: true,
            drop_system: false,
            remaining_plan_only: false,
            plan_as_slice: true,
        }
    }

    pub fn apply(&self, c: &ContextState, slice: &str) -> ContextState {
        let tasks = slice_tasks(slice);
        let current = tasks.first().map(|t| t.0).unwrap_or(c.step);
        let wanted: HashSet<String> = tasks.iter().flat_map(|(_, ins)| ins.references()).map(|r| r.key()).collect();
        let latest = c.last_tagged_step();

        let keep_line = |line: &&str| match parse_fact_line(line) {
            Some((key, _)) => !self.keep_referenced || wanted.contains(key),
            None => !self.drop_input_prose && !line.trim().is_empty(),
        };
        let keep_entry = |e: &Entry| match e.step {
            Some(s) if self.keep_referenced => wanted.contains(&format!("${s}")),
            Some(s) => Some(s) == latest,
            None => !self.keep_referenced,
        };
        let reduce = |es: &[Entry]| -> Vec<Entry> {
            es.iter()
                .filter(|e| keep_entry(e))
                .filter_map(|e| {
                    if !(self.strip_reasoning || self.keep_referenced) {
                        return Some(e.clone());
                    }
                    let v = e.value()?;
                    (!v.starts_with(CALL_PREFIX)).then(|| Entry { step: e.step, text: v.to_string() })
                })
                .collect()
        };

        let plan_text = if self.plan_as_slice {
            slice.to_string()
        } else if self.remaining_plan_only {
            c.plan_text
                .lines()
                .filter(|l| {
                    l.split_once(". ")
                        .and_then(|(id, _)| id.trim().parse::<usize>().ok())
                        .is_none_or(|id| id >= current)
                })
                .collect::<Vec<_>>()
                .join("\n")
        } else {
            c.plan_text.clone()
        };

        ContextState {
            initial_input: c.initial_input.lines().filter(keep_line).collect::<Vec<_>>().join("\n"),
            system_prompt: if self.drop_system { String::new() } else { c.system_prompt.clone() },
            plan_text,
            history: reduce(&c.history),
            observations: reduce(&c.observations),
            retrieved: if self.keep_referenced { Vec::new() } else { c.retrieved.clone() },
            memory: c.memory.iter().filter(|l| keep_line(&l.as_str())).cloned().collect(),
            step: c.step,
        }
    }
}

/// Rule-driven stand-in for a prompted compression model.
///
/// The policy is read from the system message (the compression prompt) unless
/// fixed at construction, as for the student.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockTeacher {
    fixed: Option<TeacherPolicy>,
}

impl MockTeacher {
    pub fn new() -> Self {
        MockTeacher { fixed: None }
    }

    pub fn student() -> Self {
        MockTeacher { fixed: Some(TeacherPolicy::distilled()) }
    }

    pub fn with_policy(policy: TeacherPolicy) -> Self {
        MockTeacher { fixed: Some(policy) }
    }
}

impl CompletionBackend for MockTeacher {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        req.check()?;
        let policy = self.fixed.unwrap_or_else(|| TeacherPolicy::from_prompt(req.system_text().unwrap_or("")));
        let input = req.last_user_text().unwrap_or("");
        let (slice, context) = split_compression_input(input).ok_or_else(|| {
            BackendError::InvalidRequest("compression input lacks NEXT_TASKS/CONTEXT sections".into())
        })?;
        let step = slice_tasks(slice).first().map(|t| t.0).unwrap_or(1);
        let out = policy.apply(&ContextState::parse(context, step), slice).render();
        Ok(CompletionResponse::counted(req, out))
    }
}

/// Heuristic summarizer: the value lines of the most recent steps.
#[derive(Debug, Clone, Copy)]
pub struct MockSummarizer {
    pub recent_steps: usize,
}

impl Default for MockSummarizer {
    fn default() -> Self {
        MockSummarizer { recent_steps: 3 }
    }
}

impl CompletionBackend for MockSummarizer {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        req.check()?;
        let c = ContextState::parse(req.last_user_text().unwrap_or(""), 1);
        let last = c.last_tagged_step().unwrap_or(0);
        let first = (last + 1).saturating_sub(self.recent_steps).max(1);
        let mut lines: Vec<String> = Vec::new();
        for s in first..=last {
            for e in c.history.iter().chain(&c.observations).filter(|e| e.step == Some(s)) {
                if let Some(v) = e.value().filter(|v| !v.starts_with(CALL_PREFIX)) {
                    lines.push(format!("${s} = {v}"));
                }
            }
        }
        let text = if lines.is_empty() { "Nothing to report yet.".to_string() } else { lines.join("\n") };
        Ok(CompletionResponse::counted(req, text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Message, PLANTED_DIRECTIVE};

    fn ctx() -> ContextState {
        let mut c = ContextState::initial(
            "acct_1 = 5\n[log 0001] api noise\nnoise_x1 = 9",
            "sys",
            "1. [lookup] lookup acct_1\n2. [file_op] read_file /f\n3. [arithmetic] add $1 $2 (after 1, 2)",
        );
        c.history.push(Entry::tagged(1, "Thought: hm\n5"));
        c.history.push(Entry::tagged(2, "Thought: call\nCALL read_file path=/f"));
        c.observations.push(Entry::tagged(2, "7"));
        c.step = 3;
        c
    }

    #[test]
    fn input_layout_roundtrip() {
        let s = compression_input("1. [lookup] lookup a", "## INPUT\na = 2");
        assert_eq!(split_compression_input(&s), Some(("1. [lookup] lookup a", "## INPUT\na = 2")));
        assert_eq!(split_compression_input(&compression_input("", "x")), Some(("", "x")));
        assert_eq!(split_compression_input("garbage"), None);
    }

    #[test]
    fn slice_parsing() {
        let t = slice_tasks("3. [arithmetic] add $1 $2 (after 1, 2)\n4. [search] search topic_a4");
        assert_eq!(t, vec![(3, Instruction::Add(1, 2)), (4, "search topic_a4".parse().unwrap())]);
    }

    #[test]
    fn referenced_policy_keeps_needed_values() {
        let p = TeacherPolicy {
            keep_referenced: true,
            strip_reasoning: true,
            drop_input_prose: true,
            ..Default::default()
        };
        let out = p.apply(&ctx(), "3. [arithmetic] add $1 $2 (after 1, 2)");
        assert_eq!(out.initial_input, "");
        assert_eq!(out.history, vec![Entry::tagged(1, "5")]);
        assert_eq!(out.observations, vec![Entry::tagged(2, "7")]);
        let facts = out.facts();
        assert_eq!(facts["$1"], "5");
        assert_eq!(facts["$2"], "7");
    }

    #[test]
    fn without_planted_directive_older_values_are_lost() {
        let out = TeacherPolicy::default().apply(&ctx(), "3. [arithmetic] add $1 $2 (after 1, 2)");
        assert!(!out.facts().contains_key("$1"));
        assert!(out.facts().contains_key("$2"));
    }

    #[test]
    fn policy_follows_prompt() {
        let p = TeacherPolicy::from_prompt(&format!("Compress. {PLANTED_DIRECTIVE} {}", DIRECTIVES[7]));
        assert!(p.keep_referenced && p.plan_as_slice && !p.drop_system);
        let teacher = MockTeacher::new();
        let req = CompletionRequest::new(vec![
            Message::system(format!("Compress. {PLANTED_DIRECTIVE} {}", DIRECTIVES[7])),
            Message::user(compression_input("3. [arithmetic] add $1 $2 (after 1, 2)", &ctx().render())),
        ]);
        let out = teacher.complete(&req).unwrap().text;
        let c = ContextState::parse(&out, 3);
        assert_eq!(c.plan_text, "3. [arithmetic] add $1 $2 (after 1, 2)");
        assert_eq!(c.facts()["$1"], "5");
        assert!(out.len() < ctx().render().len());
    }

    #[test]
    fn remaining_plan_only() {
        let p = TeacherPolicy { remaining_plan_only: true, ..Default::default() };
        let out = p.apply(&ctx(), "3. [arithmetic] add $1 $2 (after 1, 2)");
        assert_eq!(out.plan_text, "3. [arithmetic] add $1 $2 (after 1, 2)");
    }

    #[test]
    fn summarizer_keeps_recent_values() {
        let req = CompletionRequest::new(vec![Message::system("summarize"), Message::user(ctx().render())]);
        let text = MockSummarizer::default().complete(&req).unwrap().text;
        assert_eq!(text, "$1 = 5\n$2 = 7");
    }
}
