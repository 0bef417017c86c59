//! Deterministic rule-following agent.
//!
//! The request carries the rendered context (any message but the last) and a
//! task line as the last user message: `TASK <t>: <instruction>` or
//! `FINAL: <requirement>`. The agent reads facts (`key = value` lines) from the
//! state sections of the context only, so anything a compressor removed is
//! genuinely unavailable. A missing fact is reported as `MISSING_FACT:<key>`
//! instead of being guessed.

use std::collections::HashMap;

use super::{BackendError, CompletionBackend, CompletionRequest, CompletionResponse, INVALID_INPUT, MISSING_FACT};
use crate::model::{facts_in_rendered, Instruction, Reference};
use crate::synth::{format_answer, ToolCall, ToolKind};

pub fn step_task_message(step: usize, instruction: &str) -> String {
    format!("TASK {step}: {instruction}")
}

pub fn final_task_message(requirement: &str) -> String {
    format!("FINAL: {requirement}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScriptedAgent {
    /// Prefix each response with a short reasoning trace.
    pub reasoning: bool,
}

impl Default for ScriptedAgent {
    fn default() -> Self {
        ScriptedAgent { reasoning: true }
    }
}

impl ScriptedAgent {
    /// Answers with the result line only.
    pub fn terse() -> Self {
        ScriptedAgent { reasoning: false }
    }

    fn respond(&self, context: &str, task: &str) -> Result<String, BackendError> {
        let (label, body) = parse_task(task)?;
        let ins: Instruction =
            body.parse().map_err(|e| BackendError::InvalidRequest(format!("unsupported task `{body}`: {e}")))?;
        let facts = facts_in_rendered(context);
        let mut found: Vec<(String, String)> = Vec::new();
        let result = match resolve(&ins, &facts, &mut found) {
            Ok(values) => act(&ins, &values),
            Err(marker) => marker,
        };
        if !self.reasoning {
            return Ok(result);
        }
        let mut lines = vec![format!("Thought: {label} asks me to {body}.")];
        if found.is_empty() {
            lines.push("Thought: this task needs no earlier values from the context.".to_string());
        } else {
            let seen: Vec<String> = found.iter().map(|(k, v)| format!("{k} as {v}")).collect();
            lines.push(format!("Thought: I checked the context and read {}.", seen.join(", ")));
        }
        lines.push(
            "Thought: the remaining notes and logs are not needed here, so I set them aside and produce the result for this step."
                .to_string(),
        );
        lines.push(result);
        Ok(lines.join("\n"))
    }
}

impl CompletionBackend for ScriptedAgent {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        req.check()?;
        let (last, rest) = req.messages.split_last().expect("checked non-empty");
        let context = rest.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
        let text = self.respond(&context, &last.content)?;
        Ok(CompletionResponse::counted(req, text))
    }
}

fn parse_task(task: &str) -> Result<(String, &str), BackendError> {
    let task = task.trim();
    if let Some(body) = task.strip_prefix("FINAL:") {
        return Ok(("the final requirement".to_string(), body.trim()));
    }
    if let Some(rest) = task.strip_prefix("TASK ") {
        if let Some((n, body)) = rest.split_once(':') {
            return Ok((format!("step {}", n.trim()), body.trim()));
        }
    }
    // a bare instruction is accepted as well
    Ok(("this task".to_string(), task))
}

/// Looks up every reference; the first unusable one becomes the response.
fn resolve(
    ins: &Instruction,
    facts: &HashMap<String, String>,
    found: &mut Vec<(String, String)>,
) -> Result<HashMap<String, String>, String> {
    let mut values = HashMap::new();
    for r in ins.references() {
        let key = r.key();
        let Some(v) = facts.get(&key) else {
            return Err(format!("{MISSING_FACT}{key}"));
        };
        // failures upstream propagate unchanged
        if v.starts_with(MISSING_FACT) || v.starts_with(INVALID_INPUT) {
            return Err(v.clone());
        }
        found.push((key.clone(), v.clone()));
        values.insert(key, v.clone());
    }
    Ok(values)
}

fn act(ins: &Instruction, values: &HashMap<String, String>) -> String {
    let get = |j: usize| values[&Reference::Step(j).key()].clone();
    let num = |j: usize| -> Result<i64, String> { get(j).parse::<i64>().map_err(|_| format!("{INVALID_INPUT}${j}")) };
    let call = |kind: ToolKind, args: Vec<(&str, String)>| ToolCall::new(kind, args).to_string();
    let out: Result<String, String> = match ins {
        Instruction::Lookup { name } => Ok(values[name].clone()),
        Instruction::Search { term } => Ok(call(ToolKind::Search, vec![("term", term.clone())])),
        Instruction::Extract { field, doc } => {
            Ok(call(ToolKind::Extract, vec![("doc", get(*doc)), ("field", field.clone())]))
        }
        Instruction::ReadFile { path } => Ok(call(ToolKind::ReadFile, vec![("path", path.clone())])),
        Instruction::WriteFile { path, value } => {
            Ok(call(ToolKind::WriteFile, vec![("path", path.clone()), ("content", get(*value))]))
        }
        Instruction::TableSum { table, column } => {
            Ok(call(ToolKind::TableSum, vec![("table", table.clone()), ("col", column.clone())]))
        }
        Instruction::TableFilter { table, column, min } => Ok(call(
            ToolKind::TableFilter,
            vec![("table", table.clone()), ("col", column.clone()), ("min", min.to_string())],
        )),
        Instruction::Add(a, b) => num(*a).and_then(|x| num(*b).map(|y| (x + y).to_string())),
        Instruction::Sub(a, b) => num(*a).and_then(|x| num(*b).map(|y| (x - y).to_string())),
        Instruction::Sum(refs) | Instruction::AnswerSum(refs) => {
            refs.iter().map(|&j| num(j)).sum::<Result<i64, String>>().map(|v| v.to_string())
        }
        Instruction::AnswerValue(j) => Ok(get(*j)),
        Instruction::Report { step, sentence } => Ok(format_answer(&get(*step), *sentence)),
    };
    out.unwrap_or_else(|marker| marker)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{final_line, Message};

    fn ask(agent: ScriptedAgent, context: &str, task: &str) -> String {
        let req = CompletionRequest::new(vec![Message::system(context), Message::user(task)]);
        agent.complete(&req).unwrap().text
    }

    #[test]
    fn lookup_from_context() {
        assert_eq!(ask(ScriptedAgent::terse(), "## INPUT\na=2", "lookup a"), "2");
        assert_eq!(ask(ScriptedAgent::terse(), "## INPUT\na = 2", "TASK 1: lookup a"), "2");
    }

    #[test]
    fn missing_fact_is_reported() {
        assert_eq!(ask(ScriptedAgent::terse(), "## INPUT\nb = 3", "lookup a"), "MISSING_FACT:a");
        assert_eq!(ask(ScriptedAgent::terse(), "## INPUT\nb = 3", "add $1 $2"), "MISSING_FACT:$1");
    }

    #[test]
    fn plan_text_is_not_a_fact_source() {
        assert_eq!(ask(ScriptedAgent::terse(), "## PLAN\na = 2", "lookup a"), "MISSING_FACT:a");
    }

    #[test]
    fn arithmetic_and_calls() {
        let ctx = "## HISTORY\n$1 = 4\n## OBSERVATIONS\n$2 = 6\n$3 = d9";
        let agent = ScriptedAgent::terse();
        assert_eq!(ask(agent, ctx, "TASK 4: add $1 $2"), "10");
        assert_eq!(ask(agent, ctx, "TASK 4: sub $1 $2"), "-2");
        assert_eq!(ask(agent, ctx, "TASK 4: sum $1 $2 $1"), "14");
        assert_eq!(ask(agent, ctx, "TASK 4: extract qty from $3"), "CALL extract doc=d9 field=qty");
        assert_eq!(ask(agent, ctx, "TASK 4: add $1 $3"), "INVALID_INPUT:$3");
        assert_eq!(ask(agent, ctx, "FINAL: report $2 as sentence"), "the final result of this workflow is 6");
    }

    #[test]
    fn upstream_failure_propagates() {
        let ctx = "## HISTORY\n$1 = MISSING_FACT:acct\n$2 = 5";
        assert_eq!(ask(ScriptedAgent::terse(), ctx, "add $1 $2"), "MISSING_FACT:acct");
    }

    #[test]
    fn reasoning_trace_ends_with_result() {
        let out = ask(ScriptedAgent::default(), "## INPUT\na = 2", "TASK 3: lookup a");
        assert!(out.lines().count() > 1);
        assert_eq!(final_line(&out), "2");
        assert!(out.starts_with("Thought: step 3 asks me to lookup a."));
    }

    #[test]
    fn temperature_independent() {
        let mut req = CompletionRequest::new(vec![Message::system("## INPUT\na = 2"), Message::user("lookup a")]);
        let a = ScriptedAgent::default().complete(&req).unwrap();
        req.temperature = 1.3;
        assert_eq!(ScriptedAgent::default().complete(&req).unwrap(), a);
    }

    #[test]
    fn empty_request_rejected() {
        let req = CompletionRequest::new(vec![]);
        assert!(matches!(ScriptedAgent::default().complete(&req), Err(BackendError::InvalidRequest(_))));
    }
}
