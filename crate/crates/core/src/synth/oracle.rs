//! Symbolic ground truth: executes a plan directly against the world state, with
//! no agent and no context.

use thiserror::Error;

use super::world::{ToolCall, ToolKind, WorldState};
use crate::model::{Instruction, PlanError, Workflow, SENTENCE_PREFIX};

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("step {step}: {message}")]
    Step { step: usize, message: String },
}

/// Per-step ground-truth values plus the final answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleTrace {
    pub step_values: Vec<String>,
    pub answer: String,
}

pub fn oracle_trace(w: &Workflow, world: &WorldState) -> Result<OracleTrace, OracleError> {
    let mut world = world.clone();
    let mut values: Vec<String> = Vec::with_capacity(w.plan.len());
    for s in w.plan.steps() {
        let ins = s.parsed()?;
        let err = |message: String| OracleError::Step { step: s.id, message };
        let get = |j: usize| -> Result<&str, OracleError> {
            values
                .get(j.wrapping_sub(1))
                .map(String::as_str)
                .ok_or_else(|| err(format!("reference ${j} not yet computed")))
        };
        let num = |j: usize| -> Result<i64, OracleError> {
            get(j)?.parse().map_err(|_| err(format!("reference ${j} is not numeric")))
        };
        let tool = |world: &mut WorldState, call: ToolCall| -> Result<String, OracleError> {
            let r = world.apply(&call);
            if r.is_error() {
                Err(err(format!("tool returned {}", r.payload)))
            } else {
                Ok(r.payload)
            }
        };
        let v = match &ins {
            Instruction::Lookup { name } => tool(&mut world, ToolCall::new(ToolKind::Lookup, [("key", name.clone())]))?,
            Instruction::Search { term } => {
                tool(&mut world, ToolCall::new(ToolKind::Search, [("term", term.clone())]))?
            }
            Instruction::Extract { field, doc } => {
                let doc = get(*doc)?.to_string();
                tool(&mut world, ToolCall::new(ToolKind::Extract, [("doc", doc), ("field", field.clone())]))?
            }
            Instruction::ReadFile { path } => {
                tool(&mut world, ToolCall::new(ToolKind::ReadFile, [("path", path.clone())]))?
            }
            Instruction::WriteFile { path, value } => {
                let content = get(*value)?.to_string();
                tool(&mut world, ToolCall::new(ToolKind::WriteFile, [("path", path.clone()), ("content", content)]))?
            }
            Instruction::TableSum { table, column } => tool(
                &mut world,
                ToolCall::new(ToolKind::TableSum, [("table", table.clone()), ("col", column.clone())]),
            )?,
            Instruction::TableFilter { table, column, min } => tool(
                &mut world,
                ToolCall::new(
                    ToolKind::TableFilter,
                    [("table", table.clone()), ("col", column.clone()), ("min", min.to_string())],
                ),
            )?,
            Instruction::Add(a, b) => (num(*a)? + num(*b)?).to_string(),
            Instruction::Sub(a, b) => (num(*a)? - num(*b)?).to_string(),
            Instruction::Sum(refs) | Instruction::AnswerSum(refs) => {
                refs.iter().map(|&j| num(j)).sum::<Result<i64, _>>()?.to_string()
            }
            Instruction::AnswerValue(j) => get(*j)?.to_string(),
            Instruction::Report { .. } => return Err(err("report is only valid as the final requirement".into())),
        };
        values.push(v);
    }
    let answer = match w.final_requirement.parse::<Instruction>()? {
        Instruction::Report { step, sentence } => {
            let v = values.get(step.wrapping_sub(1)).ok_or_else(|| OracleError::Step {
                step: w.plan.len() + 1,
                message: format!("final requirement reads unknown step ${step}"),
            })?;
            format_answer(v, sentence)
        }
        other => {
            return Err(OracleError::Step {
                step: w.plan.len() + 1,
                message: format!("final requirement must be a report, got `{other}`"),
            })
        }
    };
    Ok(OracleTrace { step_values: values, answer })
}

/// The unique correct final answer.
pub fn oracle_answer(w: &Workflow, world: &WorldState) -> Result<String, OracleError> {
    oracle_trace(w, world).map(|t| t.answer)
}

pub fn format_answer(value: &str, sentence: bool) -> String {
    if sentence {
        format!("{SENTENCE_PREFIX} {value}")
    } else {
        value.to_string()
    }
}
