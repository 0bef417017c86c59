//! Runs workflows with the full context, with next-k compression, or under a
//! baseline strategy.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    compression_input, final_line, final_task_message, step_task_message, BackendError, CompletionBackend,
    CompletionRequest, Embedder, Message,
};
use crate::baselines::{extractive_compress, fifo_compress, prompting_compress, retrieval_compress};
use crate::model::{
    parse_fact_line, CompressionRecord, ContextState, Entry, Plan, PlanError, StepRecord, Trajectory, TrajectoryMode,
    Workflow, CALL_PREFIX,
};
use crate::synth::{ToolCall, ToolResult, WorldState, INVALID_CALL};

pub const STUDENT_INSTRUCTION: &str = "Compress the context for the next tasks.";

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("invalid run configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub k: usize,
    /// Step guard; `None` means twice the plan length.
    pub max_steps: Option<usize>,
    /// Per-step context guard in tokens.
    pub token_budget: Option<usize>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { k: 2, max_steps: None, token_budget: None, seed: 0 }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ExecError> {
        if self.k < 1 {
            return Err(ExecError::Config("k must be at least 1".into()));
        }
        if self.max_steps == Some(0) || self.token_budget == Some(0) {
            return Err(ExecError::Config("guards must be positive".into()));
        }
        Ok(())
    }

    fn step_limit(&self, n: usize) -> usize {
        self.max_steps.unwrap_or(2 * n)
    }
}

/// Task ids of Π_{t:t+k}, clipped to the plan.
pub fn slice_range(plan: &Plan, t: usize, k: usize) -> Result<std::ops::RangeInclusive<usize>, PlanError> {
    let n = plan.len();
    if t < 1 || t > n {
        return Err(PlanError::StepOutOfRange(t, n));
    }
    if k < 1 {
        return Err(PlanError::Instruction("k must be at least 1".into()));
    }
    Ok(t..=(t + k - 1).min(n))
}

/// Renders τ_t..τ_{min(t+k−1,n)} with dependency edges restricted to the slice.
pub fn plan_slice(plan: &Plan, t: usize, k: usize) -> Result<String, PlanError> {
    let range = slice_range(plan, t, k)?;
    let keep = |d: usize| range.contains(&d);
    Ok(range.clone().filter_map(|id| plan.step(id)).map(|s| s.render_line(keep)).collect::<Vec<_>>().join("\n"))
}

/// Update(C, output, tools): output to history, payloads to observations, step + 1.
pub fn update_context(mut c: ContextState, agent_output: &str, tool_results: &[ToolResult]) -> ContextState {
    let step = c.step;
    c.history.push(Entry::tagged(step, agent_output));
    for r in tool_results {
        c.observations.push(Entry::tagged(step, r.payload.clone()));
    }
    c.step += 1;
    c
}

/// Keeps the system prompt, the slice as plan, the I0/memory facts the slice
/// reads, and the value line of every earlier step the slice reads. Everything
/// else (reasoning, tool-call lines, noise, retrieved entries) is dropped.
pub fn oracle_rule(c: &ContextState, plan: &Plan, t: usize, k: usize) -> Result<ContextState, PlanError> {
    let slice = plan_slice(plan, t, k)?;
    let mut wanted: HashSet<String> = HashSet::new();
    for id in slice_range(plan, t, k)? {
        for r in plan.step(id).expect("in range").parsed()?.references() {
            wanted.insert(r.key());
        }
    }
    let fact_wanted = |line: &str| parse_fact_line(line).is_some_and(|(key, _)| wanted.contains(key));
    let values = |es: &[Entry]| -> Vec<Entry> {
        es.iter()
            .filter(|e| e.step.is_some_and(|s| wanted.contains(&format!("${s}"))))
            .filter_map(|e| {
                let v = e.value()?;
                (!v.starts_with(CALL_PREFIX)).then(|| Entry { step: e.step, text: v.to_string() })
            })
            .collect()
    };
    Ok(ContextState {
        initial_input: c.initial_input.lines().filter(|l| fact_wanted(l)).collect::<Vec<_>>().join("\n"),
        system_prompt: c.system_prompt.clone(),
        plan_text: slice,
        history: values(&c.history),
        observations: values(&c.observations),
        retrieved: Vec::new(),
        memory: c.memory.iter().filter(|l| fact_wanted(l)).cloned().collect(),
        step: c.step,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Baseline {
    Fifo {
        turns: usize,
    },
    Retrieval {
        top_m: usize,
    },
    Prompting {
        instruction: String,
    },
    /// Deletion-only stand-in for extractive prompt compressors.
    Extractive {
        keep_fraction: f64,
    },
}

impl Baseline {
    pub fn name(&self) -> &'static str {
        match self {
            Baseline::Fifo { .. } => "fifo",
            Baseline::Retrieval { .. } => "retrieval",
            Baseline::Prompting { .. } => "prompting",
            Baseline::Extractive { .. } => "extractive-lite",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompressorKind {
    Teacher {
        prompt_id: String,
        prompt: String,
    },
    Student,
    OracleRule,
    Baseline(Baseline),
    /// Returns C_t unchanged.
    Identity,
}

impl fmt::Display for CompressorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompressorKind::Teacher { prompt_id, .. } => write!(f, "teacher:{prompt_id}"),
            CompressorKind::Student => f.write_str("student"),
            CompressorKind::OracleRule => f.write_str("oracle_rule"),
            CompressorKind::Baseline(b) => write!(f, "baseline:{}", b.name()),
            CompressorKind::Identity => f.write_str("identity"),
        }
    }
}

#[derive(Clone)]
pub struct CompressorHandle {
    pub kind: CompressorKind,
    pub k: usize,
    pub backend: Option<Arc<dyn CompletionBackend>>,
    pub embedder: Option<Arc<dyn Embedder>>,
}

impl fmt::Debug for CompressorHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompressorHandle").field("kind", &self.kind).field("k", &self.k).finish()
    }
}

impl CompressorHandle {
    pub fn oracle(k: usize) -> Self {
        CompressorHandle { kind: CompressorKind::OracleRule, k, backend: None, embedder: None }
    }

    pub fn identity(k: usize) -> Self {
        CompressorHandle { kind: CompressorKind::Identity, k, backend: None, embedder: None }
    }

    pub fn teacher(prompt_id: &str, prompt: &str, backend: Arc<dyn CompletionBackend>, k: usize) -> Self {
        CompressorHandle {
            kind: CompressorKind::Teacher { prompt_id: prompt_id.into(), prompt: prompt.into() },
            k,
            backend: Some(backend),
            embedder: None,
        }
    }

    pub fn student(backend: Arc<dyn CompletionBackend>, k: usize) -> Self {
        CompressorHandle { kind: CompressorKind::Student, k, backend: Some(backend), embedder: None }
    }

    pub fn baseline(b: Baseline, k: usize) -> Self {
        CompressorHandle { kind: CompressorKind::Baseline(b), k, backend: None, embedder: None }
    }

    pub fn with_backend(mut self, backend: Arc<dyn CompletionBackend>) -> Self {
        self.backend = Some(backend);
        self
    }

    pub fn with_embedder(mut self, embedder: Arc<dyn Embedder>) -> Self {
        self.embedder = Some(embedder);
        self
    }

    pub fn validate(&self) -> Result<(), ExecError> {
        if self.k < 1 {
            return Err(ExecError::Config("compressor k must be at least 1".into()));
        }
        let needs_backend = matches!(
            self.kind,
            CompressorKind::Teacher { .. }
                | CompressorKind::Student
                | CompressorKind::Baseline(Baseline::Prompting { .. })
        );
        if needs_backend && self.backend.is_none() {
            return Err(ExecError::Config(format!("{} needs a completion backend", self.kind)));
        }
        if matches!(self.kind, CompressorKind::Baseline(Baseline::Retrieval { .. })) && self.embedder.is_none() {
            return Err(ExecError::Config("retrieval needs an embedder".into()));
        }
        if let CompressorKind::Teacher { prompt_id, prompt } = &self.kind {
            if prompt_id.is_empty() || prompt.trim().is_empty() {
                return Err(ExecError::Config("teacher needs a prompt id and non-empty prompt".into()));
            }
        }
        if let CompressorKind::Baseline(Baseline::Extractive { keep_fraction }) = self.kind {
            if !(keep_fraction > 0.0 && keep_fraction < 1.0) {
                return Err(ExecError::Config("keep_fraction must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }

    pub fn prompt_id(&self) -> String {
        match &self.kind {
            CompressorKind::Teacher { prompt_id, .. } => prompt_id.clone(),
            other => other.to_string(),
        }
    }

    pub fn mode(&self) -> TrajectoryMode {
        match &self.kind {
            CompressorKind::Baseline(b) => TrajectoryMode::Baseline(b.name().to_string()),
            _ => TrajectoryMode::Compressed,
        }
    }

    /// C̃_t = comp(C_t, Π_{t:t+k}).
    pub fn compress(&self, c: &ContextState, plan: &Plan, t: usize) -> Result<ContextState, ExecError> {
        let slice = plan_slice(plan, t, self.k)?;
        let via_model = |system: &str| -> Result<ContextState, ExecError> {
            let backend = self.backend.as_ref().ok_or_else(|| ExecError::Config("missing backend".into()))?;
            let req = CompletionRequest::new(vec![
                Message::system(system),
                Message::user(compression_input(&slice, &c.render())),
            ]);
            let text = backend.complete(&req)?.text;
            Ok(ContextState::parse(&text, c.step))
        };
        Ok(match &self.kind {
            CompressorKind::Identity => c.clone(),
            CompressorKind::OracleRule => oracle_rule(c, plan, t, self.k)?,
            CompressorKind::Teacher { prompt, .. } => via_model(prompt)?,
            CompressorKind::Student => via_model(STUDENT_INSTRUCTION)?,
            CompressorKind::Baseline(Baseline::Fifo { turns }) => fifo_compress(c, *turns),
            CompressorKind::Baseline(Baseline::Extractive { keep_fraction }) => {
                extractive_compress(c, &slice, *keep_fraction)
            }
            CompressorKind::Baseline(Baseline::Retrieval { top_m }) => {
                let e = self.embedder.as_ref().ok_or_else(|| ExecError::Config("missing embedder".into()))?;
                retrieval_compress(c, &slice, e.as_ref(), *top_m)?
            }
            CompressorKind::Baseline(Baseline::Prompting { instruction }) => {
                let b = self.backend.as_ref().ok_or_else(|| ExecError::Config("missing backend".into()))?;
                prompting_compress(c, b.as_ref(), instruction)?
            }
        })
    }
}

fn run_tool(world: &mut WorldState, output: &str) -> Vec<ToolResult> {
    let line = final_line(output);
    if !line.starts_with(CALL_PREFIX) {
        return Vec::new();
    }
    match line.parse::<ToolCall>() {
        Ok(call) => vec![world.apply(&call)],
        Err(e) => vec![ToolResult::new(format!("{INVALID_CALL}{e}"))],
    }
}

fn ask(agent: &dyn CompletionBackend, context: &str, task: String) -> Result<String, BackendError> {
    let req = CompletionRequest::new(vec![Message::system(context), Message::user(task)]);
    Ok(agent.complete(&req)?.text)
}

fn execute(
    w: &Workflow,
    world: &WorldState,
    agent: &dyn CompletionBackend,
    comp: Option<&CompressorHandle>,
    cfg: &RunConfig,
) -> Result<Trajectory, ExecError> {
    cfg.validate()?;
    if let Some(h) = comp {
        h.validate()?;
    }
    let plan = &w.plan;
    let n = plan.len();
    let mut world = world.clone();
    let mut c = ContextState::initial(&w.initial_input, &w.system_prompt, plan.description());
    let mut traj = Trajectory {
        workflow_id: w.id.clone(),
        mode: comp.map(CompressorHandle::mode).unwrap_or(TrajectoryMode::Full),
        per_step: Vec::with_capacity(n),
        final_answer: String::new(),
        compression_records: Vec::new(),
        truncated: false,
        fallback: false,
    };
    let limit = cfg.step_limit(n);
    for t in 1..=n {
        if t > limit {
            traj.truncated = true;
            break;
        }
        let acting = match comp {
            None => c,
            Some(h) => {
                let original = c.render();
                let (compressed, text) = match h.compress(&c, plan, t) {
                    Ok(s) => {
                        let text = s.render();
                        (Some(s), text)
                    }
                    Err(ExecError::Backend(e)) => {
                        tracing::warn!(workflow = %w.id, step = t, error = %e, "compressor failed, using the full context");
                        (None, String::new())
                    }
                    Err(e) => return Err(e),
                };
                let rec = CompressionRecord::new(
                    t,
                    h.k,
                    plan_slice(plan, t, h.k)?,
                    h.prompt_id(),
                    crate::tokens::token_count(&original),
                    crate::tokens::token_count(&text),
                    original,
                    text,
                );
                let ok = rec.valid;
                traj.compression_records.push(rec);
                match compressed {
                    Some(s) if ok => s,
                    _ => {
                        traj.fallback = true;
                        c
                    }
                }
            }
        };
        let rendered = acting.render();
        let tokens = crate::tokens::token_count(&rendered);
        if cfg.token_budget.is_some_and(|b| tokens > b) {
            traj.truncated = true;
            c = acting;
            break;
        }
        let step = plan.step(t).expect("t ≤ n");
        let output = ask(agent, &rendered, step_task_message(t, &step.instruction))?;
        let tools = run_tool(&mut world, &output);
        traj.per_step.push(StepRecord {
            step: t,
            context_tokens: tokens,
            context_digest: acting.digest(),
            agent_output: output.clone(),
            tool_results: tools.iter().map(|r| r.payload.clone()).collect(),
        });
        c = update_context(acting, &output, &tools);
    }
    if !traj.truncated {
        let answer = ask(agent, &c.render(), final_task_message(&w.final_requirement))?;
        traj.final_answer = final_line(&answer).to_string();
    }
    Ok(traj)
}

/// What a step produced: the tool payload for tool calls, else the agent's
/// final line.
pub fn step_value(rec: &StepRecord) -> String {
    match rec.tool_results.first() {
        Some(p) => p.clone(),
        None => final_line(&rec.agent_output).to_string(),
    }
}

/// Re-runs steps `t ..= t + k - 1` (clipped to the plan) starting from a
/// rendered context, without further compression, and returns each step's
/// value.
pub fn replay_window(
    w: &Workflow,
    world: &WorldState,
    agent: &dyn CompletionBackend,
    context_text: &str,
    t: usize,
    k: usize,
) -> Result<Vec<String>, ExecError> {
    let range = slice_range(&w.plan, t, k)?;
    let mut world = world.clone();
    let mut c = ContextState::parse(context_text, t);
    let mut values = Vec::new();
    for step in range {
        let ins = &w.plan.step(step).expect("in range").instruction;
        let output = ask(agent, &c.render(), step_task_message(step, ins))?;
        let tools = run_tool(&mut world, &output);
        let rec = StepRecord {
            step,
            context_tokens: 0,
            context_digest: String::new(),
            agent_output: output.clone(),
            tool_results: tools.iter().map(|r| r.payload.clone()).collect(),
        };
        values.push(step_value(&rec));
        c = update_context(c, &output, &tools);
    }
    Ok(values)
}

/// Runs with the full, growing context C_1 = {I0, P, Π}, C_{t+1} = Update(C_t, …).
pub fn run_full(
    w: &Workflow,
    world: &WorldState,
    agent: &dyn CompletionBackend,
    cfg: &RunConfig,
) -> Result<Trajectory, ExecError> {
    execute(w, world, agent, None, cfg)
}

/// Runs with C̃_t = comp(C_t, Π_{t:t+k}) and C_{t+1} = Update(C̃_t, …).
///
/// A degenerate or failed compression falls back to C_t for that step and flags
/// the trajectory.
pub fn run_compressed(
    w: &Workflow,
    world: &WorldState,
    agent: &dyn CompletionBackend,
    comp: &CompressorHandle,
    cfg: &RunConfig,
) -> Result<Trajectory, ExecError> {
    execute(w, world, agent, Some(comp), cfg)
}
