//! Deterministic generator of long-horizon workflows over the simulated world.
//!
//! Every step reads only values that are reachable when it runs: initial-input
//! facts or the results of earlier steps. How far back a step may read is bounded
//! by `max_ref_gap` (initial-input facts count as acquired at step 0), or pinned
//! to exactly `fixed_gap` steps for the adversarial corpus used by the
//! lookahead ablation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::oracle::oracle_answer;
use super::world::{Row, WorldState};
use crate::model::{Instruction, Plan, TaskKind, Workflow};

const WORDS: [&str; 48] = [
    "amber", "basil", "cedar", "delta", "ember", "fjord", "garnet", "harbor", "indigo", "juniper", "kelp", "lumen",
    "maple", "nectar", "onyx", "pepper", "quartz", "raven", "sierra", "tundra", "umber", "violet", "willow", "xenon",
    "yarrow", "zephyr", "acorn", "birch", "cobalt", "dune", "falcon", "glacier", "hazel", "iris", "jasper", "kestrel",
    "lotus", "meadow", "nova", "orchid", "pine", "quill", "river", "saffron", "thistle", "upland", "vale", "wren",
];
const SERVICES: [&str; 6] = ["ingest", "billing", "auth", "scheduler", "indexer", "gateway"];
const STATUSES: [&str; 4] = ["ok", "warn", "retry", "degraded"];
const FIELDS: [&str; 4] = ["price", "qty", "score", "units"];
const COLUMNS: [&str; 3] = ["amount", "count", "weight"];

pub const DEFAULT_SYSTEM_PROMPT: &str = "You are a careful tool-using agent. Execute the current task using only the information in this context. Call a tool when the task needs one and report missing information instead of guessing.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub min_steps: usize,
    pub max_steps: usize,
    /// Scales the number of log lines and partial summaries in I0.
    pub noise_level: f64,
    /// Sampling weights per task kind; `answer` is always the final step.
    pub domain_mix: BTreeMap<TaskKind, f64>,
    /// Irrelevant `name = value` facts injected into I0.
    pub distractor_count: usize,
    /// Largest distance between acquiring a value and consuming it.
    pub max_ref_gap: usize,
    /// Adversarial mode: every value is consumed exactly this many steps later.
    pub fixed_gap: Option<usize>,
    /// Probability that the final requirement asks for a sentence-form answer.
    pub sentence_answer_rate: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let domain_mix = [
            (TaskKind::Lookup, 1.0),
            (TaskKind::Arithmetic, 2.0),
            (TaskKind::FileOp, 1.0),
            (TaskKind::TableOp, 1.0),
            (TaskKind::Search, 1.0),
            (TaskKind::Extract, 1.5),
            (TaskKind::Aggregate, 1.5),
            (TaskKind::Answer, 0.0),
        ]
        .into_iter()
        .collect();
        GeneratorConfig {
            min_steps: 5,
            max_steps: 30,
            noise_level: 0.5,
            domain_mix,
            distractor_count: 8,
            max_ref_gap: 2,
            fixed_gap: None,
            sentence_answer_rate: 0.5,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GeneratorError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("generated plan failed validation: {0}")]
    Plan(#[from] crate::model::PlanError),
    #[error("oracle could not solve generated workflow: {0}")]
    Oracle(#[from] super::oracle::OracleError),
}

impl GeneratorConfig {
    /// Adversarial corpus for the lookahead ablation.
    pub fn adversarial(gap: usize) -> Self {
        GeneratorConfig { fixed_gap: Some(gap), ..GeneratorConfig::default() }
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        let bad = |m: String| Err(GeneratorError::Config(m));
        if self.min_steps < 3 {
            return bad(format!("min_steps must be at least 3, got {}", self.min_steps));
        }
        if self.min_steps > self.max_steps {
            return bad(format!("min_steps {} exceeds max_steps {}", self.min_steps, self.max_steps));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return bad(format!("noise_level must lie in [0,1], got {}", self.noise_level));
        }
        if !(0.0..=1.0).contains(&self.sentence_answer_rate) {
            return bad(format!("sentence_answer_rate must lie in [0,1], got {}", self.sentence_answer_rate));
        }
        if self.domain_mix.values().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("domain_mix weights must be finite and nonnegative".into());
        }
        if self.domain_mix.values().sum::<f64>() <= 0.0 {
            return bad("domain_mix weights must have a positive sum".into());
        }
        if self.max_ref_gap < 2 {
            return bad("max_ref_gap must be at least 2 to allow multi-hop steps".into());
        }
        if let Some(g) = self.fixed_gap {
            if g == 0 || g + 1 >= self.min_steps {
                return bad(format!("fixed_gap {g} must lie in [1, min_steps - 2]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Num(i64),
    Doc(String),
}

struct Builder {
    rng: ChaCha8Rng,
    world: WorldState,
    instructions: Vec<Instruction>,
    values: Vec<Value>,
    /// I0 facts referenced by the plan, in creation order.
    facts: Vec<(String, i64)>,
    /// Field names available per search step, keyed by step id.
    doc_fields: BTreeMap<usize, Vec<String>>,
    counter: usize,
}

impl Builder {
    fn word(&mut self) -> &'static str {
        WORDS[self.rng.random_range(0..WORDS.len())]
    }

    fn fresh(&mut self) -> usize {
        self.counter += 1;
        self.counter
    }

    fn push(&mut self, ins: Instruction, value: Value) {
        self.instructions.push(ins);
        self.values.push(value);
    }

    fn num(&self, step: usize) -> Option<i64> {
        match self.values.get(step - 1) {
            Some(Value::Num(v)) => Some(*v),
            _ => None,
        }
    }

    fn lookup(&mut self) {
        let name = format!("{}_{}", self.word(), self.fresh());
        let v = self.rng.random_range(1..=99);
        self.world.kv.insert(name.clone(), v.to_string());
        self.facts.push((name.clone(), v));
        self.push(Instruction::Lookup { name }, Value::Num(v));
    }

    fn file_op(&mut self) {
        let path = format!("/data/{}_{}.txt", self.word(), self.fresh());
        let v = self.rng.random_range(1..=99);
        self.world.files.insert(path.clone(), v.to_string());
        self.push(Instruction::ReadFile { path }, Value::Num(v));
    }

    fn table_op(&mut self) {
        let table = format!("t{}", self.fresh());
        let col = COLUMNS[self.rng.random_range(0..COLUMNS.len())].to_string();
        let other = COLUMNS[(COLUMNS.iter().position(|c| *c == col).unwrap() + 1) % COLUMNS.len()];
        let n_rows = self.rng.random_range(3..=6);
        let rows: Vec<Row> = (0..n_rows)
            .map(|_| {
                Row::from([
                    (col.clone(), self.rng.random_range(0..=50)),
                    (other.to_string(), self.rng.random_range(0..=50)),
                ])
            })
            .collect();
        let cells: Vec<i64> = rows.iter().map(|r| r[&col]).collect();
        self.world.tables.insert(table.clone(), rows);
        if self.rng.random_bool(0.5) {
            let v = cells.iter().sum();
            self.push(Instruction::TableSum { table, column: col }, Value::Num(v));
        } else {
            let min = self.rng.random_range(10..=40);
            let v = cells.iter().filter(|&&c| c >= min).count() as i64;
            self.push(Instruction::TableFilter { table, column: col, min }, Value::Num(v));
        }
    }

    fn search(&mut self) {
        let id = self.fresh();
        let term = format!("topic_{}{}", self.word(), id);
        let doc_id = format!("d{id}");
        let mut fields: Vec<String> = FIELDS.iter().map(|s| s.to_string()).collect();
        fields.retain(|_| self.rng.random_bool(0.7));
        if fields.is_empty() {
            fields.push(FIELDS[0].to_string());
        }
        let mut text = format!("Memo about {term} from the {} team.", self.word());
        for f in &fields {
            let v: i64 = self.rng.random_range(1..=99);
            text.push_str(&format!(" Reported {f}={v}."));
        }
        self.world.documents.insert(doc_id.clone(), text);
        let step = self.instructions.len() + 1;
        self.doc_fields.insert(step, fields);
        self.push(Instruction::Search { term }, Value::Doc(doc_id));
    }

    fn extract(&mut self, doc_step: usize) {
        let fields = self.doc_fields[&doc_step].clone();
        let field = fields[self.rng.random_range(0..fields.len())].clone();
        let Value::Doc(doc) = self.values[doc_step - 1].clone() else {
            unreachable!("extract only targets search steps")
        };
        let text = &self.world.documents[&doc];
        let v: i64 = text
            .split_whitespace()
            .find_map(|w| w.strip_prefix(&format!("{field}=")).map(|r| r.trim_end_matches('.').parse().unwrap()))
            .unwrap();
        self.push(Instruction::Extract { field, doc: doc_step }, Value::Num(v));
    }

    fn numeric_in(&self, lo: usize, hi: usize) -> Vec<usize> {
        (lo.max(1)..=hi).filter(|&j| self.num(j).is_some()).collect()
    }

    fn distractor_docs(&mut self) {
        for _ in 0..2 {
            let id = format!("d{}", self.fresh());
            let text = format!("Archive note on {} and {} with no figures.", self.word(), self.word());
            self.world.documents.insert(id, text);
        }
    }
}

/// Generates a workflow and its world. Identical `(seed, cfg)` give identical output.
pub fn generate_workflow(seed: u64, cfg: &GeneratorConfig) -> Result<(Workflow, WorldState), GeneratorError> {
    cfg.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        world: WorldState::default(),
        instructions: Vec::new(),
        values: Vec::new(),
        facts: Vec::new(),
        doc_fields: BTreeMap::new(),
        counter: 0,
    };
    let n = b.rng.random_range(cfg.min_steps..=cfg.max_steps);
    match cfg.fixed_gap {
        Some(gap) => build_fixed_gap(&mut b, n, gap),
        None => build_mixed(&mut b, n, cfg),
    }
    b.distractor_docs();

    let plan = Plan::from_instructions(&b.instructions)?;
    let sentence = b.rng.random_bool(cfg.sentence_answer_rate);
    let final_requirement = Instruction::Report { step: n, sentence }.to_string();
    let initial_input = build_initial_input(&mut b, cfg);

    let mut workflow = Workflow {
        id: format!("wf-{seed}"),
        initial_input,
        system_prompt: DEFAULT_SYSTEM_PROMPT.to_string(),
        plan,
        final_requirement,
        seed,
        gold_answer: None,
    };
    workflow.gold_answer = Some(oracle_answer(&workflow, &b.world)?);
    Ok((workflow, b.world))
}

fn build_mixed(b: &mut Builder, n: usize, cfg: &GeneratorConfig) {
    let gap = cfg.max_ref_gap;
    for i in 1..n {
        // the two steps before the answer must produce numbers
        let numeric_only = i + 2 >= n;
        let window = i.saturating_sub(gap);
        let numeric = b.numeric_in(window, i - 1);
        let docs: Vec<usize> = (window.max(1)..i).filter(|j| b.doc_fields.contains_key(j)).collect();
        let feasible = |k: TaskKind| match k {
            TaskKind::Lookup => i <= gap,
            TaskKind::Search => !numeric_only,
            TaskKind::Extract => !docs.is_empty(),
            TaskKind::FileOp | TaskKind::TableOp => true,
            TaskKind::Arithmetic => numeric.len() >= 2,
            TaskKind::Aggregate => numeric.len() >= 2 && numeric.iter().any(|&j| i - j >= 2),
            TaskKind::Answer => false,
        };
        let choices: Vec<(TaskKind, f64)> =
            cfg.domain_mix.iter().filter(|(k, w)| **w > 0.0 && feasible(**k)).map(|(k, w)| (*k, *w)).collect();
        let kind = if choices.is_empty() {
            TaskKind::FileOp
        } else {
            let total: f64 = choices.iter().map(|c| c.1).sum();
            let mut x = b.rng.random::<f64>() * total;
            choices
                .iter()
                .find(|(_, w)| {
                    x -= w;
                    x < 0.0
                })
                .unwrap_or(choices.last().unwrap())
                .0
        };
        match kind {
            TaskKind::Lookup => b.lookup(),
            TaskKind::Search => b.search(),
            TaskKind::Extract => {
                let d = docs[b.rng.random_range(0..docs.len())];
                b.extract(d)
            }
            TaskKind::FileOp => b.file_op(),
            TaskKind::TableOp => b.table_op(),
            TaskKind::Arithmetic => {
                let x = numeric[b.rng.random_range(0..numeric.len())];
                let mut y = numeric[b.rng.random_range(0..numeric.len())];
                if x == y {
                    y = *numeric.iter().find(|&&j| j != x).unwrap();
                }
                let (vx, vy) = (b.num(x).unwrap(), b.num(y).unwrap());
                if b.rng.random_bool(0.5) {
                    b.push(Instruction::Add(x, y), Value::Num(vx + vy));
                } else {
                    b.push(Instruction::Sub(x, y), Value::Num(vx - vy));
                }
            }
            TaskKind::Aggregate => {
                let far = *numeric.iter().find(|&&j| i - j >= 2).unwrap();
                let mut refs: Vec<usize> =
                    numeric.iter().copied().filter(|&j| j != far && b.rng.random_bool(0.7)).collect();
                if refs.is_empty() {
                    refs.push(*numeric.iter().find(|&&j| j != far).unwrap());
                }
                refs.insert(0, far);
                refs.sort_unstable();
                let v = refs.iter().map(|&j| b.num(j).unwrap()).sum();
                b.push(Instruction::Sum(refs), Value::Num(v));
            }
            TaskKind::Answer => unreachable!(),
        }
    }
    let refs = vec![n - 2, n - 1];
    let v = refs.iter().map(|&j| b.num(j).unwrap()).sum();
    b.push(Instruction::AnswerSum(refs), Value::Num(v));
}

/// Steps `1..=gap` acquire numbers with tools; every later step reads the value
/// acquired exactly `gap` steps earlier together with its predecessor.
fn build_fixed_gap(b: &mut Builder, n: usize, gap: usize) {
    for i in 1..=gap {
        if i % 2 == 1 {
            b.file_op()
        } else {
            b.table_op()
        }
    }
    for i in gap + 1..n {
        let (x, y) = (i - gap, i - 1);
        let v = b.num(x).unwrap() + b.num(y).unwrap();
        b.push(Instruction::Add(x, y), Value::Num(v));
    }
    let refs = if gap == 1 { vec![n - 1] } else { vec![n - gap, n - 1] };
    match refs.as_slice() {
        [only] => {
            let v = b.num(*only).unwrap();
            b.push(Instruction::AnswerValue(*only), Value::Num(v));
        }
        _ => {
            let v = refs.iter().map(|&j| b.num(j).unwrap()).sum();
            b.push(Instruction::AnswerSum(refs), Value::Num(v));
        }
    }
}

fn build_initial_input(b: &mut Builder, cfg: &GeneratorConfig) -> String {
    let mut lines: Vec<String> = b.facts.iter().map(|(k, v)| format!("{k} = {v}")).collect();
    for j in 0..cfg.distractor_count {
        let v: i64 = b.rng.random_range(1..=99);
        lines.push(format!("{}_x{} = {v}", b.word(), j + 1));
    }
    let n_logs = (cfg.noise_level * 24.0).round() as usize;
    for _ in 0..n_logs {
        let id: u32 = b.rng.random_range(0..10_000);
        let svc = SERVICES[b.rng.random_range(0..SERVICES.len())];
        let status = STATUSES[b.rng.random_range(0..STATUSES.len())];
        let ms: u32 = b.rng.random_range(3..900);
        lines.push(format!("[log {id:04}] {svc} {} status {status} latency {ms}ms", b.word()));
    }
    let n_summaries = (cfg.noise_level * 6.0).round() as usize;
    for _ in 0..n_summaries {
        let (w1, w2, w3) = (b.word(), b.word(), b.word());
        lines.push(format!(
            "Partial summary: a previous attempt inspected {w1} and {w2} but stopped before finishing the {w3} review."
        ));
    }
    // Fisher-Yates with the workflow rng keeps output a pure function of the seed.
    for i in (1..lines.len()).rev() {
        let j = b.rng.random_range(0..=i);
        lines.swap(i, j);
    }
    lines.join("\n")
}

/// Names of distractor facts never referenced by any plan step.
pub fn is_distractor_name(name: &str) -> bool {
    name.rsplit_once("_x").is_some_and(|(_, n)| !n.is_empty() && n.bytes().all(|c| c.is_ascii_digit()))
}
