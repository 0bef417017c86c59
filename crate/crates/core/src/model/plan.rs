//! Plans, task steps and workflows.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Lookup,
    Arithmetic,
    FileOp,
    TableOp,
    Search,
    Extract,
    Aggregate,
    Answer,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::Lookup,
        TaskKind::Arithmetic,
        TaskKind::FileOp,
        TaskKind::TableOp,
        TaskKind::Search,
        TaskKind::Extract,
        TaskKind::Aggregate,
        TaskKind::Answer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Lookup => "lookup",
            TaskKind::Arithmetic => "arithmetic",
            TaskKind::FileOp => "file_op",
            TaskKind::TableOp => "table_op",
            TaskKind::Search => "search",
            TaskKind::Extract => "extract",
            TaskKind::Aggregate => "aggregate",
            TaskKind::Answer => "answer",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| PlanError::Instruction(format!("unknown task kind `{s}`")))
    }
}

/// Something an instruction reads from the context.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Reference {
    /// The result of an earlier step, written `$j`.
    Step(usize),
    /// A named fact from the initial input.
    Fact(String),
}

impl Reference {
    /// The key under which the fact appears in a rendered context.
    pub fn key(&self) -> String {
        match self {
            Reference::Step(j) => step_key(*j),
            Reference::Fact(name) => name.clone(),
        }
    }
}

pub fn step_key(step: usize) -> String {
    format!("${step}")
}

fn parse_step_ref(tok: &str) -> Result<usize, PlanError> {
    tok.strip_prefix('$')
        .and_then(|n| n.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .ok_or_else(|| PlanError::Instruction(format!("expected step reference, got `{tok}`")))
}

/// Machine-readable form of a task instruction.
///
/// Grammar (one instruction per line, whitespace separated):
///
/// ```text
/// lookup <name>                   fact from the initial input
/// search <term>                   tool: document id containing term
/// extract <field> from $j         tool: field value in document $j
/// read_file <path>                tool
/// write_file <path> $j            tool
/// table_sum <table> <col>         tool
/// table_filter <table> <col> <min> tool: rows with col >= min
/// add $a $b | sub $a $b           computed
/// sum $a $b ...                   computed
/// answer $j | answer sum $a $b .. computed
/// report $j [as sentence]         final requirement
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instruction {
    Lookup { name: String },
    Search { term: String },
    Extract { field: String, doc: usize },
    ReadFile { path: String },
    WriteFile { path: String, value: usize },
    TableSum { table: String, column: String },
    TableFilter { table: String, column: String, min: i64 },
    Add(usize, usize),
    Sub(usize, usize),
    Sum(Vec<usize>),
    AnswerValue(usize),
    AnswerSum(Vec<usize>),
    Report { step: usize, sentence: bool },
}

/// Fixed wording of sentence-form final answers.
pub const SENTENCE_PREFIX: &str = "the final result of this workflow is";

impl Instruction {
    pub fn references(&self) -> Vec<Reference> {
        use Instruction::*;
        match self {
            Lookup { name } => vec![Reference::Fact(name.clone())],
            Search { .. } | ReadFile { .. } | TableSum { .. } | TableFilter { .. } => vec![],
            Extract { doc, .. } => vec![Reference::Step(*doc)],
            WriteFile { value, .. } => vec![Reference::Step(*value)],
            Add(a, b) | Sub(a, b) => vec![Reference::Step(*a), Reference::Step(*b)],
            Sum(v) | AnswerSum(v) => v.iter().map(|&j| Reference::Step(j)).collect(),
            AnswerValue(j) | Report { step: j, .. } => vec![Reference::Step(*j)],
        }
    }

    /// Steps this instruction reads, deduplicated.
    pub fn step_refs(&self) -> BTreeSet<usize> {
        self.references()
            .into_iter()
            .filter_map(|r| match r {
                Reference::Step(j) => Some(j),
                Reference::Fact(_) => None,
            })
            .collect()
    }

    pub fn uses_tool(&self) -> bool {
        use Instruction::*;
        matches!(
            self,
            Search { .. } | Extract { .. } | ReadFile { .. } | WriteFile { .. } | TableSum { .. } | TableFilter { .. }
        )
    }

    pub fn kind(&self) -> Option<TaskKind> {
        use Instruction::*;
        Some(match self {
            Lookup { .. } => TaskKind::Lookup,
            Search { .. } => TaskKind::Search,
            Extract { .. } => TaskKind::Extract,
            ReadFile { .. } | WriteFile { .. } => TaskKind::FileOp,
            TableSum { .. } | TableFilter { .. } => TaskKind::TableOp,
            Add(..) | Sub(..) => TaskKind::Arithmetic,
            Sum(_) => TaskKind::Aggregate,
            AnswerValue(_) | AnswerSum(_) => TaskKind::Answer,
            Report { .. } => return None,
        })
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Instruction::*;
        let refs = |v: &[usize]| v.iter().map(|j| step_key(*j)).collect::<Vec<_>>().join(" ");
        match self {
            Lookup { name } => write!(f, "lookup {name}"),
            Search { term } => write!(f, "search {term}"),
            Extract { field, doc } => write!(f, "extract {field} from ${doc}"),
            ReadFile { path } => write!(f, "read_file {path}"),
            WriteFile { path, value } => write!(f, "write_file {path} ${value}"),
            TableSum { table, column } => write!(f, "table_sum {table} {column}"),
            TableFilter { table, column, min } => write!(f, "table_filter {table} {column} {min}"),
            Add(a, b) => write!(f, "add ${a} ${b}"),
            Sub(a, b) => write!(f, "sub ${a} ${b}"),
            Sum(v) => write!(f, "sum {}", refs(v)),
            AnswerValue(j) => write!(f, "answer ${j}"),
            AnswerSum(v) => write!(f, "answer sum {}", refs(v)),
            Report { step, sentence: false } => write!(f, "report ${step}"),
            Report { step, sentence: true } => write!(f, "report ${step} as sentence"),
        }
    }
}

impl FromStr for Instruction {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        use Instruction::*;
        let toks: Vec<&str> = s.split_whitespace().collect();
        let bad = || PlanError::Instruction(format!("cannot parse instruction `{s}`"));
        let refs = |ts: &[&str]| -> Result<Vec<usize>, PlanError> {
            if ts.len() < 2 {
                return Err(bad());
            }
            ts.iter().map(|t| parse_step_ref(t)).collect()
        };
        Ok(match toks.as_slice() {
            ["lookup", name] => Lookup { name: name.to_string() },
            ["search", term] => Search { term: term.to_string() },
            ["extract", field, "from", doc] => Extract { field: field.to_string(), doc: parse_step_ref(doc)? },
            ["read_file", path] => ReadFile { path: path.to_string() },
            ["write_file", path, value] => WriteFile { path: path.to_string(), value: parse_step_ref(value)? },
            ["table_sum", table, column] => TableSum { table: table.to_string(), column: column.to_string() },
            ["table_filter", table, column, min] => TableFilter {
                table: table.to_string(),
                column: column.to_string(),
                min: min.parse().map_err(|_| bad())?,
            },
            ["add", a, b] => Add(parse_step_ref(a)?, parse_step_ref(b)?),
            ["sub", a, b] => Sub(parse_step_ref(a)?, parse_step_ref(b)?),
            ["sum", rest @ ..] => Sum(refs(rest)?),
            ["answer", "sum", rest @ ..] => AnswerSum(refs(rest)?),
            ["answer", j] => AnswerValue(parse_step_ref(j)?),
            ["report", j] => Report { step: parse_step_ref(j)?, sentence: false },
            ["report", j, "as", "sentence"] => Report { step: parse_step_ref(j)?, sentence: true },
            _ => return Err(bad()),
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("plan is empty")]
    Empty,
    #[error("step ids must be 1..n contiguous; found {found} at position {position}")]
    NonContiguous { position: usize, found: usize },
    #[error("step {0} has an empty instruction")]
    EmptyInstruction(usize),
    #[error("step {step} depends on unknown step {dep}")]
    UnknownDependency { step: usize, dep: usize },
    #[error("dependency cycle through step {0}")]
    Cycle(usize),
    #[error("step {step} depends on later step {dep}")]
    ForwardDependency { step: usize, dep: usize },
    #[error("{0}")]
    Instruction(String),
    #[error("step {0} is out of range for a plan of {1} steps")]
    StepOutOfRange(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStep {
    pub id: usize,
    pub instruction: String,
    pub depends_on: BTreeSet<usize>,
    pub kind: TaskKind,
}

impl TaskStep {
    pub fn new(
        id: usize,
        kind: TaskKind,
        instruction: impl Into<String>,
        depends_on: impl IntoIterator<Item = usize>,
    ) -> Self {
        TaskStep { id, instruction: instruction.into(), depends_on: depends_on.into_iter().collect(), kind }
    }

    /// Step whose dependencies are exactly the step references of its instruction.
    pub fn from_instruction(id: usize, ins: &Instruction) -> Self {
        TaskStep::new(id, ins.kind().unwrap_or(TaskKind::Answer), ins.to_string(), ins.step_refs())
    }

    pub fn parsed(&self) -> Result<Instruction, PlanError> {
        self.instruction.parse()
    }

    /// `id. [kind] instruction`, with dependency edges filtered by `keep`.
    pub fn render_line(&self, keep: impl Fn(usize) -> bool) -> String {
        let deps: Vec<String> = self.depends_on.iter().filter(|d| keep(**d)).map(|d| d.to_string()).collect();
        if deps.is_empty() {
            format!("{}. [{}] {}", self.id, self.kind, self.instruction)
        } else {
            format!("{}. [{}] {} (after {})", self.id, self.kind, self.instruction, deps.join(", "))
        }
    }
}

/// Ordered, dependency-annotated task list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PlanRepr", into = "PlanRepr")]
pub struct Plan {
    steps: Vec<TaskStep>,
    description: String,
}

#[derive(Serialize, Deserialize)]
struct PlanRepr {
    steps: Vec<TaskStep>,
    #[serde(default)]
    description: Option<String>,
}

impl TryFrom<PlanRepr> for Plan {
    type Error = PlanError;

    fn try_from(r: PlanRepr) -> Result<Self, Self::Error> {
        let mut plan = Plan::new(r.steps)?;
        if let Some(d) = r.description {
            plan.description = d;
        }
        Ok(plan)
    }
}

impl From<Plan> for PlanRepr {
    fn from(p: Plan) -> Self {
        PlanRepr { steps: p.steps, description: Some(p.description) }
    }
}

impl Plan {
    pub fn new(steps: Vec<TaskStep>) -> Result<Self, PlanError> {
        validate_steps(&steps)?;
        let description = steps.iter().map(|s| s.render_line(|_| true)).collect::<Vec<_>>().join("\n");
        Ok(Plan { steps, description })
    }

    /// Builds a plan from instructions, deriving dependencies from step references.
    pub fn from_instructions(instructions: &[Instruction]) -> Result<Self, PlanError> {
        Plan::new(instructions.iter().enumerate().map(|(i, ins)| TaskStep::from_instruction(i + 1, ins)).collect())
    }

    pub fn steps(&self) -> &[TaskStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// 1-based access.
    pub fn step(&self, id: usize) -> Option<&TaskStep> {
        id.checked_sub(1).and_then(|i| self.steps.get(i))
    }

    pub fn description(&self) -> &str {
        &self.description
    }
}

fn validate_steps(steps: &[TaskStep]) -> Result<(), PlanError> {
    if steps.is_empty() {
        return Err(PlanError::Empty);
    }
    let n = steps.len();
    for (pos, s) in steps.iter().enumerate() {
        if s.id != pos + 1 {
            return Err(PlanError::NonContiguous { position: pos + 1, found: s.id });
        }
        if s.instruction.trim().is_empty() {
            return Err(PlanError::EmptyInstruction(s.id));
        }
        if let Some(&dep) = s.depends_on.iter().find(|&&d| d == 0 || d > n) {
            return Err(PlanError::UnknownDependency { step: s.id, dep });
        }
    }

    // Cycle detection with an explicit three-color DFS.
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let mut marks = vec![Mark::New; n + 1];
    for root in 1..=n {
        if marks[root] != Mark::New {
            continue;
        }
        let mut stack: Vec<(usize, Vec<usize>)> = vec![(root, steps[root - 1].depends_on.iter().copied().collect())];
        marks[root] = Mark::Active;
        while let Some((node, pending)) = stack.last_mut() {
            match pending.pop() {
                Some(next) => match marks[next] {
                    Mark::Active => return Err(PlanError::Cycle(next)),
                    Mark::New => {
                        marks[next] = Mark::Active;
                        let deps = steps[next - 1].depends_on.iter().copied().collect();
                        stack.push((next, deps));
                    }
                    Mark::Done => {}
                },
                None => {
                    marks[*node] = Mark::Done;
                    stack.pop();
                }
            }
        }
    }

    for s in steps {
        if let Some(&dep) = s.depends_on.iter().find(|&&d| d >= s.id) {
            return Err(PlanError::ForwardDependency { step: s.id, dep });
        }
    }
    Ok(())
}

/// A sampled long-horizon task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workflow {
    pub id: String,
    pub initial_input: String,
    pub system_prompt: String,
    pub plan: Plan,
    pub final_requirement: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
}

impl Workflow {
    /// Short textual description handed to judges.
    pub fn describe(&self) -> String {
        format!(
            "workflow {} ({} steps)\n{}\nfinal requirement: {}",
            self.id,
            self.plan.len(),
            self.plan.description(),
            self.final_requirement
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(id: usize, deps: &[usize]) -> TaskStep {
        TaskStep::new(id, TaskKind::Lookup, format!("lookup k{id}"), deps.iter().copied())
    }

    #[test]
    fn instruction_roundtrip_each_form() {
        let forms = [
            "lookup acct",
            "search topic_a",
            "extract price from $2",
            "read_file /data/a.txt",
            "write_file /out/x $3",
            "table_sum t1 x",
            "table_filter t1 x -4",
            "add $1 $2",
            "sub $4 $2",
            "sum $1 $2 $3",
            "answer $1",
            "answer sum $1 $2",
            "report $5",
            "report $5 as sentence",
        ];
        for f in forms {
            let ins: Instruction = f.parse().unwrap();
            assert_eq!(ins.to_string(), f);
        }
        assert!("sum $1".parse::<Instruction>().is_err());
        assert!("add $0 $1".parse::<Instruction>().is_err());
        assert!("fly away".parse::<Instruction>().is_err());
    }

    #[test]
    fn plan_validation() {
        assert_eq!(Plan::new(vec![]), Err(PlanError::Empty));
        assert!(Plan::new(vec![step(1, &[]), step(2, &[1]), step(3, &[1, 2])]).is_ok());
        assert_eq!(
            Plan::new(vec![step(1, &[]), step(3, &[])]),
            Err(PlanError::NonContiguous { position: 2, found: 3 })
        );
        assert_eq!(Plan::new(vec![step(1, &[2]), step(2, &[1])]), Err(PlanError::Cycle(1)));
        assert_eq!(Plan::new(vec![step(1, &[1])]), Err(PlanError::Cycle(1)));
        assert_eq!(Plan::new(vec![step(1, &[2]), step(2, &[])]), Err(PlanError::ForwardDependency { step: 1, dep: 2 }));
        assert_eq!(Plan::new(vec![step(1, &[7])]), Err(PlanError::UnknownDependency { step: 1, dep: 7 }));
        let mut empty = step(1, &[]);
        empty.instruction = "  ".into();
        assert_eq!(Plan::new(vec![empty]), Err(PlanError::EmptyInstruction(1)));
    }

    #[test]
    fn description_lists_edges() {
        let plan = Plan::from_instructions(&[
            "lookup a".parse().unwrap(),
            "lookup b".parse().unwrap(),
            "answer sum $1 $2".parse().unwrap(),
        ])
        .unwrap();
        assert_eq!(
            plan.description(),
            "1. [lookup] lookup a\n2. [lookup] lookup b\n3. [answer] answer sum $1 $2 (after 1, 2)"
        );
    }

    #[test]
    fn plan_serde_revalidates() {
        let plan = Plan::new(vec![step(1, &[]), step(2, &[1])]).unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        assert_eq!(serde_json::from_str::<Plan>(&json).unwrap(), plan);
        let cyclic = r#"{"steps":[{"id":1,"instruction":"lookup a","depends_on":[1],"kind":"lookup"}]}"#;
        assert!(serde_json::from_str::<Plan>(cyclic).is_err());
    }
}
