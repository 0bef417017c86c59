//! Wiring from configuration to services and context strategies.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backends::{
    BackendError, BackendKind, CompletionBackend, Embedder, HashEmbedder, HttpBackend, HttpEmbedder, Judge, LlmJudge,
    LlmMutator, MockMutator, MockSummarizer, MockTeacher, PromptMutator, RuleJudge, ScriptedAgent,
};
use crate::config::PaaceConfig;
use crate::evolution::DEFAULT_SEED_PROMPT;
use crate::executor::{run_compressed, run_full, Baseline, CompressorHandle, ExecError};
use crate::model::{Trajectory, Workflow};
use crate::synth::WorldState;

/// The model services a run talks to.
#[derive(Clone)]
pub struct Services {
    pub agent: Arc<dyn CompletionBackend>,
    pub teacher: Arc<dyn CompletionBackend>,
    pub student: Arc<dyn CompletionBackend>,
    /// Answers the prompting baseline's summary requests.
    pub summarizer: Arc<dyn CompletionBackend>,
    pub judge: Arc<dyn Judge>,
    pub embedder: Arc<dyn Embedder>,
    pub mutator: Arc<dyn PromptMutator>,
}

impl Services {
    pub fn mock(cfg: &PaaceConfig) -> Self {
        let agent = if cfg.mock.terse_agent { ScriptedAgent::terse() } else { ScriptedAgent::default() };
        let judge = if cfg.mock.judge_leniency > 0.0 {
            RuleJudge::lenient(cfg.mock.judge_leniency, cfg.seed)
        } else {
            RuleJudge::strict()
        };
        Services {
            agent: Arc::new(agent),
            teacher: Arc::new(MockTeacher::new()),
            student: Arc::new(MockTeacher::student()),
            summarizer: Arc::new(MockSummarizer::default()),
            judge: Arc::new(judge),
            embedder: Arc::new(HashEmbedder::default()),
            mutator: Arc::new(MockMutator),
        }
    }

    /// Mocks or HTTP clients per `backends.kind`. With `trace_dir`, HTTP
    /// traffic is logged (redacted) to `<role>.trace.jsonl` files there.
    pub fn from_config(cfg: &PaaceConfig, trace_dir: Option<&Path>) -> Result<Self, BackendError> {
        if cfg.backends.kind == BackendKind::Mock {
            return Ok(Services::mock(cfg));
        }
        let b = &cfg.backends;
        let traced = |role: &str, c| -> Result<Arc<dyn CompletionBackend>, BackendError> {
            let h = HttpBackend::new(c)?;
            Ok(match trace_dir {
                Some(d) => h
                    .with_trace(&d.join(format!("{role}.trace.jsonl")))
                    .map_err(|e| BackendError::Transport(e.to_string()))?
                    .shared(),
                None => h.shared(),
            })
        };
        let agent = traced("agent", b.agent.clone())?;
        let teacher = traced("teacher", b.teacher.clone())?;
        let student = traced("student", b.student().clone())?;
        let judge = traced("judge", b.judge().clone())?;
        let mutator = traced("mutator", b.mutator().clone())?;
        let mut embedder = HttpEmbedder::new(b.embedder.clone())?;
        if let Some(d) = trace_dir {
            embedder = embedder
                .with_trace(&d.join("embedder.trace.jsonl"))
                .map_err(|e| BackendError::Transport(e.to_string()))?;
        }
        Ok(Services {
            summarizer: agent.clone(),
            agent,
            teacher,
            student,
            judge: Arc::new(LlmJudge::new(judge)),
            embedder: Arc::new(embedder),
            mutator: Arc::new(LlmMutator::new(mutator)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    None,
    Fifo,
    Retrieval,
    Prompting,
    Extractive,
    PaaceOracle,
    PaaceTeacher,
    PaaceStudent,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::None,
        Strategy::Fifo,
        Strategy::Retrieval,
        Strategy::Prompting,
        Strategy::Extractive,
        Strategy::PaaceOracle,
        Strategy::PaaceTeacher,
        Strategy::PaaceStudent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Fifo => "fifo",
            Strategy::Retrieval => "retrieval",
            Strategy::Prompting => "prompting",
            Strategy::Extractive => "extractive",
            Strategy::PaaceOracle => "paace-oracle",
            Strategy::PaaceTeacher => "paace-teacher",
            Strategy::PaaceStudent => "paace-student",
        }
    }

    /// Name used in reports; the extractive baseline is a lightweight stand-in
    /// and says so.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::Extractive => "extractive-lite",
            s => s.as_str(),
        }
    }

    /// Strategies whose successful runs can become supervision.
    pub fn is_paace(self) -> bool {
        matches!(self, Strategy::PaaceOracle | Strategy::PaaceTeacher | Strategy::PaaceStudent)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL.into_iter().find(|x| x.as_str() == s).ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

/// The teacher prompt a run uses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherPrompt {
    pub prompt_id: String,
    pub text: String,
}

impl Default for TeacherPrompt {
    fn default() -> Self {
        TeacherPrompt { prompt_id: "p0000".into(), text: DEFAULT_SEED_PROMPT.into() }
    }
}

/// Compressor for a strategy; `None` for the uncompressed run.
pub fn strategy_handle(
    s: Strategy,
    cfg: &PaaceConfig,
    svc: &Services,
    prompt: &TeacherPrompt,
) -> Option<CompressorHandle> {
    let k = cfg.run.k;
    let b = &cfg.baselines;
    Some(match s {
        Strategy::None => return None,
        Strategy::Fifo => CompressorHandle::baseline(Baseline::Fifo { turns: b.fifo_turns }, k),
        Strategy::Retrieval => CompressorHandle::baseline(Baseline::Retrieval { top_m: b.retrieval_top_m }, k)
            .with_embedder(svc.embedder.clone()),
        Strategy::Prompting => {
            CompressorHandle::baseline(Baseline::Prompting { instruction: b.prompting_instruction.clone() }, k)
                .with_backend(svc.summarizer.clone())
        }
        Strategy::Extractive => {
            CompressorHandle::baseline(Baseline::Extractive { keep_fraction: b.extractive_keep_fraction }, k)
        }
        Strategy::PaaceOracle => CompressorHandle::oracle(k),
        Strategy::PaaceTeacher => CompressorHandle::teacher(&prompt.prompt_id, &prompt.text, svc.teacher.clone(), k),
        Strategy::PaaceStudent => CompressorHandle::student(svc.student.clone(), k),
    })
}

pub fn run_strategy(
    s: Strategy,
    w: &Workflow,
    world: &WorldState,
    cfg: &PaaceConfig,
    svc: &Services,
    prompt: &TeacherPrompt,
) -> Result<Trajectory, ExecError> {
    match strategy_handle(s, cfg, svc, prompt) {
        None => run_full(w, world, svc.agent.as_ref(), &cfg.run),
        Some(h) => run_compressed(w, world, svc.agent.as_ref(), &h, &cfg.run),
    }
}
