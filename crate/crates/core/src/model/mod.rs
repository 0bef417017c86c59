//! Domain types shared by the whole pipeline.

mod context;
mod plan;
mod trajectory;

pub use context::{
    facts_in_rendered, parse_fact_line, render_context, split_tag, ContextState, Entry, CALL_PREFIX, SECTION_HISTORY,
    SECTION_INPUT, SECTION_MEMORY, SECTION_OBSERVATIONS, SECTION_PLAN, SECTION_RETRIEVED, SECTION_SYSTEM,
};
pub use plan::{step_key, Instruction, Plan, PlanError, Reference, TaskKind, TaskStep, Workflow, SENTENCE_PREFIX};
pub use trajectory::{
    compression_ratio, is_valid_compression, CompressionRecord, StepRecord, Trajectory, TrajectoryMode,
};
