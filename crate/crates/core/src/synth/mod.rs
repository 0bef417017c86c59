//! Synthetic workflow environment with a machine-checkable ground truth.

mod generator;
mod oracle;
mod world;

pub use generator::{generate_workflow, is_distractor_name, GeneratorConfig, GeneratorError, DEFAULT_SYSTEM_PROMPT};
pub use oracle::{format_answer, oracle_answer, oracle_trace, OracleError, OracleTrace};
pub use world::{apply_tool, Row, ToolCall, ToolKind, ToolResult, WorldState, INVALID_CALL, NOT_FOUND};
