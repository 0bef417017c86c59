//! Model-service abstraction: completion, embedding, judging and prompt mutation.
//!
//! Every role has a deterministic mock used by tests and desk-scale runs, and an
//! HTTP implementation speaking the OpenAI-compatible wire format.

mod config;
mod embed;
mod http;
mod judge;
mod mutator;
mod scripted;
mod teacher;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{BackendConfig, BackendKind, RoleModels};
pub use embed::{fnv1a64, EmbeddingVector, HashEmbedder, DEFAULT_EMBEDDING_DIM};
pub use http::{HttpBackend, HttpEmbedder};
pub use judge::{JudgeLabel, JudgeRequest, JudgeVerdict, LlmJudge, RuleJudge};
pub use mutator::{LlmMutator, MockMutator, MutationRequest, DIRECTIVES, PLANTED_DIRECTIVE};
pub use scripted::{final_task_message, step_task_message, ScriptedAgent};
pub use teacher::{
    compression_input, slice_tasks, split_compression_input, MockSummarizer, MockTeacher, TeacherPolicy,
    CONTEXT_HEADER, NEXT_TASKS_HEADER,
};

use crate::tokens::token_count;

/// Agent output line prefix signalling that a required fact is absent.
pub const MISSING_FACT: &str = "MISSING_FACT:";
/// Agent output line prefix for a present but unusable input.
pub const INVALID_INPUT: &str = "INVALID_INPUT:";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Network failure, timeout or retry budget exhausted.
    #[error("transport error: {0}")]
    Transport(String),
    /// The service answered with something we cannot interpret.
    #[error("protocol error: {0}")]
    Protocol(String),
    /// The request violated a precondition.
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn is_transport(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message { role: "user".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<Message>,
    pub max_tokens: usize,
    pub temperature: f64,
}

impl CompletionRequest {
    pub fn new(messages: Vec<Message>) -> Self {
        CompletionRequest { messages, max_tokens: 1024, temperature: 0.0 }
    }

    pub fn system_text(&self) -> Option<&str> {
        self.messages.iter().find(|m| m.role == "system").map(|m| m.content.as_str())
    }

    pub fn last_user_text(&self) -> Option<&str> {
        self.messages.iter().rev().find(|m| m.role == "user").map(|m| m.content.as_str())
    }

    pub(crate) fn check(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            Err(BackendError::InvalidRequest("messages must be non-empty".into()))
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

impl CompletionResponse {
    /// Response with locally counted tokens.
    pub fn counted(req: &CompletionRequest, text: String) -> Self {
        let prompt_tokens = req.messages.iter().map(|m| token_count(&m.content)).sum();
        let completion_tokens = token_count(&text);
        CompletionResponse { text, prompt_tokens, completion_tokens }
    }
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError>;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector<f64>, BackendError>;
}

pub trait Judge: Send + Sync {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeVerdict, BackendError>;
}

pub trait PromptMutator: Send + Sync {
    /// Candidate prompts distinct from the parent. Failures yield an empty list.
    fn propose(&self, req: &MutationRequest) -> Vec<String>;
}

impl<T: CompletionBackend + ?Sized> CompletionBackend for std::sync::Arc<T> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        (**self).complete(req)
    }
}

impl<T: Embedder + ?Sized> Embedder for std::sync::Arc<T> {
    fn embed(&self, text: &str) -> Result<EmbeddingVector<f64>, BackendError> {
        (**self).embed(text)
    }
}

impl<T: Judge + ?Sized> Judge for std::sync::Arc<T> {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeVerdict, BackendError> {
        (**self).judge(req)
    }
}

/// Last non-empty line of an agent response, trimmed.
pub fn final_line(text: &str) -> &str {
    text.lines().rev().map(str::trim).find(|l| !l.is_empty()).unwrap_or("")
}
