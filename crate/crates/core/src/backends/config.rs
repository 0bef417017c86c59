use serde::{Deserialize, Serialize};

use super::BackendError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Deterministic in-process mocks.
    #[default]
    Mock,
    Http,
}

/// Connection settings for an OpenAI-compatible service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: Option<String>,
    pub timeout_secs: f64,
    pub retries: u32,
    pub max_concurrency: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            auth_env: None,
            timeout_secs: 60.0,
            retries: 2,
            max_concurrency: 4,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_concurrency < 1 {
            return Err(BackendError::InvalidRequest("max_concurrency must be at least 1".into()));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(BackendError::InvalidRequest("timeout_secs must be positive".into()));
        }
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(BackendError::InvalidRequest(format!("endpoint `{}` is not an http(s) URL", self.endpoint)));
        }
        Ok(())
    }

    /// Bearer token, if an env var name is configured. A configured but unset
    /// variable is an error rather than a silent anonymous request.
    pub fn token(&self) -> Result<Option<String>, BackendError> {
        match &self.auth_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| BackendError::InvalidRequest(format!("environment variable {var} is not set"))),
        }
    }
}

/// Per-role service settings. The judge defaults to the teacher's endpoint.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoleModels {
    pub kind: BackendKind,
    pub agent: BackendConfig,
    pub teacher: BackendConfig,
    pub judge: Option<BackendConfig>,
    pub embedder: BackendConfig,
    pub mutator: Option<BackendConfig>,
    pub student: Option<BackendConfig>,
}

impl RoleModels {
    pub fn judge(&self) -> &BackendConfig {
        self.judge.as_ref().unwrap_or(&self.teacher)
    }

    pub fn mutator(&self) -> &BackendConfig {
        self.mutator.as_ref().unwrap_or(&self.teacher)
    }

    pub fn student(&self) -> &BackendConfig {
        self.student.as_ref().unwrap_or(&self.teacher)
    }
}
