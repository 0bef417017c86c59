use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use super::{
    BackendConfig, BackendError, CompletionBackend, CompletionRequest, CompletionResponse, Embedder, EmbeddingVector,
};

/// Counting semaphore bounding in-flight requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Gate { free: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

struct Client {
    cfg: BackendConfig,
    token: Option<String>,
    http: reqwest::blocking::Client,
    gate: Gate,
    trace: Option<Mutex<File>>,
}

impl Client {
    fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let token = cfg.token()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let gate = Gate::new(cfg.max_concurrency);
        Ok(Client { cfg, token, http, gate, trace: None })
    }

    fn redact(&self, text: &str) -> String {
        match &self.token {
            Some(t) if !t.is_empty() => text.replace(t.as_str(), "[REDACTED]"),
            _ => text.to_string(),
        }
    }

    fn log(&self, direction: &str, url: &str, body: &str) {
        let Some(trace) = &self.trace else { return };
        let line = json!({ "direction": direction, "url": url, "body": self.redact(body) });
        let mut f = trace.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(e) = writeln!(f, "{line}") {
            tracing::warn!(error = %e, "could not write trace record");
        }
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = format!("{}/{}", self.cfg.endpoint.trim_end_matches('/'), path);
        let payload = body.to_string();
        let _permit = self.gate.acquire();
        let mut last = BackendError::Transport("no attempt made".into());
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50u64 << attempt.min(6)));
            }
            self.log("request", &url, &payload);
            let mut rb = self.http.post(&url).header("content-type", "application/json").body(payload.clone());
            if let Some(t) = &self.token {
                rb = rb.bearer_auth(t);
            }
            let resp = match rb.send() {
                Ok(r) => r,
                Err(e) => {
                    last = BackendError::Transport(e.to_string());
                    continue;
                }
            };
            let status = resp.status();
            let text = match resp.text() {
                Ok(t) => t,
                Err(e) => {
                    last = BackendError::Transport(e.to_string());
                    continue;
                }
            };
            self.log("response", &url, &text);
            if status.is_server_error() || status.as_u16() == 429 {
                last = BackendError::Transport(format!("{url} answered {status}"));
                continue;
            }
            if !status.is_success() {
                return Err(BackendError::Protocol(format!("{url} answered {status}: {}", self.redact(&text))));
            }
            return serde_json::from_str(&text)
                .map_err(|e| BackendError::Protocol(format!("{url} returned invalid JSON: {e}")));
        }
        Err(last)
    }
}

/// OpenAI-compatible chat-completions client.
pub struct HttpBackend {
    client: Client,
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        Ok(HttpBackend { client: Client::new(cfg)? })
    }

    /// Appends redacted request and response bodies to `path` as JSON lines.
    pub fn with_trace(mut self, path: &Path) -> std::io::Result<Self> {
        self.client.trace = Some(Mutex::new(OpenOptions::new().create(true).append(true).open(path)?));
        Ok(self)
    }

    pub fn shared(self) -> Arc<dyn CompletionBackend> {
        Arc::new(self)
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        req.check()?;
        let body = json!({
            "model": self.client.cfg.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let v = self.client.post("chat/completions", &body)?;
        let text = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Protocol("response has no choices[0].message.content".into()))?
            .to_string();
        let counted = CompletionResponse::counted(req, text);
        let usage = |k: &str| v.pointer(&format!("/usage/{k}")).and_then(Value::as_u64).map(|n| n as usize);
        Ok(CompletionResponse {
            prompt_tokens: usage("prompt_tokens").unwrap_or(counted.prompt_tokens),
            completion_tokens: usage("completion_tokens").unwrap_or(counted.completion_tokens),
            text: counted.text,
        })
    }
}

/// OpenAI-compatible embeddings client.
pub struct HttpEmbedder {
    client: Client,
}

impl HttpEmbedder {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        Ok(HttpEmbedder { client: Client::new(cfg)? })
    }

    pub fn with_trace(mut self, path: &Path) -> std::io::Result<Self> {
        self.client.trace = Some(Mutex::new(OpenOptions::new().create(true).append(true).open(path)?));
        Ok(self)
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector<f64>, BackendError> {
        let body = json!({ "model": self.client.cfg.model, "input": text });
        let v = self.client.post("embeddings", &body)?;
        let values = v
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Protocol("response has no data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| BackendError::Protocol("non-numeric embedding component".into())))
            .collect::<Result<Vec<f64>, _>>()?;
        Ok(EmbeddingVector::new(values))
    }
}
