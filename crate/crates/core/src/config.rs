//! Layered run configuration: defaults < file < environment < flags.
//!
//! Every layer is merged as a TOML tree and the result is deserialized once,
//! so an unknown key in any layer is rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::{Table, Value};

use crate::backends::{BackendKind, RoleModels};
use crate::baselines::BaselineConfig;
use crate::evolution::EvolutionConfig;
use crate::executor::RunConfig;
use crate::scoring::Thresholds;
use crate::synth::GeneratorConfig;

pub const ENV_PREFIX: &str = "PAACE_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid override `{0}`; expected key.path=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Settings of the in-process mock backends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    /// Probability that the rule judge softens a "worse" verdict to "equal".
    pub judge_leniency: f64,
    /// Scripted agent without reasoning lines.
    pub terse_agent: bool,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig { judge_leniency: 0.0, terse_agent: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaaceConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub run: RunConfig,
    pub thresholds: Thresholds,
    pub baselines: BaselineConfig,
    pub evolution: EvolutionConfig,
    pub backends: RoleModels,
    pub mock: MockConfig,
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses a scalar as a TOML literal, falling back to a bare string.
fn literal(raw: &str) -> Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn nested(path: &[&str], value: Value) -> Table {
    let mut t = Table::new();
    match path {
        [last] => {
            t.insert((*last).to_string(), value);
        }
        [head, rest @ ..] => {
            t.insert((*head).to_string(), Value::Table(nested(rest, value)));
        }
        [] => {}
    }
    t
}

/// `key.path=value` into a one-branch tree.
pub fn parse_override(s: &str) -> Result<Table, ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::Override(s.into()))?;
    let path: Vec<&str> = k.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(s.into()));
    }
    Ok(nested(&path, literal(v.trim())))
}

/// `PAACE_RUN__K=3` sets `run.k`. Only variables whose first segment names a
/// top-level key are read, since secrets share the prefix.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<Table> {
    let defaults = Value::try_from(PaaceConfig::default()).expect("defaults serialize");
    let top: Vec<String> = defaults.as_table().map(|t| t.keys().cloned().collect()).unwrap_or_default();
    let mut out: Vec<(String, Table)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?.to_lowercase();
            let path: Vec<&str> = rest.split("__").collect();
            (top.iter().any(|t| t == path[0]) && path.iter().all(|p| !p.is_empty()))
                .then(|| (k.clone(), nested(&path, literal(&v))))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out.into_iter().map(|(_, t)| t).collect()
}

impl PaaceConfig {
    /// Resolves the layers. `file` is optional; `env` is usually `std::env::vars()`.
    pub fn load(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: &[String],
    ) -> Result<Self, ConfigError> {
        let mut tree = match Value::try_from(PaaceConfig::default()) {
            Ok(Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        };
        if let Some(p) = file {
            let text = std::fs::read_to_string(p)
                .map_err(|source| ConfigError::Read { path: p.display().to_string(), source })?;
            let t: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
            merge(&mut tree, t);
        }
        for t in env_overrides(env) {
            merge(&mut tree, t);
        }
        for f in flags {
            merge(&mut tree, parse_override(f)?);
        }
        let cfg: PaaceConfig =
            Value::Table(tree).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: PaaceConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        self.generator.validate().map_err(|e| inv(e.to_string()))?;
        self.run.validate().map_err(|e| inv(e.to_string()))?;
        self.thresholds.validate().map_err(inv)?;
        self.baselines.validate().map_err(inv)?;
        self.evolution.validate().map_err(|e| inv(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.mock.judge_leniency) {
            return Err(inv(format!("mock.judge_leniency must lie in [0, 1], got {}", self.mock.judge_leniency)));
        }
        if self.backends.kind == BackendKind::Http {
            let b = &self.backends;
            for (role, c) in [
                ("agent", &b.agent),
                ("teacher", &b.teacher),
                ("judge", b.judge()),
                ("embedder", &b.embedder),
                ("mutator", b.mutator()),
                ("student", b.student()),
            ] {
                c.validate().map_err(|e| inv(format!("backends.{role}: {e}")))?;
                c.token().map_err(|e| inv(format!("backends.{role}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short content hash identifying the configuration in reports.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}
