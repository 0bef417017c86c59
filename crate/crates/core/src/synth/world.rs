//! Simulated tool world.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tokens::token_count;

pub const NOT_FOUND: &str = "NOT_FOUND:";
pub const INVALID_CALL: &str = "INVALID_CALL:";

pub type Row = BTreeMap<String, i64>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub kv: BTreeMap<String, String>,
    pub documents: BTreeMap<String, String>,
    pub tables: BTreeMap<String, Vec<Row>>,
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    Lookup,
    Search,
    ReadFile,
    WriteFile,
    TableSum,
    TableFilter,
    Extract,
}

impl ToolKind {
    pub const ALL: [ToolKind; 7] = [
        ToolKind::Lookup,
        ToolKind::Search,
        ToolKind::ReadFile,
        ToolKind::WriteFile,
        ToolKind::TableSum,
        ToolKind::TableFilter,
        ToolKind::Extract,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolKind::Lookup => "lookup",
            ToolKind::Search => "search",
            ToolKind::ReadFile => "read_file",
            ToolKind::WriteFile => "write_file",
            ToolKind::TableSum => "table_sum",
            ToolKind::TableFilter => "table_filter",
            ToolKind::Extract => "extract",
        }
    }

    pub fn is_read_only(self) -> bool {
        self != ToolKind::WriteFile
    }
}

impl FromStr for ToolKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ToolKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unsupported tool `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub kind: ToolKind,
    pub arguments: BTreeMap<String, String>,
}

impl ToolCall {
    pub fn new<'a>(kind: ToolKind, args: impl IntoIterator<Item = (&'a str, String)>) -> Self {
        ToolCall { kind, arguments: args.into_iter().map(|(k, v)| (k.to_string(), v)).collect() }
    }

    fn arg(&self, name: &str) -> Result<&str, ToolResult> {
        self.arguments.get(name).map(String::as_str).ok_or_else(|| ToolResult::new(format!("{INVALID_CALL}{name}")))
    }
}

/// `CALL kind key=value ...`
impl fmt::Display for ToolCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CALL {}", self.kind.as_str())?;
        for (k, v) in &self.arguments {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

impl FromStr for ToolCall {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut toks = s.split_whitespace();
        if toks.next() != Some("CALL") {
            return Err(format!("not a tool call: `{s}`"));
        }
        let kind: ToolKind = toks.next().ok_or("tool call without a tool")?.parse()?;
        let mut arguments = BTreeMap::new();
        for t in toks {
            let (k, v) = t.split_once('=').ok_or_else(|| format!("bad argument `{t}`"))?;
            arguments.insert(k.to_string(), v.to_string());
        }
        Ok(ToolCall { kind, arguments })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolResult {
    pub payload: String,
    pub tokens: usize,
}

impl ToolResult {
    pub fn new(payload: impl Into<String>) -> Self {
        let payload = payload.into();
        let tokens = token_count(&payload);
        ToolResult { payload, tokens }
    }

    fn not_found(what: &str) -> Self {
        ToolResult::new(format!("{NOT_FOUND}{what}"))
    }

    pub fn is_error(&self) -> bool {
        self.payload.starts_with(NOT_FOUND) || self.payload.starts_with(INVALID_CALL)
    }
}

/// Applies a tool call. Read-only kinds return `None` for the world; `write_file`
/// returns the updated world. Missing objects yield `NOT_FOUND:<name>` payloads.
pub fn apply_tool(world: &WorldState, call: &ToolCall) -> (ToolResult, Option<WorldState>) {
    if call.kind == ToolKind::WriteFile {
        let args = call.arg("path").and_then(|p| call.arg("content").map(|c| (p, c)));
        return match args {
            Ok((path, content)) => {
                let mut next = world.clone();
                next.files.insert(path.to_string(), content.to_string());
                (ToolResult::new(format!("OK:{path}")), Some(next))
            }
            Err(bad) => (bad, None),
        };
    }
    (read_tool(world, call).unwrap_or_else(|e| e), None)
}

impl WorldState {
    /// In-place variant of [`apply_tool`].
    pub fn apply(&mut self, call: &ToolCall) -> ToolResult {
        let (result, next) = apply_tool(self, call);
        if let Some(next) = next {
            *self = next;
        }
        result
    }
}

fn read_tool(world: &WorldState, call: &ToolCall) -> Result<ToolResult, ToolResult> {
    Ok(match call.kind {
        ToolKind::Lookup => {
            let key = call.arg("key")?;
            world.kv.get(key).map(ToolResult::new).unwrap_or_else(|| ToolResult::not_found(key))
        }
        ToolKind::Search => {
            let term = call.arg("term")?;
            world
                .documents
                .iter()
                .find(|(_, text)| text.split_whitespace().any(|w| w == term))
                .map(|(id, _)| ToolResult::new(id.clone()))
                .unwrap_or_else(|| ToolResult::not_found(term))
        }
        ToolKind::Extract => {
            let doc = call.arg("doc")?;
            let field = call.arg("field")?;
            let text = world.documents.get(doc).ok_or_else(|| ToolResult::not_found(doc))?;
            text.split_whitespace()
                .find_map(|w| w.strip_prefix(field).and_then(|r| r.strip_prefix('=')))
                .map(|v| ToolResult::new(v.trim_end_matches(['.', ','])))
                .unwrap_or_else(|| ToolResult::not_found(field))
        }
        ToolKind::ReadFile => {
            let path = call.arg("path")?;
            world.files.get(path).map(|c| ToolResult::new(c.trim())).unwrap_or_else(|| ToolResult::not_found(path))
        }
        ToolKind::TableSum | ToolKind::TableFilter => {
            let table = call.arg("table")?;
            let col = call.arg("col")?;
            let rows = world.tables.get(table).ok_or_else(|| ToolResult::not_found(table))?;
            let cells: Vec<i64> = rows.iter().filter_map(|r| r.get(col).copied()).collect();
            if cells.is_empty() {
                return Err(ToolResult::not_found(col));
            }
            if call.kind == ToolKind::TableSum {
                ToolResult::new(cells.iter().sum::<i64>().to_string())
            } else {
                let min: i64 = call.arg("min")?.parse().map_err(|_| ToolResult::new(format!("{INVALID_CALL}min")))?;
                ToolResult::new(cells.iter().filter(|&&v| v >= min).count().to_string())
            }
        }
        ToolKind::WriteFile => unreachable!("handled by apply_tool"),
    })
}
