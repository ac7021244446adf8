use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::action::Action;
use crate::image::ArtifactId;

pub type SessionId = String;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ArtifactId>,
    pub session: SessionId,
}

impl Query {
    pub fn new(text: impl Into<String>, image: Option<ArtifactId>, session: impl Into<String>) -> Result<Self, EmptyQuery> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(EmptyQuery);
        }
        Ok(Self {
            text,
            image,
            session: session.into(),
        })
    }
}

#[derive(Debug, thiserror::Error, Clone, Copy, PartialEq, Eq)]
#[error("query text must be non-empty")]
pub struct EmptyQuery;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolError {
    pub code: String,
    pub message: String,
}

/// Outcome of one tool execution. `ok` is true exactly when `error` is
/// absent; use the constructors to keep that so.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub tool: String,
    pub ok: bool,
    #[serde(default)]
    pub payload: Value,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ToolError>,
}

impl ToolResult {
    pub fn success(tool: impl Into<String>, payload: Value, latency_ms: u64) -> Self {
        Self {
            tool: tool.into(),
            ok: true,
            payload,
            latency_ms,
            error: None,
        }
    }

    pub fn failure(tool: impl Into<String>, code: impl Into<String>, message: impl Into<String>, latency_ms: u64) -> Self {
        Self {
            tool: tool.into(),
            ok: false,
            payload: Value::Null,
            latency_ms,
            error: Some(ToolError {
                code: code.into(),
                message: message.into(),
            }),
        }
    }

    pub fn error_code(&self) -> Option<&str> {
        self.error.as_ref().map(|e| e.code.as_str())
    }

    /// One-line `tool(name) → ok/error` form used for older context entries.
    pub fn status_line(&self) -> String {
        match &self.error {
            None => format!("tool({}) → ok", self.tool),
            Some(e) => format!("tool({}) → error:{}", self.tool, e.code),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub step: usize,
    pub thought: String,
    pub action: Action,
    pub result: ToolResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub query: Query,
    pub context: String,
    pub memory_len: usize,
    pub budget: usize,
}

/// String-keyed metadata helpers for scene ground truth.
pub fn meta_f64(meta: &BTreeMap<String, String>, key: &str) -> Option<f64> {
    meta.get(key).and_then(|v| v.parse().ok())
}
