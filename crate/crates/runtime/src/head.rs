//! Decision heads: a scripted test double and a remote HTTP endpoint, plus
//! the context transcription both of them consume.

use std::fmt::Write as _;
use std::sync::OnceLock;
use std::time::Duration;

use async_trait::async_trait;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use cfagent_core::{parse_action, render_arg, Action, AgentState, ArgValue, MemoryEntry, ParseError, Query};

/// Entries rendered verbatim at the end of the context.
pub const CONTEXT_WINDOW: usize = 8;
/// Re-prompts after an unparseable remote reply.
pub const REPROMPTS: usize = 2;

const MAX_THOUGHT_CHARS: usize = 512;
const MAX_RESULT_CHARS: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadDecision {
    pub thought: String,
    pub action: Action,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error("scenario {0} has no matching step and no usable fallback")]
    ScenarioExhausted(String),
    #[error("template: {0}")]
    Template(String),
    #[error("remote head unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("remote reply unparseable after {attempts} attempts: {error}")]
    UnparseableAfterRetries { attempts: usize, reply: String, error: ParseError },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("scenario is not valid JSON: {0}")]
    Json(String),
    #[error("scenario {0} has no steps")]
    NoSteps(String),
    #[error("scenario {name}: fallback must be a final_answer")]
    FallbackNotFinal { name: String },
    #[error("scenario {name}, {place}: {message}")]
    BadTemplate { name: String, place: String, message: String },
}

#[async_trait]
pub trait Head: Send {
    async fn next_decision(&mut self, state: &AgentState, memory: &[MemoryEntry]) -> Result<HeadDecision, HeadError>;
}

fn truncate(s: &str, max_chars: usize) -> String {
    match s.char_indices().nth(max_chars) {
        None => s.to_string(),
        Some((cut, _)) => format!("{}…", &s[..cut]),
    }
}

/// Prompt text for the head: query and image, a one-line status for each
/// entry older than the last `k`, and the last `k` entries in full.
pub fn transcribe_context(query: &Query, memory: &[MemoryEntry], k: usize) -> String {
    let mut out = String::new();
    writeln!(out, "query: {}", query.text).expect("string write");
    match &query.image {
        Some(id) => writeln!(out, "image: {}", id.to_ref()),
        None => writeln!(out, "image: none"),
    }
    .expect("string write");
    if memory.is_empty() {
        return out;
    }
    let split = memory.len().saturating_sub(k);
    if split > 0 {
        out.push_str("earlier steps:\n");
        for entry in &memory[..split] {
            writeln!(out, "- step {}: {}", entry.step, entry.result.status_line()).expect("string write");
        }
    }
    out.push_str("recent steps:\n");
    for entry in &memory[split..] {
        writeln!(out, "- step {}", entry.step).expect("string write");
        writeln!(out, "  thought: {}", truncate(&entry.thought, MAX_THOUGHT_CHARS)).expect("string write");
        writeln!(out, "  action: {}", entry.action).expect("string write");
        match &entry.result.error {
            None => {
                let payload = serde_json::to_string(&entry.result.payload).expect("payload serializes");
                writeln!(out, "  result: ok {}", truncate(&payload, MAX_RESULT_CHARS))
            }
            Some(e) => writeln!(out, "  result: error {}: {}", e.code, truncate(&e.message, MAX_RESULT_CHARS)),
        }
        .expect("string write");
    }
    out
}

/// Conditions on the state; every field that is present must hold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepMatch {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_contains: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_regex: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_tool: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_ok: Option<bool>,
}

/// Decision with `${image}` and `${last.<path>}` placeholders in the
/// action text. Placeholders stand for whole values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTemplate {
    pub thought: String,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    #[serde(rename = "match", default)]
    pub when: StepMatch,
    pub decision: DecisionTemplate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedScenario {
    pub name: String,
    pub steps: Vec<ScriptStep>,
    pub fallback: DecisionTemplate,
}

fn placeholder() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\$\{([a-z_][a-z0-9_.]*)\}").expect("placeholder pattern"))
}

fn lookup<'a>(mut value: &'a Value, path: &str) -> Option<&'a Value> {
    for part in path.split('.') {
        value = match value {
            Value::Object(m) => m.get(part)?,
            Value::Array(items) => items.get(part.parse::<usize>().ok()?)?,
            _ => return None,
        };
    }
    Some(value)
}

fn expand(template: &str, query: &Query, memory: &[MemoryEntry]) -> Result<String, HeadError> {
    let mut failure = None;
    let text = placeholder().replace_all(template, |caps: &regex::Captures<'_>| {
        let key = &caps[1];
        let rendered = if key == "image" {
            query.image.as_ref().map(|id| id.to_ref()).ok_or_else(|| "query has no image".to_string())
        } else if let Some(path) = key.strip_prefix("last.") {
            memory
                .last()
                .ok_or_else(|| "no previous step".to_string())
                .and_then(|m| lookup(&m.result.payload, path).ok_or_else(|| format!("last result has no {path}")))
                .and_then(|v| ArgValue::from_json(v).ok_or_else(|| format!("{path} is not an argument value")))
                .map(|v| render_arg(&v))
        } else {
            Err(format!("unknown placeholder {key}"))
        };
        rendered.unwrap_or_else(|e| {
            failure.get_or_insert(e);
            String::new()
        })
    });
    match failure {
        Some(e) => Err(HeadError::Template(e)),
        None => Ok(text.into_owned()),
    }
}

impl StepMatch {
    pub fn matches(&self, state: &AgentState, memory: &[MemoryEntry]) -> bool {
        if self.memory_len.is_some_and(|n| n != state.memory_len) {
            return false;
        }
        if self.context_contains.as_ref().is_some_and(|s| !state.context.contains(s.as_str())) {
            return false;
        }
        if let Some(pattern) = &self.context_regex {
            match Regex::new(pattern) {
                Ok(re) if re.is_match(&state.context) => {}
                _ => return false,
            }
        }
        let last = memory.last();
        if let Some(tool) = &self.last_tool {
            if last.is_none_or(|m| m.action.tool_name() != tool) {
                return false;
            }
        }
        if let Some(ok) = self.last_ok {
            if last.is_none_or(|m| m.result.ok != ok) {
                return false;
            }
        }
        true
    }
}

impl ScriptedScenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Self = serde_json::from_str(text).map_err(|e| ScenarioError::Json(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Structural checks: steps exist, regexes compile, and every action
    /// template parses once placeholders are filled.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.steps.is_empty() {
            return Err(ScenarioError::NoSteps(self.name.clone()));
        }
        let bad = |place: String, message: String| ScenarioError::BadTemplate { name: self.name.clone(), place, message };
        let sample = |t: &DecisionTemplate, place: String| {
            let filled = placeholder().replace_all(&t.action, "@0");
            parse_action(&filled).map_err(|e| bad(place, e.to_string()))
        };
        for (i, step) in self.steps.iter().enumerate() {
            sample(&step.decision, format!("step {i}"))?;
            if let Some(p) = &step.when.context_regex {
                Regex::new(p).map_err(|e| bad(format!("step {i}"), e.to_string()))?;
            }
        }
        if !sample(&self.fallback, "fallback".into())?.is_final() {
            return Err(ScenarioError::FallbackNotFinal { name: self.name.clone() });
        }
        Ok(())
    }

    /// Every action text the scenario can emit, with placeholders filled
    /// by a dummy artifact.
    pub fn sample_actions(&self) -> Vec<Action> {
        self.steps
            .iter()
            .map(|s| &s.decision)
            .chain(std::iter::once(&self.fallback))
            .filter_map(|t| parse_action(&placeholder().replace_all(&t.action, "@0")).ok())
            .collect()
    }
}

const BUILTIN: [(&str, &str); 6] = [
    ("immediate-final", include_str!("../scenarios/immediate-final.json")),
    ("happy-edit", include_str!("../scenarios/happy-edit.json")),
    ("never-final", include_str!("../scenarios/never-final.json")),
    ("failing-tool", include_str!("../scenarios/failing-tool.json")),
    ("ambiguous-query", include_str!("../scenarios/ambiguous-query.json")),
    ("generic-baseline", include_str!("../scenarios/generic-baseline.json")),
];

pub fn builtin_names() -> Vec<&'static str> {
    BUILTIN.iter().map(|(n, _)| *n).collect()
}

pub fn builtin_scenario(name: &str) -> Option<ScriptedScenario> {
    BUILTIN
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| ScriptedScenario::from_json(text).expect("builtin scenarios are valid"))
}

/// Plays a scenario: the first unfired step whose predicate holds fires,
/// otherwise the fallback.
#[derive(Debug, Clone)]
pub struct ScriptedHead {
    scenario: ScriptedScenario,
    fired: Vec<bool>,
}

impl ScriptedHead {
    pub fn new(scenario: ScriptedScenario) -> Self {
        let fired = vec![false; scenario.steps.len()];
        Self { scenario, fired }
    }

    pub fn scenario(&self) -> &ScriptedScenario {
        &self.scenario
    }

    pub fn decide(&mut self, state: &AgentState, memory: &[MemoryEntry]) -> Result<HeadDecision, HeadError> {
        let chosen = self
            .scenario
            .steps
            .iter()
            .enumerate()
            .find(|(i, s)| !self.fired[*i] && s.when.matches(state, memory))
            .map(|(i, s)| (Some(i), &s.decision))
            .unwrap_or((None, &self.scenario.fallback));
        let (index, template) = chosen;
        let text = expand(&template.action, &state.query, memory)?;
        let action = parse_action(&text).map_err(|e| HeadError::Template(format!("{text}: {e}")))?;
        if index.is_none() && !action.is_final() {
            return Err(HeadError::ScenarioExhausted(self.scenario.name.clone()));
        }
        if let Some(i) = index {
            self.fired[i] = true;
        }
        Ok(HeadDecision { thought: template.thought.clone(), action })
    }
}

#[async_trait]
impl Head for ScriptedHead {
    async fn next_decision(&mut self, state: &AgentState, memory: &[MemoryEntry]) -> Result<HeadDecision, HeadError> {
        self.decide(state, memory)
    }
}

#[derive(Debug, Serialize)]
struct RemoteRequest<'a> {
    context: &'a str,
    tools: &'a [Value],
}

#[derive(Debug, Deserialize)]
struct RemoteReply {
    thought: String,
    action: String,
}

/// Head backed by an HTTP endpoint that answers `{thought, action}`.
#[derive(Debug, Clone)]
pub struct RemoteHead {
    client: reqwest::Client,
    url: String,
    tools: Vec<Value>,
}

impl RemoteHead {
    /// `tools` is the listing sent with every request.
    pub fn new(url: impl Into<String>, timeout_ms: u64, tools: Vec<Value>) -> Result<Self, HeadError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(timeout_ms))
            .build()
            .map_err(|e| HeadError::RemoteUnavailable(e.to_string()))?;
        Ok(Self { client, url: url.into(), tools })
    }

    async fn ask(&self, context: &str) -> Result<RemoteReply, HeadError> {
        let unavailable = |e: reqwest::Error| HeadError::RemoteUnavailable(e.to_string());
        self.client
            .post(&self.url)
            .json(&RemoteRequest { context, tools: &self.tools })
            .send()
            .await
            .map_err(unavailable)?
            .error_for_status()
            .map_err(unavailable)?
            .json::<RemoteReply>()
            .await
            .map_err(unavailable)
    }
}

#[async_trait]
impl Head for RemoteHead {
    async fn next_decision(&mut self, state: &AgentState, _memory: &[MemoryEntry]) -> Result<HeadDecision, HeadError> {
        let mut context = state.context.clone();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let reply = self.ask(&context).await?;
            match parse_action(&reply.action) {
                Ok(action) => return Ok(HeadDecision { thought: reply.thought, action }),
                Err(error) if attempt > REPROMPTS => {
                    return Err(HeadError::UnparseableAfterRetries { attempts: attempt, reply: reply.action, error })
                }
                Err(error) => {
                    context = format!(
                        "{}\nprevious reply could not be parsed ({error}): {}\nreply with exactly one action.\n",
                        state.context, reply.action
                    );
                }
            }
        }
    }
}
