//! The session driver: observe, ask the head, execute, remember, repeat.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::watch;

use cfagent_core::cf::SelectionPolicy;
use cfagent_core::events::{ThoughtBody, ToolCallBody, ToolResultBody};
use cfagent_core::schema::{validate_against_schema, Violation};
use cfagent_core::stubs::{Region, NO_FINDING};
use cfagent_core::{
    Action, AgentState, ArgType, ArgValue, ArtifactId, Clock, EventKind, MemoryEntry, Query, SessionLog, ToolResult,
    ToolSchema,
};

use crate::engine::CfEngine;
use crate::head::{transcribe_context, Head, HeadDecision, HeadError, CONTEXT_WINDOW};
use crate::stub_server::REPORT;
use crate::toolwire::Toolwire;

pub const CF_WORKFLOW: &str = "cf_workflow";
pub const GENERIC_PROMPT: &str = "Normal chest X-ray with no finding";
pub const DEFAULT_T_MAX: usize = 12;

pub const CODE_INVALID_ACTION: &str = "invalid_action";
pub const CODE_UNPARSEABLE: &str = "unparseable_action";
pub const CODE_BUDGET: &str = "budget_exhausted";
/// Pseudo-tool recorded for head replies that never parsed.
pub const UNPARSEABLE_TOOL: &str = "unparseable";

pub fn cf_workflow_schema() -> ToolSchema {
    ToolSchema::new("{best, difference_map, candidates, report}")
        .required("image", ArgType::Artifact)
        .optional("prompt", ArgType::String)
        .optional("cx", ArgType::Real)
        .optional("cy", ArgType::Real)
        .optional("r", ArgType::Real)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalMode {
    #[default]
    Auto,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub t_max: usize,
    pub policy: SelectionPolicy,
    pub approval_mode: ApprovalMode,
    pub context_window: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            t_max: DEFAULT_T_MAX,
            policy: SelectionPolicy::default(),
            approval_mode: ApprovalMode::Auto,
            context_window: CONTEXT_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeKind {
    FinalAnswer { text: String, artifacts: Vec<ArtifactId> },
    Timeout { summary: String, aborted: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    #[serde(flatten)]
    pub kind: OutcomeKind,
    pub steps_used: usize,
    pub memory: Vec<MemoryEntry>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("t_max must be at least 1")]
    BadConfig,
    #[error("head failed: {0}")]
    HeadFailed(#[from] HeadError),
    #[error("event log: {0}")]
    Store(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlCommand {
    Pause,
    Resume,
    Approve,
    Abort,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ControlError {
    #[error("session is not paused")]
    NotPaused,
    #[error("session has finished")]
    Finished,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ControlState {
    pub paused: bool,
    pub aborted: bool,
    pub approvals: u64,
    pub finished: bool,
}

/// Operator handle on a running session.
#[derive(Debug, Clone)]
pub struct SessionControl {
    tx: Arc<watch::Sender<ControlState>>,
}

impl Default for SessionControl {
    fn default() -> Self {
        Self::new()
    }
}

impl SessionControl {
    pub fn new() -> Self {
        Self { tx: Arc::new(watch::Sender::new(ControlState::default())) }
    }

    pub fn state(&self) -> ControlState {
        *self.tx.borrow()
    }

    pub fn send(&self, command: ControlCommand) -> Result<(), ControlError> {
        let mut result = Ok(());
        self.tx.send_if_modified(|s| {
            if s.finished {
                result = Err(ControlError::Finished);
                return false;
            }
            match command {
                ControlCommand::Pause => s.paused = true,
                ControlCommand::Resume if !s.paused => {
                    result = Err(ControlError::NotPaused);
                    return false;
                }
                ControlCommand::Resume => s.paused = false,
                ControlCommand::Approve => s.approvals += 1,
                ControlCommand::Abort => s.aborted = true,
            }
            true
        });
        result
    }

    fn finish(&self) {
        self.tx.send_modify(|s| s.finished = true);
    }

    fn subscribe(&self) -> watch::Receiver<ControlState> {
        self.tx.subscribe()
    }
}

/// Edit instruction derived from report findings.
pub fn refine_prompt(findings: &str) -> String {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"^(.+?) in (\S+) quadrant$").expect("findings pattern"));
    let findings = findings.trim();
    if findings.is_empty() || findings.eq_ignore_ascii_case(NO_FINDING) {
        return GENERIC_PROMPT.to_string();
    }
    match re.captures(findings) {
        Some(c) => format!("remove {} in {} region", &c[1], &c[2]),
        None => format!("remove {findings}"),
    }
}

/// Most recent successful report observation.
fn last_report(memory: &[MemoryEntry]) -> Option<&Value> {
    memory
        .iter()
        .rev()
        .find(|m| m.result.ok && m.action.tool_name() == REPORT)
        .map(|m| &m.result.payload)
}

fn region_from_args(args: &BTreeMap<String, ArgValue>) -> Option<Region> {
    let get = |k: &str| args.get(k).and_then(ArgValue::as_f64);
    Some(Region { cx: get("cx")?, cy: get("cy")?, r: get("r")? })
}

/// Editor frames already spent in this session.
pub fn editor_calls(memory: &[MemoryEntry], editors: &[String]) -> usize {
    memory
        .iter()
        .map(|m| {
            let tool = m.action.tool_name();
            if tool == CF_WORKFLOW {
                m.result.payload.pointer("/report/editor_calls").and_then(Value::as_u64).unwrap_or(0) as usize
            } else if editors.iter().any(|e| e == tool)
                && !matches!(m.result.error_code(), Some(CODE_INVALID_ACTION | CODE_BUDGET))
            {
                1
            } else {
                0
            }
        })
        .sum()
}

/// Line used when a session ends without a final answer.
pub fn timeout_summary(memory: &[MemoryEntry], aborted: bool) -> String {
    let mut out = String::new();
    if aborted {
        writeln!(out, "aborted after {} steps", memory.len()).expect("string write");
    } else {
        writeln!(out, "no final answer after {} steps", memory.len()).expect("string write");
    }
    if let Some(last) = memory.last() {
        let detail = match &last.result.error {
            None => serde_json::to_string(&last.result.payload).expect("payload serializes"),
            Some(e) => e.message.clone(),
        };
        let detail: String = detail.chars().take(200).collect();
        writeln!(out, "last observation: {} {}", last.result.status_line(), detail).expect("string write");
    }
    for m in memory {
        writeln!(out, "step {}: {}", m.step, m.result.status_line()).expect("string write");
    }
    let mut table: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for m in memory {
        let row = table.entry(m.action.tool_name()).or_default();
        if m.result.ok {
            row.0 += 1;
        } else {
            row.1 += 1;
        }
    }
    for (tool, (ok, err)) in table {
        writeln!(out, "{tool}: {ok} ok, {err} error").expect("string write");
    }
    out
}

/// Shared services a session driver needs.
pub struct Agent {
    tools: Arc<Toolwire>,
    engine: Arc<CfEngine>,
    clock: Arc<dyn Clock>,
}

impl Agent {
    pub fn new(tools: Arc<Toolwire>, engine: Arc<CfEngine>, clock: Arc<dyn Clock>) -> Self {
        Self { tools, engine, clock }
    }

    pub fn tools(&self) -> &Arc<Toolwire> {
        &self.tools
    }

    pub fn engine(&self) -> &Arc<CfEngine> {
        &self.engine
    }

    /// Schemas the head may call, including the workflow pseudo-tool.
    pub fn schemas(&self) -> BTreeMap<String, ToolSchema> {
        let mut all = self.tools.schemas();
        all.insert(CF_WORKFLOW.into(), cf_workflow_schema());
        all
    }

    /// Head-facing tool listing: name plus schema.
    pub fn tool_listing(&self) -> Vec<Value> {
        self.schemas()
            .into_iter()
            .map(|(name, s)| json!({"name": name, "args": s.args, "returns": s.returns}))
            .collect()
    }

    pub fn observe(&self, query: &Query, memory: &[MemoryEntry], cfg: &LoopConfig) -> AgentState {
        let spent = editor_calls(memory, &self.engine.config().editors);
        AgentState {
            query: query.clone(),
            context: transcribe_context(query, memory, cfg.context_window),
            memory_len: memory.len(),
            budget: cfg.policy.budget.saturating_sub(spent),
        }
    }

    /// Validates and runs one action. Never fails: problems become error
    /// observations.
    pub async fn execute(
        &self,
        action: &Action,
        state: &AgentState,
        memory: &[MemoryEntry],
        cfg: &LoopConfig,
        log: Option<&SessionLog>,
    ) -> ToolResult {
        let started = self.clock.now_ms();
        let Action::Call { tool, args } = action else {
            return ToolResult::failure(action.tool_name(), CODE_INVALID_ACTION, "final_answer is not executable", 0);
        };
        let schemas = self.schemas();
        let Some(schema) = schemas.get(tool) else {
            return ToolResult::failure(tool, CODE_INVALID_ACTION, format!("unknown tool {tool}"), 0);
        };
        if let Err(violations) = validate_against_schema(action, schema) {
            let text: Vec<String> = violations.iter().map(Violation::to_string).collect();
            return ToolResult::failure(tool, CODE_INVALID_ACTION, text.join("; "), 0);
        }
        let is_editor = self.engine.config().editors.iter().any(|e| e == tool);
        if (is_editor || tool == CF_WORKFLOW) && state.budget == 0 {
            return ToolResult::failure(tool, CODE_BUDGET, "editor budget for this session is spent", 0);
        }
        if tool == CF_WORKFLOW {
            return self.run_workflow(args, state, memory, cfg, log, started).await;
        }
        let payload = Value::Object(args.iter().map(|(k, v)| (k.clone(), v.to_json())).collect());
        self.tools.invoke_with_fallback(tool, &payload).await.result
    }

    async fn run_workflow(
        &self,
        args: &BTreeMap<String, ArgValue>,
        state: &AgentState,
        memory: &[MemoryEntry],
        cfg: &LoopConfig,
        log: Option<&SessionLog>,
        started: u64,
    ) -> ToolResult {
        let image = args.get("image").and_then(ArgValue::as_artifact).expect("schema requires image").clone();
        let report = last_report(memory);
        let region = region_from_args(args)
            .or_else(|| report.and_then(|r| serde_json::from_value::<Region>(r.get("region")?.clone()).ok()));
        let prompt = match args.get("prompt") {
            Some(ArgValue::Str(p)) => p.clone(),
            _ => refine_prompt(report.and_then(|r| r.get("findings")?.as_str()).unwrap_or(NO_FINDING)),
        };
        let policy = SelectionPolicy { budget: state.budget.min(cfg.policy.budget), ..cfg.policy };
        let outcome = self.engine.run_workflow(&image, &prompt, region, &policy, log).await;
        let latency = self.clock.now_ms().saturating_sub(started);
        match outcome {
            Ok(report) => ToolResult::success(CF_WORKFLOW, report.payload(), latency),
            Err(e) => ToolResult::failure(CF_WORKFLOW, e.code(), e.to_string(), latency),
        }
    }

    /// Runs one session to completion. Appends `session_created` first if
    /// the log is still empty.
    pub async fn run_session(
        &self,
        query: &Query,
        head: &mut dyn Head,
        cfg: &LoopConfig,
        log: &SessionLog,
        control: Option<&SessionControl>,
    ) -> Result<SessionOutcome, AgentError> {
        let outcome = self.drive(query, head, cfg, log, control).await;
        if let Some(c) = control {
            c.finish();
        }
        if let Err(e) = &outcome {
            let _ = log.append(EventKind::Control, json!({"state": "failed", "error": e.to_string()}));
        }
        outcome
    }

    async fn drive(
        &self,
        query: &Query,
        head: &mut dyn Head,
        cfg: &LoopConfig,
        log: &SessionLog,
        control: Option<&SessionControl>,
    ) -> Result<SessionOutcome, AgentError> {
        if cfg.t_max == 0 {
            return Err(AgentError::BadConfig);
        }
        let append = |kind: EventKind, body: Value| log.append(kind, body).map_err(|e| AgentError::Store(e.to_string()));
        if log.is_empty() {
            append(EventKind::SessionCreated, json!({"session": query.session, "config": cfg}))?;
        }
        append(EventKind::QueryReceived, json!({"query": query}))?;
        let mut rx = control.map(SessionControl::subscribe);
        let mut approvals_used = 0u64;
        let mut memory: Vec<MemoryEntry> = Vec::new();

        for step in 0..cfg.t_max {
            if let Some(rx) = rx.as_mut() {
                if rx.borrow().paused && !rx.borrow().aborted {
                    append(EventKind::Control, json!({"state": "paused", "step": step}))?;
                    let _ = rx.wait_for(|s| !s.paused || s.aborted).await;
                    if !rx.borrow().aborted {
                        append(EventKind::Control, json!({"state": "resumed", "step": step}))?;
                    }
                }
                if rx.borrow().aborted {
                    return self.abort(memory, step, log);
                }
            }
            let state = self.observe(query, &memory, cfg);
            let decision = match head.next_decision(&state, &memory).await {
                Ok(d) => d,
                Err(HeadError::UnparseableAfterRetries { reply, error, .. }) => HeadDecision {
                    thought: format!("reply could not be parsed: {error}"),
                    action: Action::call(UNPARSEABLE_TOOL, [("text", ArgValue::Str(reply))]),
                },
                Err(e) => return Err(e.into()),
            };
            append(EventKind::Thought, serde_json::to_value(ThoughtBody { step, thought: decision.thought.clone() }).expect("body"))?;
            if let Action::Final { answer, artifacts } = &decision.action {
                append(EventKind::FinalAnswer, json!({"step": step, "answer": answer, "artifacts": artifacts}))?;
                return Ok(SessionOutcome {
                    kind: OutcomeKind::FinalAnswer { text: answer.clone(), artifacts: artifacts.clone() },
                    steps_used: memory.len(),
                    memory,
                });
            }
            append(EventKind::ToolCall, serde_json::to_value(ToolCallBody { step, action: decision.action.clone() }).expect("body"))?;
            if cfg.approval_mode == ApprovalMode::Manual {
                if let Some(rx) = rx.as_mut() {
                    append(EventKind::Control, json!({"state": "awaiting_approval", "step": step}))?;
                    let _ = rx.wait_for(|s| s.approvals > approvals_used || s.aborted).await;
                    if rx.borrow().aborted {
                        return self.abort(memory, step, log);
                    }
                    approvals_used += 1;
                    append(EventKind::Control, json!({"state": "approved", "step": step}))?;
                }
            }
            if rx.as_ref().is_some_and(|rx| rx.borrow().aborted) {
                return self.abort(memory, step, log);
            }
            let result = if decision.action.tool_name() == UNPARSEABLE_TOOL {
                ToolResult::failure(UNPARSEABLE_TOOL, CODE_UNPARSEABLE, decision.thought.clone(), 0)
            } else {
                self.execute(&decision.action, &state, &memory, cfg, Some(log)).await
            };
            append(EventKind::ToolResult, serde_json::to_value(ToolResultBody { step, result: result.clone() }).expect("body"))?;
            memory.push(MemoryEntry { step, thought: decision.thought, action: decision.action, result });
        }
        let summary = timeout_summary(&memory, false);
        append(EventKind::Timeout, json!({"summary": summary, "steps_used": memory.len(), "aborted": false}))?;
        Ok(SessionOutcome { kind: OutcomeKind::Timeout { summary, aborted: false }, steps_used: memory.len(), memory })
    }

    fn abort(&self, memory: Vec<MemoryEntry>, step: usize, log: &SessionLog) -> Result<SessionOutcome, AgentError> {
        let summary = timeout_summary(&memory, true);
        let store = |e: cfagent_core::events::EventLogError| AgentError::Store(e.to_string());
        log.append(EventKind::Control, json!({"state": "aborted", "step": step})).map_err(store)?;
        log.append(EventKind::Timeout, json!({"summary": summary, "steps_used": memory.len(), "aborted": true}))
            .map_err(store)?;
        Ok(SessionOutcome { kind: OutcomeKind::Timeout { summary, aborted: true }, steps_used: memory.len(), memory })
    }
}

