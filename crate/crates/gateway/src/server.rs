//! HTTP service: session lifecycle, NDJSON event streams, artifact PNGs,
//! tool listing and health.

use std::collections::HashMap;
use std::convert::Infallible;
use std::future::Future;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, Query as UrlQuery, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use cfagent_core::events::EventLogError;
use cfagent_core::{ArtifactId, ArtifactStore, Clock, EventKind, EventStore, Query, SessionLog, SystemClock};
use cfagent_runtime::agent::{Agent, ControlCommand, ControlError, ControlState, LoopConfig, SessionControl, SessionOutcome, CF_WORKFLOW};
use cfagent_runtime::engine::CfEngine;
use cfagent_runtime::head::{Head, RemoteHead, ScriptedHead};
use cfagent_runtime::suite::{build_toolwire, SuiteHooks};
use cfagent_runtime::toolwire::{RegistryError, Toolwire};

use crate::config::{ConfigError, ServerConfig};
use crate::render::{render_png, Colormap};

pub const NDJSON: &str = "application/x-ndjson";

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot bind {0}: {1}")]
    BindFailure(String, std::io::Error),
    #[error("tool spawn failed: {0}")]
    ToolSpawnFailure(#[from] RegistryError),
    #[error("storage: {0}")]
    Storage(String),
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

struct SessionEntry {
    log: Arc<SessionLog>,
    control: SessionControl,
    query: Query,
    cfg: LoopConfig,
    len: Arc<watch::Sender<u64>>,
    outcome: Mutex<Option<Result<SessionOutcome, String>>>,
}

impl SessionEntry {
    fn status(&self, id: &str) -> Value {
        let outcome = self.outcome.lock().expect("outcome lock").clone();
        let (state, outcome, error) = match outcome {
            None => ("running", Value::Null, Value::Null),
            Some(Ok(o)) => ("finished", json!(o), Value::Null),
            Some(Err(e)) => ("failed", Value::Null, json!(e)),
        };
        json!({
            "id": id,
            "state": state,
            "query": self.query,
            "config": self.cfg,
            "events": self.log.len(),
            "closed": self.log.is_closed(),
            "control": self.control.state(),
            "outcome": outcome,
            "error": error,
        })
    }
}

/// Shared state behind every handler.
pub struct AppState {
    config: ServerConfig,
    agent: Arc<Agent>,
    store: Arc<ArtifactStore>,
    events: EventStore,
    clock: Arc<dyn Clock>,
    sessions: RwLock<HashMap<String, Arc<SessionEntry>>>,
    tasks: Mutex<Vec<JoinHandle<()>>>,
    counter: AtomicU64,
    draining: AtomicBool,
}

impl AppState {
    /// Opens the stores, starts the tool servers and connects to each.
    pub async fn start(config: ServerConfig, stub_program: &Path) -> Result<Arc<Self>, ServeError> {
        config.validate()?;
        let clock: Arc<dyn Clock> = Arc::new(SystemClock);
        let store = Arc::new(ArtifactStore::open(config.artifact_dir()).map_err(|e| ServeError::Storage(e.to_string()))?);
        let events = EventStore::open(config.session_dir(), clock.clone()).map_err(|e| ServeError::Storage(e.to_string()))?;
        let descriptors = config.resolved_tools(stub_program);
        let tools = build_toolwire(&descriptors, config.capacities.clone(), &store, clock.clone(), &SuiteHooks::default())?;
        tools.connect_all().await?;
        let tools = Arc::new(tools);
        let engine = Arc::new(CfEngine::new(tools.clone(), store.clone(), config.engine.clone()));
        let agent = Arc::new(Agent::new(tools, engine, clock.clone()));
        Ok(Arc::new(Self {
            config,
            agent,
            store,
            events,
            clock,
            sessions: RwLock::new(HashMap::new()),
            tasks: Mutex::new(Vec::new()),
            counter: AtomicU64::new(0),
            draining: AtomicBool::new(false),
        }))
    }

    pub fn store(&self) -> &Arc<ArtifactStore> {
        &self.store
    }

    pub fn tools(&self) -> &Arc<Toolwire> {
        self.agent.tools()
    }

    fn session(&self, id: &str) -> Result<Arc<SessionEntry>, ApiError> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))
    }

    fn next_id(&self) -> String {
        let n = self.counter.fetch_add(1, Ordering::SeqCst);
        format!("s{}-{n:04}", self.clock.now_ms())
    }

    /// Stops accepting sessions, aborts the running ones and waits for their
    /// drivers. Each driver finishes its in-flight step first.
    pub async fn drain(&self) {
        self.draining.store(true, Ordering::SeqCst);
        for entry in self.sessions.read().expect("sessions lock").values() {
            let _ = entry.control.send(ControlCommand::Abort);
        }
        let tasks = std::mem::take(&mut *self.tasks.lock().expect("tasks lock"));
        for task in tasks {
            let _ = task.await;
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message}))).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/tools", get(tools))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_status))
        .route("/sessions/{id}/events", get(session_events))
        .route("/sessions/{id}/control", post(session_control))
        .route("/sessions/{id}/report", get(session_report))
        .route("/artifacts/{file}", get(artifact_png))
        .with_state(state)
}

fn tool_health(state: &AppState) -> Vec<Value> {
    let tools = state.tools();
    tools
        .listing()
        .iter()
        .map(|d| json!({"name": d.name, "health": tools.health(&d.name).ok(), "calls": tools.calls(&d.name)}))
        .collect()
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({"status": "ok", "tools": tool_health(&state)}))
}

async fn tools(State(state): State<Arc<AppState>>) -> Json<Value> {
    let tw = state.tools();
    let listing: Vec<Value> = tw
        .listing()
        .iter()
        .map(|d| {
            json!({
                "name": d.name,
                "schema": d.schema,
                "capacity_class": d.capacity_class,
                "fallbacks": d.fallbacks,
                "timeout_ms": d.timeout_ms,
                "health": tw.health(&d.name).ok(),
            })
        })
        .collect();
    Json(json!({"tools": listing, "capacities": tw.capacities()}))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub query: String,
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default, rename = "loop")]
    pub loop_overrides: Option<Value>,
}

/// Applies a partial loop config object on top of `base`, one level deep
/// for nested objects.
pub fn merge_loop(base: &LoopConfig, overrides: Option<&Value>) -> Result<LoopConfig, String> {
    let Some(overrides) = overrides else { return Ok(*base) };
    let Value::Object(patch) = overrides else { return Err("loop overrides must be an object".into()) };
    let mut merged = serde_json::to_value(base).expect("loop config serializes");
    let target = merged.as_object_mut().expect("loop config is an object");
    for (key, value) in patch {
        match (target.get_mut(key), value) {
            (Some(Value::Object(inner)), Value::Object(sub)) => {
                inner.extend(sub.clone());
            }
            (Some(slot), _) => *slot = value.clone(),
            (None, _) => return Err(format!("unknown loop setting {key}")),
        }
    }
    let cfg: LoopConfig = serde_json::from_value(merged).map_err(|e| e.to_string())?;
    if cfg.t_max == 0 {
        return Err("t_max must be at least 1".into());
    }
    cfg.policy.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn parse_artifact(s: &str) -> Result<ArtifactId, ApiError> {
    let id = if s.starts_with('@') { ArtifactId::from_ref(s) } else { ArtifactId::new(s) };
    id.map_err(|e| ApiError::bad_request(e.to_string()))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, axum::extract::rejection::JsonRejection>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    if state.draining.load(Ordering::SeqCst) {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "server is shutting down"));
    }
    let cfg = merge_loop(&state.config.loop_defaults, req.loop_overrides.as_ref()).map_err(ApiError::bad_request)?;
    let image = req.image.as_deref().map(parse_artifact).transpose()?;
    if let Some(id) = &image {
        if !state.store.contains(id) {
            return Err(ApiError::bad_request(format!("unknown artifact {id}")));
        }
    }
    let head: Box<dyn Head> = match (&req.scenario, &state.config.head) {
        (Some(name), _) => {
            let scenario = state.config.scenario(name).map_err(|e| ApiError::bad_request(e.to_string()))?;
            Box::new(ScriptedHead::new(scenario))
        }
        (None, Some(h)) => Box::new(
            RemoteHead::new(h.url.clone(), h.timeout_ms, state.agent.tool_listing())
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?,
        ),
        (None, None) => return Err(ApiError::bad_request("no head configured; name a scenario")),
    };
    let id = state.next_id();
    let query = Query::new(req.query, image, id.clone()).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let log = state.events.create(&id).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let len = Arc::new(watch::Sender::new(0u64));
    let feed = len.clone();
    log.on_append(move |n| {
        feed.send_replace(n);
    });
    let control = SessionControl::new();
    let entry = Arc::new(SessionEntry { log, control, query, cfg, len, outcome: Mutex::new(None) });
    // Event 0 is written before the id is handed out.
    entry
        .log
        .append(EventKind::SessionCreated, json!({"session": id, "config": cfg}))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    state.sessions.write().expect("sessions lock").insert(id.clone(), entry.clone());

    let task_state = state.clone();
    let task_id = id.clone();
    let task = tokio::spawn(async move {
        let mut head = head;
        tracing::info!(session = %task_id, "session started");
        let result = task_state
            .agent
            .run_session(&entry.query, head.as_mut(), &entry.cfg, &entry.log, Some(&entry.control))
            .await
            .map_err(|e| e.to_string());
        match &result {
            Ok(o) => tracing::info!(session = %task_id, steps = o.steps_used, "session finished"),
            Err(e) => tracing::warn!(session = %task_id, error = %e, "session failed"),
        }
        *entry.outcome.lock().expect("outcome lock") = Some(result);
        entry.log.close();
    });
    state.tasks.lock().expect("tasks lock").push(task);
    Ok((StatusCode::CREATED, Json(json!({"id": id}))))
}

async fn session_status(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    Ok(Json(state.session(&id)?.status(&id)))
}

#[derive(Debug, Deserialize)]
pub struct EventsParams {
    #[serde(default)]
    pub from: u64,
}

struct Tail {
    log: Arc<SessionLog>,
    rx: watch::Receiver<u64>,
    next: u64,
}

/// Lines from `next` onwards, then a wait for more until the log closes.
async fn next_chunk(mut tail: Tail) -> Option<(Result<Bytes, Infallible>, Tail)> {
    loop {
        tail.rx.borrow_and_update();
        let lines = tail.log.lines_from(tail.next);
        if !lines.is_empty() {
            tail.next += lines.len() as u64;
            let mut chunk = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
            for line in &lines {
                chunk.push_str(line);
                chunk.push('\n');
            }
            return Some((Ok(Bytes::from(chunk)), tail));
        }
        if tail.log.is_closed() {
            return None;
        }
        if tail.rx.changed().await.is_err() {
            return None;
        }
    }
}

async fn session_events(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    UrlQuery(params): UrlQuery<EventsParams>,
) -> Result<Response, ApiError> {
    let entry = state.session(&id)?;
    let tail = Tail { log: entry.log.clone(), rx: entry.len.subscribe(), next: params.from };
    let stream = futures::stream::unfold(tail, next_chunk);
    Ok(([(header::CONTENT_TYPE, NDJSON), (header::CACHE_CONTROL, "no-cache")], Body::from_stream(stream)).into_response())
}

#[derive(Debug, Deserialize)]
pub struct ControlRequest {
    pub command: ControlCommand,
}

async fn session_control(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<ControlRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<ControlState>, ApiError> {
    let entry = state.session(&id)?;
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    match entry.control.send(req.command) {
        Ok(()) => Ok(Json(entry.control.state())),
        Err(e @ (ControlError::NotPaused | ControlError::Finished)) => Err(ApiError::new(StatusCode::CONFLICT, e.to_string())),
    }
}

/// The report of the session's last successful workflow call.
pub fn latest_report(log: &SessionLog) -> Option<Value> {
    log.records().into_iter().rev().find_map(|r| {
        let result = &r.body["result"];
        (r.kind == EventKind::ToolResult && result["tool"] == CF_WORKFLOW && result["ok"] == true)
            .then(|| result["payload"]["report"].clone())
    })
}

async fn session_report(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    let entry = state.session(&id)?;
    latest_report(&entry.log).map(Json).ok_or_else(|| ApiError::not_found("no counterfactual report yet"))
}

#[derive(Debug, Deserialize)]
pub struct PngParams {
    pub map: Option<String>,
}

async fn artifact_png(
    State(state): State<Arc<AppState>>,
    UrlPath(file): UrlPath<String>,
    UrlQuery(params): UrlQuery<PngParams>,
) -> Result<Response, ApiError> {
    let hex = file.strip_suffix(".png").unwrap_or(&file);
    let id = ArtifactId::new(hex).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let map: Colormap = params.map.as_deref().unwrap_or("gray").parse().map_err(ApiError::bad_request)?;
    let image = state.store.get(&id).map_err(|_| ApiError::not_found(format!("unknown artifact {hex}")))?;
    let bytes = render_png(&image, map);
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

/// Serves until `shutdown` resolves, then drains sessions and closes.
pub async fn serve_on(
    state: Arc<AppState>,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let drain_state = state.clone();
    let app = router(state);
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            shutdown.await;
            tracing::info!("shutting down; draining sessions");
            drain_state.drain().await;
        })
        .await?;
    Ok(())
}

/// Binds the configured address and serves until `shutdown` resolves.
pub async fn serve(
    config: ServerConfig,
    stub_program: &Path,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let listener = TcpListener::bind(&config.listen).await.map_err(|e| ServeError::BindFailure(config.listen.clone(), e))?;
    let state = AppState::start(config, stub_program).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    serve_on(state, listener, shutdown).await
}

/// Resolves on SIGTERM or ctrl-c.
pub async fn termination() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    {
        let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()).expect("signal handler");
        tokio::select! {
            _ = ctrl_c => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    ctrl_c.await;
}

impl From<EventLogError> for ServeError {
    fn from(e: EventLogError) -> Self {
        ServeError::Storage(e.to_string())
    }
}
