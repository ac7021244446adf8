//! Tool registry with per-class worker slots, health tracking and
//! fallback chains.

use std::collections::{BTreeMap, BTreeSet};
use std::process::Stdio;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::sync::Semaphore;

use cfagent_core::{Clock, ToolResult, ToolSchema};

use crate::wire::{serve_connection, Connection, FrameHandler, RequestFrame, ServerOptions, WireError};

/// Consecutive transport failures before a tool is marked unhealthy.
pub const FAILURE_THRESHOLD: u32 = 3;
/// Wait between probes of an unhealthy tool.
pub const COOLDOWN_MS: u64 = 5_000;

pub const CODE_TIMEOUT: &str = "timeout";
pub const CODE_CRASHED: &str = "crashed";
pub const CODE_MALFORMED: &str = "malformed";
pub const CODE_UNHEALTHY: &str = "unhealthy";
pub const CODE_UNKNOWN_TOOL: &str = "unknown_tool";
pub const CODE_ALL_FAILED: &str = "all_fallbacks_failed";

/// Where a tool's servers live, as written in configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointSpec {
    Subprocess { command: Vec<String> },
    Tcp { addr: String },
    Inproc { stub: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub name: String,
    pub schema: ToolSchema,
    pub endpoint: EndpointSpec,
    pub capacity_class: String,
    pub timeout_ms: u64,
    #[serde(default)]
    pub fallbacks: Vec<String>,
    /// Independent server connections behind this tool.
    #[serde(default = "one")]
    pub instances: usize,
}

fn one() -> usize {
    1
}

/// Resolved transport for a tool's instances.
#[derive(Clone)]
pub enum Endpoint {
    Subprocess { program: String, args: Vec<String> },
    Tcp { addr: String },
    Local { handler: Arc<dyn FrameHandler>, options: ServerOptions },
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Subprocess { program, args } => write!(f, "Subprocess({program} {args:?})"),
            Endpoint::Tcp { addr } => write!(f, "Tcp({addr})"),
            Endpoint::Local { .. } => write!(f, "Local"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("tool {0} already registered")]
    DuplicateName(String),
    #[error("fallback chain is cyclic: {0:?}")]
    CyclicFallback(Vec<String>),
    #[error("tool {tool} uses unknown capacity class {class}")]
    UnknownClass { tool: String, class: String },
    #[error("fallback {fallback} of {tool} has a different schema")]
    IncompatibleFallback { tool: String, fallback: String },
    #[error("tool {tool} names unregistered fallback {fallback}")]
    UnknownFallback { tool: String, fallback: String },
    #[error("tool {0}: instances and timeout must be at least 1")]
    BadLimits(String),
    #[error("unknown tool {0}")]
    UnknownTool(String),
    #[error("cannot reach {tool}: {message}")]
    Spawn { tool: String, message: String },
}

/// Reported health of one tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Health {
    Healthy,
    Unhealthy { since: u64, consecutive_failures: u32 },
}

/// What the tracker allows for the next call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Allow,
    Probe,
    Reject,
}

/// Health state machine, driven by explicit timestamps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HealthTracker {
    threshold: u32,
    cooldown_ms: u64,
    consecutive: u32,
    since: Option<u64>,
    last_probe: Option<u64>,
    probing: bool,
}

impl HealthTracker {
    pub fn new(threshold: u32, cooldown_ms: u64) -> Self {
        Self { threshold, cooldown_ms, consecutive: 0, since: None, last_probe: None, probing: false }
    }

    pub fn health(&self) -> Health {
        match self.since {
            None => Health::Healthy,
            Some(since) => Health::Unhealthy { since, consecutive_failures: self.consecutive },
        }
    }

    pub fn admit(&mut self, now_ms: u64) -> Admission {
        let Some(since) = self.since else { return Admission::Allow };
        let anchor = self.last_probe.unwrap_or(since);
        if !self.probing && now_ms.saturating_sub(anchor) >= self.cooldown_ms {
            self.probing = true;
            self.last_probe = Some(now_ms);
            Admission::Probe
        } else {
            Admission::Reject
        }
    }

    pub fn record(&mut self, success: bool, now_ms: u64) {
        self.probing = false;
        if success {
            self.consecutive = 0;
            self.since = None;
            self.last_probe = None;
        } else {
            self.consecutive += 1;
            if self.since.is_none() && self.consecutive >= self.threshold {
                self.since = Some(now_ms);
            }
        }
    }
}

impl Default for HealthTracker {
    fn default() -> Self {
        Self::new(FAILURE_THRESHOLD, COOLDOWN_MS)
    }
}

struct Instance {
    conn: tokio::sync::Mutex<Option<Arc<Connection>>>,
    _child: Mutex<Option<tokio::process::Child>>,
}

struct ToolEntry {
    descriptor: ToolDescriptor,
    endpoint: Endpoint,
    instances: Vec<Instance>,
    health: Mutex<HealthTracker>,
    calls: AtomicU64,
}

/// Result of a chain walk.
#[derive(Debug, Clone, PartialEq)]
pub struct FallbackOutcome {
    pub result: ToolResult,
    /// Tool that produced `result`; `None` when every hop failed.
    pub served_by: Option<String>,
    /// Failed attempts in order, as `(tool, error code)`.
    pub hops: Vec<(String, String)>,
}

/// Registry plus dispatcher. Cheap to share behind an `Arc`.
pub struct Toolwire {
    classes: BTreeMap<String, Arc<Semaphore>>,
    capacities: BTreeMap<String, usize>,
    tools: BTreeMap<String, ToolEntry>,
    clock: Arc<dyn Clock>,
    next_id: AtomicU64,
    health_config: (u32, u64),
}

impl Toolwire {
    pub fn new(capacities: BTreeMap<String, usize>, clock: Arc<dyn Clock>) -> Self {
        let classes = capacities.iter().map(|(k, &v)| (k.clone(), Arc::new(Semaphore::new(v.max(1))))).collect();
        Self {
            classes,
            capacities,
            tools: BTreeMap::new(),
            clock,
            next_id: AtomicU64::new(0),
            health_config: (FAILURE_THRESHOLD, COOLDOWN_MS),
        }
    }

    pub fn with_health(mut self, threshold: u32, cooldown_ms: u64) -> Self {
        self.health_config = (threshold, cooldown_ms);
        self
    }

    pub fn capacities(&self) -> &BTreeMap<String, usize> {
        &self.capacities
    }

    pub fn register(&mut self, descriptor: ToolDescriptor, endpoint: Endpoint) -> Result<(), RegistryError> {
        let name = descriptor.name.clone();
        if self.tools.contains_key(&name) {
            return Err(RegistryError::DuplicateName(name));
        }
        if !self.classes.contains_key(&descriptor.capacity_class) {
            return Err(RegistryError::UnknownClass { tool: name, class: descriptor.capacity_class.clone() });
        }
        if descriptor.instances == 0 || descriptor.timeout_ms == 0 {
            return Err(RegistryError::BadLimits(name));
        }
        for fb in &descriptor.fallbacks {
            if let Some(other) = self.tools.get(fb) {
                if other.descriptor.schema != descriptor.schema {
                    return Err(RegistryError::IncompatibleFallback { tool: name, fallback: fb.clone() });
                }
            }
        }
        for (other, entry) in &self.tools {
            if entry.descriptor.fallbacks.contains(&name) && entry.descriptor.schema != descriptor.schema {
                return Err(RegistryError::IncompatibleFallback { tool: other.clone(), fallback: name });
            }
        }
        let mut graph: BTreeMap<&str, &[String]> =
            self.tools.iter().map(|(k, e)| (k.as_str(), e.descriptor.fallbacks.as_slice())).collect();
        graph.insert(&name, &descriptor.fallbacks);
        if let Some(cycle) = find_cycle(&graph) {
            return Err(RegistryError::CyclicFallback(cycle));
        }
        let instances = (0..descriptor.instances)
            .map(|_| Instance { conn: tokio::sync::Mutex::new(None), _child: Mutex::new(None) })
            .collect();
        let (threshold, cooldown) = self.health_config;
        self.tools.insert(
            name,
            ToolEntry {
                descriptor,
                endpoint,
                instances,
                health: Mutex::new(HealthTracker::new(threshold, cooldown)),
                calls: AtomicU64::new(0),
            },
        );
        Ok(())
    }

    /// Checks that every fallback named at registration exists.
    pub fn seal(&self) -> Result<(), RegistryError> {
        for entry in self.tools.values() {
            for fb in &entry.descriptor.fallbacks {
                if !self.tools.contains_key(fb) {
                    return Err(RegistryError::UnknownFallback {
                        tool: entry.descriptor.name.clone(),
                        fallback: fb.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Opens every instance now instead of on first use.
    pub async fn connect_all(&self) -> Result<(), RegistryError> {
        for entry in self.tools.values() {
            for inst in &entry.instances {
                let mut slot = inst.conn.lock().await;
                if slot.is_none() {
                    *slot = Some(self.connect(entry, inst).await?);
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, tool: &str) -> bool {
        self.tools.contains_key(tool)
    }

    pub fn descriptor(&self, tool: &str) -> Option<&ToolDescriptor> {
        self.tools.get(tool).map(|e| &e.descriptor)
    }

    /// Descriptors sorted by name.
    pub fn listing(&self) -> Vec<ToolDescriptor> {
        self.tools.values().map(|e| e.descriptor.clone()).collect()
    }

    pub fn schemas(&self) -> BTreeMap<String, ToolSchema> {
        self.tools.iter().map(|(k, e)| (k.clone(), e.descriptor.schema.clone())).collect()
    }

    pub fn health(&self, tool: &str) -> Result<Health, RegistryError> {
        let entry = self.tools.get(tool).ok_or_else(|| RegistryError::UnknownTool(tool.into()))?;
        Ok(entry.health.lock().expect("health lock").health())
    }

    /// Frames sent to `tool` so far, across instances.
    pub fn calls(&self, tool: &str) -> u64 {
        self.tools.get(tool).map_or(0, |e| e.calls.load(Ordering::SeqCst))
    }

    /// Primary followed by its declared fallbacks.
    pub fn chain(&self, tool: &str) -> Vec<String> {
        let mut out = vec![tool.to_string()];
        if let Some(entry) = self.tools.get(tool) {
            out.extend(entry.descriptor.fallbacks.iter().cloned());
        }
        out
    }

    async fn connect(&self, entry: &ToolEntry, inst: &Instance) -> Result<Arc<Connection>, RegistryError> {
        let name = &entry.descriptor.name;
        let spawn_err = |m: String| RegistryError::Spawn { tool: name.clone(), message: m };
        match &entry.endpoint {
            Endpoint::Local { handler, options } => {
                let (client, server) = tokio::io::duplex(1 << 16);
                let (sr, sw) = tokio::io::split(server);
                tokio::spawn(serve_connection(sr, sw, handler.clone(), options.clone()));
                let (cr, cw) = tokio::io::split(client);
                Ok(Connection::spawn(name.clone(), cr, cw))
            }
            Endpoint::Tcp { addr } => {
                let stream = tokio::net::TcpStream::connect(addr).await.map_err(|e| spawn_err(e.to_string()))?;
                let (r, w) = stream.into_split();
                Ok(Connection::spawn(name.clone(), r, w))
            }
            Endpoint::Subprocess { program, args } => {
                let mut child = tokio::process::Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .kill_on_drop(true)
                    .spawn()
                    .map_err(|e| spawn_err(e.to_string()))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                *inst._child.lock().expect("child lock") = Some(child);
                Ok(Connection::spawn(name.clone(), stdout, stdin))
            }
        }
    }

    /// One call to one tool, without fallbacks.
    pub async fn invoke(&self, tool: &str, args: &Value) -> ToolResult {
        let started = self.clock.now_ms();
        let Some(entry) = self.tools.get(tool) else {
            return ToolResult::failure(tool, CODE_UNKNOWN_TOOL, format!("no tool named {tool}"), 0);
        };
        let admission = entry.health.lock().expect("health lock").admit(started);
        if admission == Admission::Reject {
            return ToolResult::failure(tool, CODE_UNHEALTHY, format!("{tool} is cooling down"), 0);
        }
        let class = &self.classes[&entry.descriptor.capacity_class];
        let _permit = class.acquire().await.expect("semaphore never closed");

        let outcome = self.send(entry, args, admission == Admission::Probe).await;
        let now = self.clock.now_ms();
        let latency = now.saturating_sub(started);
        let transport_ok = outcome.is_ok();
        entry.health.lock().expect("health lock").record(transport_ok, now);
        match outcome {
            Ok(frame) if frame.ok => ToolResult::success(tool, frame.result.unwrap_or(Value::Null), latency),
            Ok(frame) => {
                let e = frame.error.expect("well-formed failure frame");
                ToolResult::failure(tool, e.code, e.message, latency)
            }
            Err(e) => ToolResult::failure(tool, e.code(), e.to_string(), latency),
        }
    }

    async fn send(&self, entry: &ToolEntry, args: &Value, probe: bool) -> Result<crate::wire::ResponseFrame, WireError> {
        let inst = self.pick_instance(entry).await;
        let conn = {
            let mut slot = inst.conn.lock().await;
            let stale = slot.as_ref().is_none_or(|c| c.is_closed() && probe);
            if stale {
                match self.connect(entry, inst).await {
                    Ok(c) => *slot = Some(c),
                    Err(e) => return Err(WireError::Crashed(e.to_string())),
                }
            }
            slot.clone().expect("connected above")
        };
        let id = format!("{}-{}", entry.descriptor.name, self.next_id.fetch_add(1, Ordering::SeqCst));
        entry.calls.fetch_add(1, Ordering::SeqCst);
        conn.call(RequestFrame {
            id,
            tool: entry.descriptor.name.clone(),
            args: args.clone(),
            deadline_ms: entry.descriptor.timeout_ms,
        })
        .await
    }

    /// Open instance with the fewest calls in flight, lowest index first.
    async fn pick_instance<'a>(&self, entry: &'a ToolEntry) -> &'a Instance {
        let mut best = (usize::MAX, 0);
        for (i, inst) in entry.instances.iter().enumerate() {
            let load = match inst.conn.lock().await.as_ref() {
                Some(c) if c.is_closed() => usize::MAX - 1,
                Some(c) => c.in_flight(),
                None => 0,
            };
            if load < best.0 {
                best = (load, i);
            }
        }
        &entry.instances[best.1]
    }

    /// Walks `[tool] + fallbacks`. Timeouts get one same-tool retry;
    /// timeouts, crashes and unhealthy tools move to the next hop; any
    /// other outcome is returned as is.
    pub async fn invoke_with_fallback(&self, tool: &str, args: &Value) -> FallbackOutcome {
        let mut hops = Vec::new();
        let mut latency = 0;
        for hop in self.chain(tool) {
            let mut result = self.invoke(&hop, args).await;
            if result.error_code() == Some(CODE_TIMEOUT) {
                latency += result.latency_ms;
                hops.push((hop.clone(), CODE_TIMEOUT.to_string()));
                result = self.invoke(&hop, args).await;
            }
            latency += result.latency_ms;
            match result.error_code() {
                Some(code @ (CODE_TIMEOUT | CODE_CRASHED | CODE_UNHEALTHY)) => hops.push((hop, code.to_string())),
                _ => {
                    result.latency_ms = latency;
                    return FallbackOutcome { result, served_by: Some(hop), hops };
                }
            }
        }
        let causes: Vec<String> = hops.iter().map(|(t, c)| format!("{t}: {c}")).collect();
        FallbackOutcome {
            result: ToolResult::failure(tool, CODE_ALL_FAILED, causes.join("; "), latency),
            served_by: None,
            hops,
        }
    }
}

/// A cycle in the fallback graph, if one exists, as a closed walk.
fn find_cycle(graph: &BTreeMap<&str, &[String]>) -> Option<Vec<String>> {
    fn visit<'a>(
        node: &'a str,
        graph: &BTreeMap<&'a str, &'a [String]>,
        path: &mut Vec<&'a str>,
        done: &mut BTreeSet<&'a str>,
    ) -> Option<Vec<String>> {
        if let Some(pos) = path.iter().position(|n| *n == node) {
            let mut cycle: Vec<String> = path[pos..].iter().map(|s| s.to_string()).collect();
            cycle.push(node.to_string());
            return Some(cycle);
        }
        if !done.insert(node) {
            return None;
        }
        path.push(node);
        for next in graph.get(node).copied().unwrap_or_default() {
            if let Some(c) = visit(next, graph, path, done) {
                return Some(c);
            }
        }
        path.pop();
        None
    }
    let mut done = BTreeSet::new();
    for &start in graph.keys() {
        if let Some(c) = visit(start, graph, &mut Vec::new(), &mut done) {
            return Some(c);
        }
    }
    None
}
