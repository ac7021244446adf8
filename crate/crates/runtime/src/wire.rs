//! Newline-delimited JSON frames between the gateway and tool servers.
//!
//! ```text
//! request:  {"id": "...", "tool": "...", "args": {...}, "deadline_ms": 1500}
//! response: {"id": "...", "ok": true,  "result": {...}}
//!           {"id": "...", "ok": false, "error": {"code": "...", "message": "..."}}
//! ```
//!
//! A [`Connection`] multiplexes concurrent calls over one byte stream and
//! correlates responses by id. Responses whose id has no outstanding call
//! are counted and dropped.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncWrite, AsyncWriteExt, BufReader};
use tokio::sync::{mpsc, oneshot};

use cfagent_core::ToolError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestFrame {
    pub id: String,
    pub tool: String,
    pub args: Value,
    pub deadline_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseFrame {
    pub id: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ToolError>,
}

impl ResponseFrame {
    pub fn success(id: impl Into<String>, result: Value) -> Self {
        Self { id: id.into(), ok: true, result: Some(result), error: None }
    }

    pub fn failure(id: impl Into<String>, code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            ok: false,
            result: None,
            error: Some(ToolError { code: code.into(), message: message.into() }),
        }
    }

    /// `ok` must agree with which of `result`/`error` is present.
    pub fn is_well_formed(&self) -> bool {
        matches!((self.ok, &self.result, &self.error), (true, Some(_), None) | (false, None, Some(_)))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("deadline of {0} ms expired")]
    Timeout(u64),
    #[error("transport closed: {0}")]
    Crashed(String),
    #[error("malformed response frame: {0}")]
    Malformed(String),
}

impl WireError {
    pub fn code(&self) -> &'static str {
        match self {
            WireError::Timeout(_) => "timeout",
            WireError::Crashed(_) => "crashed",
            WireError::Malformed(_) => "malformed",
        }
    }
}

type Pending = Arc<Mutex<HashMap<String, oneshot::Sender<Result<ResponseFrame, WireError>>>>>;

/// Client side of one framed byte stream.
#[derive(Debug)]
pub struct Connection {
    label: String,
    tx: mpsc::UnboundedSender<String>,
    pending: Pending,
    closed: Arc<AtomicBool>,
    in_flight: AtomicUsize,
    orphans: Arc<AtomicU64>,
}

impl Connection {
    /// Spawns reader and writer tasks over the two halves of a stream.
    pub fn spawn<R, W>(label: impl Into<String>, reader: R, writer: W) -> Arc<Self>
    where
        R: AsyncRead + Unpin + Send + 'static,
        W: AsyncWrite + Unpin + Send + 'static,
    {
        let label = label.into();
        let (tx, mut rx) = mpsc::unbounded_channel::<String>();
        let pending: Pending = Arc::default();
        let closed = Arc::new(AtomicBool::new(false));
        let orphans = Arc::new(AtomicU64::new(0));

        {
            let closed = closed.clone();
            let pending = pending.clone();
            let label = label.clone();
            let mut writer = writer;
            tokio::spawn(async move {
                while let Some(mut line) = rx.recv().await {
                    line.push('\n');
                    if writer.write_all(line.as_bytes()).await.is_err() || writer.flush().await.is_err() {
                        break;
                    }
                }
                fail_all(&closed, &pending, &format!("{label}: writer closed"));
            });
        }
        {
            let closed = closed.clone();
            let pending = pending.clone();
            let orphans = orphans.clone();
            let label = label.clone();
            tokio::spawn(async move {
                let mut lines = BufReader::new(reader).lines();
                while let Ok(Some(line)) = lines.next_line().await {
                    deliver(&label, &line, &pending, &orphans);
                }
                fail_all(&closed, &pending, &format!("{label}: stream ended"));
            });
        }
        Arc::new(Self { label, tx, pending, closed, in_flight: AtomicUsize::new(0), orphans })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::SeqCst)
    }

    /// Responses that arrived with no matching outstanding request.
    pub fn orphans(&self) -> u64 {
        self.orphans.load(Ordering::SeqCst)
    }

    pub async fn call(&self, frame: RequestFrame) -> Result<ResponseFrame, WireError> {
        if self.is_closed() {
            return Err(WireError::Crashed(format!("{}: connection closed", self.label)));
        }
        let id = frame.id.clone();
        let deadline = frame.deadline_ms;
        let (tx, rx) = oneshot::channel();
        self.pending.lock().expect("pending lock").insert(id.clone(), tx);
        let line = serde_json::to_string(&frame).expect("request serializes");
        if self.tx.send(line).is_err() {
            self.pending.lock().expect("pending lock").remove(&id);
            return Err(WireError::Crashed(format!("{}: writer gone", self.label)));
        }
        self.in_flight.fetch_add(1, Ordering::SeqCst);
        let outcome = tokio::time::timeout(Duration::from_millis(deadline), rx).await;
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        match outcome {
            Ok(Ok(result)) => result,
            Ok(Err(_)) => Err(WireError::Crashed(format!("{}: dropped", self.label))),
            Err(_) => {
                self.pending.lock().expect("pending lock").remove(&id);
                Err(WireError::Timeout(deadline))
            }
        }
    }
}

fn deliver(label: &str, line: &str, pending: &Pending, orphans: &AtomicU64) {
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => {
            tracing::warn!(%label, error = %e, "unparseable response line dropped");
            orphans.fetch_add(1, Ordering::SeqCst);
            return;
        }
    };
    let Some(id) = value.get("id").and_then(Value::as_str).map(str::to_string) else {
        tracing::warn!(%label, "response without id dropped");
        orphans.fetch_add(1, Ordering::SeqCst);
        return;
    };
    let Some(waiter) = pending.lock().expect("pending lock").remove(&id) else {
        tracing::warn!(%label, %id, "orphan response dropped");
        orphans.fetch_add(1, Ordering::SeqCst);
        return;
    };
    let result = match serde_json::from_value::<ResponseFrame>(value) {
        Ok(frame) if frame.is_well_formed() => Ok(frame),
        Ok(_) => Err(WireError::Malformed("ok flag disagrees with result/error".into())),
        Err(e) => Err(WireError::Malformed(e.to_string())),
    };
    let _ = waiter.send(result);
}

fn fail_all(closed: &AtomicBool, pending: &Pending, why: &str) {
    closed.store(true, Ordering::SeqCst);
    let waiters: Vec<_> = pending.lock().expect("pending lock").drain().map(|(_, w)| w).collect();
    for w in waiters {
        let _ = w.send(Err(WireError::Crashed(why.to_string())));
    }
}

/// Server-side tool implementation.
#[async_trait]
pub trait FrameHandler: Send + Sync {
    async fn handle(&self, tool: &str, args: &Value) -> Result<Value, ToolError>;

    /// Tool names this handler serves.
    fn tools(&self) -> Vec<String>;
}

/// Shared server-side concurrency counters.
#[derive(Debug, Default)]
pub struct ServerStats {
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    calls: AtomicU64,
}

impl ServerStats {
    pub fn enter(&self) {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        self.calls.fetch_add(1, Ordering::SeqCst);
    }

    pub fn exit(&self) {
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Deterministic faults a server injects into its own behaviour.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultPlan {
    /// Close the stream instead of answering request number `n + 1`.
    pub crash_after: Option<u64>,
    /// Sleep this long before every answer.
    pub delay_ms: u64,
    /// Answer request number `n + 1` onwards with garbage.
    pub garble_after: Option<u64>,
}

/// Options shared by every connection of one server. Clones share the
/// request counter, so fault schedules count requests across connections.
#[derive(Clone, Default)]
pub struct ServerOptions {
    pub faults: FaultPlan,
    pub stats: Option<Arc<ServerStats>>,
    pub served: Arc<AtomicU64>,
}

impl ServerOptions {
    pub fn with_faults(faults: FaultPlan) -> Self {
        Self { faults, ..Default::default() }
    }

    pub fn with_stats(mut self, stats: Arc<ServerStats>) -> Self {
        self.stats = Some(stats);
        self
    }
}

/// What a server loop ended with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServeExit {
    Eof,
    Crashed,
}

/// Serves requests one at a time until EOF or an injected crash.
pub async fn serve_connection<R, W>(
    reader: R,
    mut writer: W,
    handler: Arc<dyn FrameHandler>,
    options: ServerOptions,
) -> std::io::Result<ServeExit>
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let mut lines = BufReader::new(reader).lines();
    while let Some(line) = lines.next_line().await? {
        if line.trim().is_empty() {
            continue;
        }
        let index = options.served.fetch_add(1, Ordering::SeqCst);
        if options.faults.crash_after.is_some_and(|n| index >= n) {
            writer.shutdown().await.ok();
            return Ok(ServeExit::Crashed);
        }
        let response = match serde_json::from_str::<RequestFrame>(&line) {
            Err(e) => {
                let id = serde_json::from_str::<Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(Value::as_str).map(str::to_string))
                    .unwrap_or_default();
                ResponseFrame::failure(id, "bad_request", e.to_string())
            }
            Ok(req) => {
                if let Some(stats) = &options.stats {
                    stats.enter();
                }
                if options.faults.delay_ms > 0 {
                    tokio::time::sleep(Duration::from_millis(options.faults.delay_ms)).await;
                }
                let outcome = handler.handle(&req.tool, &req.args).await;
                if let Some(stats) = &options.stats {
                    stats.exit();
                }
                match outcome {
                    Ok(result) => ResponseFrame::success(req.id, result),
                    Err(e) => ResponseFrame::failure(req.id, e.code, e.message),
                }
            }
        };
        let mut out = if options.faults.garble_after.is_some_and(|n| index >= n) {
            format!("{{\"id\":{},\"ok\":true}}", serde_json::to_string(&response.id).expect("id"))
        } else {
            serde_json::to_string(&response).expect("response serializes")
        };
        out.push('\n');
        writer.write_all(out.as_bytes()).await?;
        writer.flush().await?;
    }
    Ok(ServeExit::Eof)
}
