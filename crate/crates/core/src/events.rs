//! Append-only session event logs.
//!
//! Each session owns one log. Records are serialized once, at append time,
//! and the same bytes are kept in memory, written to the JSONL file and
//! served to stream subscribers. Nothing is ever rewritten.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::action::Action;
use crate::types::{MemoryEntry, ToolResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    SessionCreated,
    QueryReceived,
    Thought,
    ToolCall,
    ToolResult,
    CandidateScored,
    FinalAnswer,
    Timeout,
    Control,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub kind: EventKind,
    pub body: Value,
    /// Milliseconds since the Unix epoch.
    pub at: u64,
}

impl EventRecord {
    pub fn is_terminal(&self) -> bool {
        matches!(self.kind, EventKind::FinalAnswer | EventKind::Timeout)
    }
}

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Always reports the same instant. Used wherever logs must be
/// byte-reproducible.
#[derive(Debug, Default, Clone, Copy)]
pub struct FixedClock(pub u64);

impl Clock for FixedClock {
    fn now_ms(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum EventLogError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} already exists")]
    DuplicateSession(String),
    #[error("session {0} is closed")]
    Closed(String),
    #[error("storage failure: {0}")]
    StorageFailure(#[from] std::io::Error),
    #[error("malformed log line {line}: {message}")]
    Malformed { line: usize, message: String },
}

type Listener = Arc<dyn Fn(u64) + Send + Sync>;

struct LogInner {
    lines: Vec<Arc<str>>,
    file: Option<File>,
    closed: bool,
}

/// One session's log.
pub struct SessionLog {
    session: String,
    clock: Arc<dyn Clock>,
    inner: Mutex<LogInner>,
    listeners: RwLock<Vec<Listener>>,
}

impl std::fmt::Debug for SessionLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionLog").field("session", &self.session).field("len", &self.len()).finish()
    }
}

impl SessionLog {
    pub fn in_memory(session: impl Into<String>, clock: Arc<dyn Clock>) -> Self {
        Self {
            session: session.into(),
            clock,
            inner: Mutex::new(LogInner { lines: Vec::new(), file: None, closed: false }),
            listeners: RwLock::new(Vec::new()),
        }
    }

    pub fn with_file(session: impl Into<String>, clock: Arc<dyn Clock>, path: &Path) -> Result<Self, EventLogError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let log = Self::in_memory(session, clock);
        log.inner.lock().expect("log lock").file = Some(file);
        Ok(log)
    }

    pub fn session(&self) -> &str {
        &self.session
    }

    /// Appends and returns the assigned sequence number. The line reaches
    /// the file (if any) with a single write before it becomes visible to
    /// readers.
    pub fn append(&self, kind: EventKind, body: Value) -> Result<u64, EventLogError> {
        let seq = {
            let mut inner = self.inner.lock().expect("log lock");
            if inner.closed {
                return Err(EventLogError::Closed(self.session.clone()));
            }
            let seq = inner.lines.len() as u64;
            let record = EventRecord { seq, kind, body, at: self.clock.now_ms() };
            let line: Arc<str> = serde_json::to_string(&record).expect("event serializes").into();
            if let Some(file) = inner.file.as_mut() {
                let mut buf = Vec::with_capacity(line.len() + 1);
                buf.extend_from_slice(line.as_bytes());
                buf.push(b'\n');
                file.write_all(&buf)?;
                file.flush()?;
            }
            inner.lines.push(line);
            seq
        };
        self.notify(seq + 1);
        Ok(seq)
    }

    /// Marks the log finished; later appends fail.
    pub fn close(&self) {
        let len = {
            let mut inner = self.inner.lock().expect("log lock");
            inner.closed = true;
            if let Some(file) = inner.file.as_mut() {
                let _ = file.sync_all();
            }
            inner.lines.len() as u64
        };
        self.notify(len);
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().expect("log lock").closed
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("log lock").lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Serialized lines with `seq >= from`, in order.
    pub fn lines_from(&self, from: u64) -> Vec<Arc<str>> {
        let inner = self.inner.lock().expect("log lock");
        inner.lines.iter().skip(from as usize).cloned().collect()
    }

    pub fn records(&self) -> Vec<EventRecord> {
        self.lines_from(0)
            .iter()
            .map(|l| serde_json::from_str(l).expect("own lines parse"))
            .collect()
    }

    /// Registers a callback fired with the new length after each append and
    /// on close.
    pub fn on_append(&self, f: impl Fn(u64) + Send + Sync + 'static) {
        self.listeners.write().expect("listener lock").push(Arc::new(f));
    }

    fn notify(&self, len: u64) {
        for l in self.listeners.read().expect("listener lock").iter() {
            l(len);
        }
    }
}

/// All session logs of one process, optionally persisted under a directory
/// as `<session>.jsonl`.
pub struct EventStore {
    dir: Option<PathBuf>,
    clock: Arc<dyn Clock>,
    sessions: RwLock<HashMap<String, Arc<SessionLog>>>,
}

impl EventStore {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self { dir: None, clock, sessions: RwLock::new(HashMap::new()) }
    }

    pub fn open(dir: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Result<Self, EventLogError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir: Some(dir), clock, sessions: RwLock::new(HashMap::new()) })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn create(&self, session: &str) -> Result<Arc<SessionLog>, EventLogError> {
        let mut sessions = self.sessions.write().expect("sessions lock");
        if sessions.contains_key(session) {
            return Err(EventLogError::DuplicateSession(session.to_string()));
        }
        let log = match &self.dir {
            Some(dir) => {
                let path = dir.join(format!("{session}.jsonl"));
                if path.exists() {
                    return Err(EventLogError::DuplicateSession(session.to_string()));
                }
                SessionLog::with_file(session, self.clock.clone(), &path)?
            }
            None => SessionLog::in_memory(session, self.clock.clone()),
        };
        let log = Arc::new(log);
        sessions.insert(session.to_string(), log.clone());
        Ok(log)
    }

    pub fn get(&self, session: &str) -> Result<Arc<SessionLog>, EventLogError> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(session)
            .cloned()
            .ok_or_else(|| EventLogError::UnknownSession(session.to_string()))
    }

    pub fn append_event(&self, session: &str, kind: EventKind, body: Value) -> Result<u64, EventLogError> {
        self.get(session)?.append(kind, body)
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self.sessions.read().expect("sessions lock").keys().cloned().collect();
        ids.sort();
        ids
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<EventRecord>, EventLogError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let record: EventRecord = serde_json::from_str(&line).map_err(|e| EventLogError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Body of a `thought` event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThoughtBody {
    pub step: usize,
    pub thought: String,
}

/// Body of a `tool_call` event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallBody {
    pub step: usize,
    pub action: Action,
}

/// Body of a `tool_result` event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResultBody {
    pub step: usize,
    pub result: ToolResult,
}

/// Rebuilds the memory of a session from its log.
pub fn replay_memory(records: &[EventRecord]) -> Result<Vec<MemoryEntry>, EventLogError> {
    let mut memory = Vec::new();
    let mut thought: Option<ThoughtBody> = None;
    let mut call: Option<ToolCallBody> = None;
    let bad = |r: &EventRecord, m: String| EventLogError::Malformed { line: r.seq as usize + 1, message: m };
    for r in records {
        match r.kind {
            EventKind::Thought => {
                thought = Some(serde_json::from_value(r.body.clone()).map_err(|e| bad(r, e.to_string()))?)
            }
            EventKind::ToolCall => {
                call = Some(serde_json::from_value(r.body.clone()).map_err(|e| bad(r, e.to_string()))?)
            }
            EventKind::ToolResult => {
                let body: ToolResultBody = serde_json::from_value(r.body.clone()).map_err(|e| bad(r, e.to_string()))?;
                let t = thought.take().ok_or_else(|| bad(r, "tool_result without thought".into()))?;
                let c = call.take().ok_or_else(|| bad(r, "tool_result without tool_call".into()))?;
                if t.step != body.step || c.step != body.step || body.step != memory.len() {
                    return Err(bad(r, format!("step mismatch at step {}", body.step)));
                }
                memory.push(MemoryEntry { step: body.step, thought: t.thought, action: c.action, result: body.result });
            }
            _ => {}
        }
    }
    Ok(memory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn clock() -> Arc<dyn Clock> {
        Arc::new(FixedClock(42))
    }

    #[test]
    fn seq_starts_at_zero() {
        let store = EventStore::in_memory(clock());
        store.create("s").unwrap();
        assert_eq!(store.append_event("s", EventKind::SessionCreated, json!({})).unwrap(), 0);
        assert_eq!(store.append_event("s", EventKind::QueryReceived, json!({"text": "q"})).unwrap(), 1);
        let seqs: Vec<u64> = store.get("s").unwrap().records().iter().map(|r| r.seq).collect();
        assert_eq!(seqs, vec![0, 1]);
    }

    #[test]
    fn unknown_session() {
        let store = EventStore::in_memory(clock());
        assert!(matches!(
            store.append_event("nope", EventKind::Control, json!({})),
            Err(EventLogError::UnknownSession(_))
        ));
    }

    #[test]
    fn concurrent_appends_gap_free() {
        let store = Arc::new(EventStore::in_memory(clock()));
        let log = store.create("s").unwrap();
        let handles: Vec<_> = (0..4)
            .map(|w| {
                let log = log.clone();
                std::thread::spawn(move || {
                    (0..250).map(|i| log.append(EventKind::Control, json!({"w": w, "i": i})).unwrap()).collect::<Vec<_>>()
                })
            })
            .collect();
        let mut all: Vec<u64> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        all.sort();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        let seqs: Vec<u64> = log.records().iter().map(|r| r.seq).collect();
        assert_eq!(seqs, (0..1000).collect::<Vec<_>>());
        // per-writer order is preserved
        for w in 0..4 {
            let is: Vec<i64> = log
                .records()
                .iter()
                .filter(|r| r.body["w"] == w)
                .map(|r| r.body["i"].as_i64().unwrap())
                .collect();
            assert_eq!(is, (0..250).collect::<Vec<_>>());
        }
    }

    #[test]
    fn file_matches_memory_and_close_blocks_appends() {
        let dir = tempfile::tempdir().unwrap();
        let store = EventStore::open(dir.path(), clock()).unwrap();
        let log = store.create("abc").unwrap();
        log.append(EventKind::SessionCreated, json!({"id": "abc"})).unwrap();
        log.append(EventKind::Timeout, json!({"summary": "x"})).unwrap();
        log.close();
        assert!(matches!(log.append(EventKind::Control, json!({})), Err(EventLogError::Closed(_))));
        let text = std::fs::read_to_string(dir.path().join("abc.jsonl")).unwrap();
        let mem: String = log.lines_from(0).iter().map(|l| format!("{l}\n")).collect();
        assert_eq!(text, mem);
        assert_eq!(read_jsonl(&dir.path().join("abc.jsonl")).unwrap(), log.records());
        assert!(store.create("abc").is_err());
    }

    #[test]
    fn listeners_see_lengths() {
        let log = SessionLog::in_memory("s", clock());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let s2 = seen.clone();
        log.on_append(move |n| s2.lock().unwrap().push(n));
        log.append(EventKind::Control, json!(1)).unwrap();
        log.append(EventKind::Control, json!(2)).unwrap();
        log.close();
        assert_eq!(*seen.lock().unwrap(), vec![1, 2, 2]);
    }

    #[test]
    fn replay_rebuilds_memory() {
        let log = SessionLog::in_memory("s", clock());
        let action = crate::action::parse_action("classify(image=@ab)").unwrap();
        let result = ToolResult::success("classify", json!({"score": 0.25}), 0);
        log.append(EventKind::Thought, json!({"step": 0, "thought": "look"})).unwrap();
        log.append(EventKind::ToolCall, serde_json::to_value(ToolCallBody { step: 0, action: action.clone() }).unwrap()).unwrap();
        log.append(EventKind::ToolResult, serde_json::to_value(ToolResultBody { step: 0, result: result.clone() }).unwrap()).unwrap();
        let memory = replay_memory(&log.records()).unwrap();
        assert_eq!(memory, vec![MemoryEntry { step: 0, thought: "look".into(), action, result }]);
    }
}
