#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use tempfile::TempDir;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use cfagent_core::stubs::{Lesion, SyntheticScene};
use cfagent_core::ArtifactId;
use cfagent_gateway::config::ServerConfig;
use cfagent_gateway::server::{serve_on, AppState};
use cfagent_runtime::suite::default_descriptors;

pub struct TestServer {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    pub dir: TempDir,
    pub client: reqwest::Client,
    stop: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl TestServer {
    /// In-process stub tools over a fresh data directory.
    pub async fn start() -> Self {
        Self::with_config(|_| {}).await
    }

    pub async fn with_config(edit: impl FnOnce(&mut ServerConfig)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ServerConfig { data_dir: dir.path().to_path_buf(), tools: default_descriptors(), ..ServerConfig::default() };
        edit(&mut cfg);
        let state = AppState::start(cfg, Path::new("unused")).await.unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let (stop, stopped) = oneshot::channel::<()>();
        let task = tokio::spawn(serve_on(state.clone(), listener, async move {
            let _ = stopped.await;
        }));
        let task = tokio::spawn(async move {
            task.await.unwrap().unwrap();
        });
        Self { addr, state, dir, client: reqwest::Client::new(), stop: Some(stop), task: Some(task) }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    pub fn put_scene(&self, seed: u64, lesion: Option<Lesion>) -> ArtifactId {
        self.state.store().put(SyntheticScene::new(seed, 64, 64, lesion).unwrap().to_artifact()).unwrap()
    }

    pub async fn get(&self, path: &str) -> reqwest::Response {
        self.client.get(self.url(path)).send().await.unwrap()
    }

    pub async fn post(&self, path: &str, body: Value) -> reqwest::Response {
        self.client.post(self.url(path)).json(&body).send().await.unwrap()
    }

    /// Creates a session and returns its id.
    pub async fn create(&self, body: Value) -> String {
        let resp = self.post("/sessions", body).await;
        assert_eq!(resp.status(), 201);
        resp.json::<Value>().await.unwrap()["id"].as_str().unwrap().to_string()
    }

    pub async fn happy_session(&self, manual: bool) -> String {
        let image = self.put_scene(3, Some(strong_lesion()));
        let mode = if manual { "manual" } else { "auto" };
        self.create(json!({
            "query": "Remove the finding.",
            "image": image.to_ref(),
            "scenario": "happy-edit",
            "loop": {"approval_mode": mode},
        }))
        .await
    }

    /// Whole event stream from `from` until the session log closes.
    pub async fn stream(&self, id: &str, from: u64) -> String {
        let resp = self.get(&format!("/sessions/{id}/events?from={from}")).await;
        assert_eq!(resp.status(), 200);
        assert_eq!(resp.headers()["content-type"], "application/x-ndjson");
        resp.text().await.unwrap()
    }

    pub fn log_path(&self, id: &str) -> PathBuf {
        self.dir.path().join("sessions").join(format!("{id}.jsonl"))
    }

    pub fn log_text(&self, id: &str) -> String {
        std::fs::read_to_string(self.log_path(id)).unwrap_or_default()
    }

    pub async fn status(&self, id: &str) -> Value {
        self.get(&format!("/sessions/{id}")).await.json().await.unwrap()
    }

    pub async fn wait_finished(&self, id: &str) -> Value {
        for _ in 0..2_000 {
            let s = self.status(id).await;
            if s["closed"] == true {
                return s;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        panic!("session {id} never finished");
    }

    /// Polls the on-disk log until `state` appears `n` times.
    pub async fn wait_control(&self, id: &str, state: &str, n: usize) {
        for _ in 0..2_000 {
            if control_states(&self.log_text(id)).iter().filter(|s| *s == state).count() >= n {
                return;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        panic!("control state {state} never reached {n} in {id}");
    }

    /// Approves each step of a manual session until it closes.
    pub async fn approve_all(&self, id: &str, steps: usize) {
        for n in 1..=steps {
            self.wait_control(id, "awaiting_approval", n).await;
            let resp = self.post(&format!("/sessions/{id}/control"), json!({"command": "approve"})).await;
            assert_eq!(resp.status(), 200);
        }
    }

    pub async fn stop(mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(task) = self.task.take() {
            task.await.unwrap();
        }
    }
}

pub fn control_states(log: &str) -> Vec<String> {
    log.lines()
        .filter_map(|l| serde_json::from_str::<Value>(l).ok())
        .filter(|r| r["kind"] == "control")
        .filter_map(|r| r["body"]["state"].as_str().map(str::to_string))
        .collect()
}

pub fn kinds(log: &str) -> Vec<String> {
    log.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["kind"].as_str().unwrap().to_string()).collect()
}

pub fn strong_lesion() -> Lesion {
    Lesion { cx: 20.0, cy: 20.0, r: 6.0, a: 0.8 }
}

pub fn decode_png(bytes: &[u8]) -> (png::OutputInfo, Vec<u8>) {
    let mut reader = png::Decoder::new(bytes).read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (info, buf)
}
