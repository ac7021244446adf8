mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use cfagent_core::{Query, SessionLog};
use cfagent_runtime::agent::{LoopConfig, OutcomeKind, CODE_UNPARSEABLE};
use cfagent_runtime::head::RemoteHead;
use common::{new_log, strong_lesion, Harness};
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpListener;

/// Minimal HTTP/1.1 endpoint: each request body is recorded and answered
/// with the next reply from `replies` (the last one repeats).
async fn serve(replies: Vec<Value>) -> (String, Arc<AtomicUsize>, Arc<std::sync::Mutex<Vec<Value>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}/decide", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
    let (h, s) = (hits.clone(), seen.clone());
    tokio::spawn(async move {
        loop {
            let (sock, _) = listener.accept().await.unwrap();
            let (h, s, replies) = (h.clone(), s.clone(), replies.clone());
            tokio::spawn(async move {
                let (r, mut w) = sock.into_split();
                let mut r = BufReader::new(r);
                loop {
                    let mut len = 0usize;
                    let mut line = String::new();
                    loop {
                        line.clear();
                        if r.read_line(&mut line).await.unwrap_or(0) == 0 {
                            return;
                        }
                        if line == "\r\n" {
                            break;
                        }
                        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                            len = v.trim().parse().unwrap();
                        }
                    }
                    let mut body = vec![0u8; len];
                    r.read_exact(&mut body).await.unwrap();
                    s.lock().unwrap().push(serde_json::from_slice(&body).unwrap());
                    let n = h.fetch_add(1, Ordering::SeqCst);
                    let reply = replies[n.min(replies.len() - 1)].to_string();
                    let resp = format!(
                        "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{reply}",
                        reply.len()
                    );
                    w.write_all(resp.as_bytes()).await.unwrap();
                }
            });
        }
    });
    (url, hits, seen)
}

async fn run(h: &Harness, url: &str, cfg: &LoopConfig, log: &SessionLog) -> cfagent_runtime::agent::SessionOutcome {
    let img = h.put_scene(5, Some(strong_lesion()));
    let query = Query::new("remove the lesion", Some(img), "s").unwrap();
    let mut head = RemoteHead::new(url, 5_000, h.agent.tool_listing()).unwrap();
    h.agent.run_session(&query, &mut head, cfg, log, None).await.unwrap()
}

#[tokio::test]
async fn unparseable_reply_is_retried_twice_then_recorded() {
    let (url, hits, seen) = serve(vec![json!({"thought": "hmm", "action": "classify(image="})]).await;
    let h = Harness::new();
    let log = new_log();
    let outcome = run(&h, &url, &LoopConfig { t_max: 1, ..LoopConfig::default() }, &log).await;
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    assert_eq!(outcome.steps_used, 1);
    assert_eq!(outcome.memory[0].result.error_code(), Some(CODE_UNPARSEABLE));
    assert!(matches!(outcome.kind, OutcomeKind::Timeout { aborted: false, .. }));
    assert_eq!(h.total_calls(), 0);
    let bodies = seen.lock().unwrap();
    assert!(bodies[1]["context"].as_str().unwrap().contains("previous reply could not be parsed"));
    let names: Vec<&str> = bodies[0]["tools"].as_array().unwrap().iter().map(|t| t["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"cf_workflow") && names.contains(&"edit_a"));
}

#[tokio::test]
async fn reprompt_recovers_and_final_answer_ends_the_session() {
    let replies = vec![
        json!({"thought": "bad", "action": "final_answer(text=1)"}),
        json!({"thought": "done", "action": "final_answer(text=\"ok\")"}),
    ];
    let (url, hits, _) = serve(replies).await;
    let h = Harness::new();
    let log = new_log();
    let outcome = run(&h, &url, &LoopConfig::default(), &log).await;
    assert_eq!(hits.load(Ordering::SeqCst), 2);
    assert_eq!(outcome.kind, OutcomeKind::FinalAnswer { text: "ok".into(), artifacts: vec![] });
}

#[tokio::test]
async fn unreachable_head_fails_the_session() {
    let h = Harness::new();
    let img = h.put_scene(5, None);
    let query = Query::new("x", Some(img), "s").unwrap();
    let mut head = RemoteHead::new("http://127.0.0.1:9/decide", 500, vec![]).unwrap();
    let log = new_log();
    let err = h.agent.run_session(&query, &mut head, &LoopConfig::default(), &log, None).await.unwrap_err();
    assert!(err.to_string().starts_with("head failed"));
    assert_eq!(log.records().last().unwrap().body["state"], "failed");
}
