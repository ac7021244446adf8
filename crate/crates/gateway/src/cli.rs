//! Command-line front end. Exit codes: 0 success, 1 domain error, 2 usage.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde_json::Value;

use cfagent_core::events::{read_jsonl, replay_memory, ToolCallBody};
use cfagent_core::image::decode_artifact;
use cfagent_core::metrics::DEFAULT_FLIP_THRESHOLD;
use cfagent_core::stubs::{classify, Lesion, SyntheticScene};
use cfagent_core::{render_action, ArtifactStore, EventKind, FixedClock, ImageArtifact, MetricBundle, Query, SessionLog};
use cfagent_runtime::agent::{Agent, LoopConfig};
use cfagent_runtime::engine::{CfEngine, EngineConfig};
use cfagent_runtime::head::{ScriptedHead, ScriptedScenario};
use cfagent_runtime::suite::{stub_toolwire, SuiteHooks};

use crate::bench::{self, Bench, BenchConfig, Method, SCENE_SIZE};
use crate::config::{sibling_stub_binary, ServerConfig};
use crate::server;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cfagent", version, about = "Counterfactual explanation agent runtime")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve {
        /// JSON config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Listen address, overriding config and environment.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Run one scripted session headlessly and print its outcome as JSON.
    Run {
        /// Built-in scenario name or path to a scenario JSON file.
        #[arg(long)]
        scenario: String,
        /// Seed for the synthetic scene.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "Explain the finding in this image.")]
        query: String,
        /// Lesion as `cx,cy,r,a`; defaults to one drawn from the seed.
        #[arg(long, value_parser = parse_lesion)]
        lesion: Option<Lesion>,
        /// Render a scene with no lesion.
        #[arg(long, conflicts_with = "lesion")]
        healthy: bool,
        #[arg(long)]
        t_max: Option<usize>,
        /// Write the session's JSONL event log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compute the metric bundle of two AIMG1 artifacts.
    Metrics {
        #[arg(long)]
        factual: PathBuf,
        #[arg(long)]
        cf: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FLIP_THRESHOLD)]
        threshold: f64,
    },
    /// Compare single, ensemble and agent generation on a seeded corpus.
    Bench {
        #[arg(long, default_value_t = bench::DEFAULT_CORPUS)]
        corpus: usize,
        #[arg(long, default_value_t = bench::DEFAULT_SEED)]
        seed: u64,
        /// Comma-separated subset of single, ensemble, agent.
        #[arg(long, value_delimiter = ',', value_parser = parse_method)]
        methods: Option<Vec<Method>>,
        /// Directory for the report and logs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render a session log, or rebuild and check a bench directory.
    Replay { path: PathBuf },
}

fn parse_lesion(s: &str) -> Result<Lesion, String> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match parts[..] {
        [cx, cy, r, a] => Ok(Lesion { cx, cy, r, a }),
        _ => Err("expected cx,cy,r,a".into()),
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| format!("unknown method {s}"))
}

/// Parses `argv` and runs the command, writing results to `out`.
pub fn main_with(argv: impl IntoIterator<Item = impl Into<OsString> + Clone>, out: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_DOMAIN;
        }
    };
    match runtime.block_on(execute(cli.command, out)) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            EXIT_DOMAIN
        }
    }
}

async fn execute(command: Command, out: &mut dyn Write) -> Result<i32, String> {
    let write = |out: &mut dyn Write, text: &str| writeln!(out, "{text}").map_err(|e| e.to_string());
    match command {
        Command::Serve { config, listen } => {
            let mut cfg = match config {
                Some(path) => ServerConfig::load(&path).map_err(|e| e.to_string())?,
                None => ServerConfig::default(),
            };
            cfg = cfg.with_env(|k| std::env::var(k).ok());
            if let Some(listen) = listen {
                cfg.listen = listen;
            }
            server::serve(cfg, &sibling_stub_binary(), server::termination()).await.map_err(|e| e.to_string())?;
            Ok(EXIT_OK)
        }
        Command::Run { scenario, seed, query, lesion, healthy, t_max, log } => {
            let scenario = load_scenario(&scenario)?;
            let lesion = if healthy { None } else { Some(lesion.unwrap_or(bench::corpus(seed, 1)[0].lesion)) };
            let mut cfg = LoopConfig::default();
            if let Some(t) = t_max {
                cfg.t_max = t;
            }
            let outcome = run_headless(&scenario, seed, lesion, &query, &cfg, log.as_deref()).await?;
            write(out, &serde_json::to_string(&outcome).expect("outcome serializes"))?;
            Ok(EXIT_OK)
        }
        Command::Metrics { factual, cf, threshold } => {
            let f = read_artifact(&factual)?;
            let c = read_artifact(&cf)?;
            let bundle = MetricBundle::compute((&f).into(), (&c).into(), classify(&f.pixels), classify(&c.pixels), threshold)
                .map_err(|e| e.to_string())?;
            write(out, &serde_json::to_string(&bundle).expect("bundle serializes"))?;
            Ok(EXIT_OK)
        }
        Command::Bench { corpus, seed, methods, out: dir } => {
            let cfg = BenchConfig { corpus, seed, methods: methods.unwrap_or_else(|| Method::ALL.to_vec()), ..BenchConfig::default() };
            let report = Bench::new(EngineConfig::default()).run(&cfg, dir.as_deref()).await.map_err(|e| e.to_string())?;
            write(out, report.table().trim_end())?;
            Ok(EXIT_OK)
        }
        Command::Replay { path } => {
            if path.is_dir() {
                let stored = bench::load_report(&path).map_err(|e| e.to_string())?;
                let rebuilt = bench::rebuild(&path).map_err(|e| e.to_string())?;
                write(out, rebuilt.table().trim_end())?;
                if rebuilt.to_json() == stored.to_json() {
                    Ok(EXIT_OK)
                } else {
                    eprintln!("error: rebuilt report differs from {}", path.join(bench::REPORT_FILE).display());
                    Ok(EXIT_DOMAIN)
                }
            } else {
                for line in render_log(&path)? {
                    write(out, &line)?;
                }
                Ok(EXIT_OK)
            }
        }
    }
}

fn load_scenario(name_or_path: &str) -> Result<ScriptedScenario, String> {
    let path = Path::new(name_or_path);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        return ScriptedScenario::from_json(&text).map_err(|e| e.to_string());
    }
    ServerConfig::default().scenario(name_or_path).map_err(|e| e.to_string())
}

fn read_artifact(path: &Path) -> Result<ImageArtifact, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    decode_artifact(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

/// One scripted session over the in-process stub suite with a fixed clock.
pub async fn run_headless(
    scenario: &ScriptedScenario,
    seed: u64,
    lesion: Option<Lesion>,
    text: &str,
    cfg: &LoopConfig,
    log_path: Option<&Path>,
) -> Result<cfagent_runtime::agent::SessionOutcome, String> {
    let clock = Arc::new(FixedClock(0));
    let store = Arc::new(ArtifactStore::in_memory());
    let tools = Arc::new(stub_toolwire(&store, clock.clone(), &SuiteHooks::default()));
    let engine = Arc::new(CfEngine::new(tools.clone(), store.clone(), EngineConfig::default()));
    let agent = Agent::new(tools, engine, clock.clone());
    let scene = SyntheticScene::new(seed, SCENE_SIZE, SCENE_SIZE, lesion).map_err(|e| e.to_string())?;
    let image = store.put(scene.to_artifact()).map_err(|e| e.to_string())?;
    let session = format!("run-{seed}");
    let log = match log_path {
        Some(p) => SessionLog::with_file(session.clone(), clock, p).map_err(|e| e.to_string())?,
        None => SessionLog::in_memory(session.clone(), clock),
    };
    let query = Query::new(text, Some(image), session).map_err(|e| e.to_string())?;
    let outcome = agent.run_session(&query, &mut ScriptedHead::new(scenario.clone()), cfg, &log, None).await;
    log.close();
    outcome.map_err(|e| e.to_string())
}

/// Human-readable trace of a session log.
pub fn render_log(path: &Path) -> Result<Vec<String>, String> {
    let records = read_jsonl(path).map_err(|e| e.to_string())?;
    replay_memory(&records).map_err(|e| e.to_string())?;
    let short = |v: &Value| {
        let s = v.to_string();
        if s.chars().count() > 120 { format!("{}…", s.chars().take(120).collect::<String>()) } else { s }
    };
    Ok(records
        .iter()
        .map(|r| {
            let detail = match r.kind {
                EventKind::Thought => r.body["thought"].as_str().map(str::to_string).unwrap_or_else(|| short(&r.body)),
                EventKind::ToolCall => serde_json::from_value::<ToolCallBody>(r.body.clone())
                    .map(|c| render_action(&c.action))
                    .unwrap_or_else(|_| short(&r.body)),
                EventKind::ToolResult => {
                    let res = &r.body["result"];
                    match res["ok"].as_bool() {
                        Some(true) => format!("{} ok {}", res["tool"].as_str().unwrap_or("?"), short(&res["payload"])),
                        _ => format!("{} error {}", res["tool"].as_str().unwrap_or("?"), short(&res["error"])),
                    }
                }
                _ => short(&r.body),
            };
            let kind = serde_json::to_value(r.kind).expect("kind serializes");
            format!("{:>4} {:<16} {detail}", r.seq, kind.as_str().unwrap_or("?"))
        })
        .collect())
}
