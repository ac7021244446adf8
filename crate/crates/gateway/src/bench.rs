//! Seeded comparison of single-candidate, best-of-N and agent-driven
//! counterfactual generation over a synthetic lesion corpus.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use cfagent_core::cf::{rank, CandidateCF, SelectionPolicy};
use cfagent_core::events::{read_jsonl, EventLogError};
use cfagent_core::metrics::{self, MetricError};
use cfagent_core::stubs::{Lesion, Region, SyntheticScene, XorShift64Star};
use cfagent_core::{ArtifactStore, EventKind, FixedClock, Query, SessionLog};
use cfagent_runtime::agent::{Agent, AgentError, LoopConfig, CF_WORKFLOW};
use cfagent_runtime::engine::{CfEngine, EngineConfig, EngineError};
use cfagent_runtime::head::{builtin_scenario, ScriptedHead};
use cfagent_runtime::stub_server::REPORT;
use cfagent_runtime::suite::{stub_toolwire, SuiteHooks};
use cfagent_runtime::toolwire::Toolwire;

pub const DEFAULT_CORPUS: usize = 100;
pub const DEFAULT_SEED: u64 = 7;
pub const SCENE_SIZE: u32 = 64;
pub const REPORT_FILE: &str = "bench.json";
pub const BENCH_LOG: &str = "bench.jsonl";
pub const SESSIONS_DIR: &str = "sessions";
pub const AGENT_SCENARIO: &str = "happy-edit";
pub const AGENT_QUERY: &str = "Remove the finding and show what changed.";
/// Instances processed concurrently.
pub const PARALLEL: usize = 4;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("engine: {0}")]
    Engine(#[from] EngineError),
    #[error("agent: {0}")]
    Agent(#[from] AgentError),
    #[error("event log: {0}")]
    Log(#[from] EventLogError),
    #[error("metrics: {0}")]
    Metric(#[from] MetricError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Single,
    Ensemble,
    Agent,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Single, Method::Ensemble, Method::Agent];

    pub fn name(self) -> &'static str {
        match self {
            Method::Single => "single",
            Method::Ensemble => "ensemble",
            Method::Agent => "agent",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub index: usize,
    pub scene_seed: u64,
    pub lesion: Lesion,
}

/// The corpus is a pure function of `(seed, size)`.
pub fn corpus(seed: u64, size: usize) -> Vec<InstanceSpec> {
    let mut rng = XorShift64Star::new(seed);
    let side = f64::from(SCENE_SIZE) - 1.0;
    (0..size)
        .map(|index| {
            let scene_seed = rng.next_u64();
            let r = 4.0 + (5.0 * rng.next_f64()).floor();
            let cx = r + (rng.next_f64() * (side - 2.0 * r)).floor();
            let cy = r + (rng.next_f64() * (side - 2.0 * r)).floor();
            let a = ((0.3 + 0.6 * rng.next_f64()) * 100.0).round() / 100.0;
            InstanceSpec { index, scene_seed, lesion: Lesion { cx, cy, r, a } }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub corpus: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub policy: SelectionPolicy,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { corpus: DEFAULT_CORPUS, seed: DEFAULT_SEED, methods: Method::ALL.to_vec(), policy: SelectionPolicy::default() }
    }
}

/// What one method produced for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub n_cfs: usize,
    pub index: usize,
    pub editor: String,
    pub score_factual: f64,
    pub score_cf: f64,
    pub cpg: f64,
    pub flipped: bool,
    pub ssim: f64,
    pub sip: f64,
    pub score: f64,
}

impl MethodResult {
    fn from_candidate(c: &CandidateCF, n_cfs: usize) -> Self {
        Self {
            n_cfs,
            index: c.config.index,
            editor: c.config.editor.clone(),
            score_factual: c.score_factual,
            score_cf: c.score_cf,
            cpg: c.metrics.cpg,
            flipped: c.metrics.flipped,
            ssim: c.metrics.ssim,
            sip: c.metrics.sip,
            score: c.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    #[serde(flatten)]
    pub spec: InstanceSpec,
    pub results: BTreeMap<Method, MethodResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub n_cfs: usize,
    pub cpg: f64,
    pub cfr: f64,
    pub ssim: f64,
    pub sip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub instances: usize,
    pub policy: SelectionPolicy,
    pub rows: Vec<BenchRow>,
    pub per_instance: Vec<InstanceRecord>,
}

impl BenchReport {
    pub fn row(&self, method: Method) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    /// Instances where `method` scored at least as well as `single`.
    pub fn dominance(&self, method: Method) -> usize {
        self.per_instance
            .iter()
            .filter(|r| match (r.results.get(&method), r.results.get(&Method::Single)) {
                (Some(m), Some(s)) => m.score >= s.score,
                _ => false,
            })
            .count()
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "| {:<8} | {:>4} | {:>5} | {:>4} | {:>5} | {:>5} |", "Method", "#CFs", "CPG", "CFR", "SSIM", "SIP")
            .expect("string write");
        writeln!(out, "|{:-<10}|{:-<6}|{:-<7}|{:-<6}|{:-<7}|{:-<7}|", "", "", "", "", "", "").expect("string write");
        for r in &self.rows {
            out.push_str(&format_row(r.method.name(), r.n_cfs, r.cpg, r.cfr, r.ssim, r.sip));
            out.push('\n');
        }
        out
    }
}

/// One table line: CPG, SSIM and SIP to three places, CFR to two.
pub fn format_row(method: &str, n_cfs: usize, cpg: f64, cfr: f64, ssim: f64, sip: f64) -> String {
    format!("| {method:<8} | {n_cfs:>4} | {cpg:>5.3} | {cfr:>4.2} | {ssim:>5.3} | {sip:>5.3} |")
}

/// Aggregates per-instance results into rows, in method order.
pub fn assemble(seed: u64, policy: SelectionPolicy, per_instance: Vec<InstanceRecord>) -> Result<BenchReport, BenchError> {
    let mut methods: Vec<Method> = per_instance.iter().flat_map(|r| r.results.keys().copied()).collect();
    methods.sort();
    methods.dedup();
    let mut rows = Vec::new();
    for method in methods {
        let results: Vec<&MethodResult> = per_instance.iter().filter_map(|r| r.results.get(&method)).collect();
        if results.len() != per_instance.len() {
            return Err(BenchError::Invalid(format!("{} is missing for some instances", method.name())));
        }
        let n = results.len() as f64;
        let mean = |f: fn(&MethodResult) -> f64| results.iter().map(|r| f(r)).sum::<f64>() / n;
        let pairs: Vec<(f64, f64)> = results.iter().map(|r| (r.score_factual, r.score_cf)).collect();
        rows.push(BenchRow {
            method,
            n_cfs: results.iter().map(|r| r.n_cfs).max().unwrap_or(0),
            cpg: mean(|r| r.cpg),
            cfr: metrics::cfr(&pairs, policy.threshold)?,
            ssim: mean(|r| r.ssim),
            sip: mean(|r| r.sip),
        });
    }
    Ok(BenchReport { seed, instances: per_instance.len(), policy, rows, per_instance })
}

/// Best candidate by a pass that recomputes each score from its metrics.
pub fn external_best(candidates: &[CandidateCF], policy: &SelectionPolicy) -> Option<CandidateCF> {
    let mut rescored: Vec<CandidateCF> = candidates
        .iter()
        .map(|c| CandidateCF { score: c.metrics.cpg - policy.lambda * c.metrics.sip, ..c.clone() })
        .collect();
    rescored.sort_by(rank);
    rescored.into_iter().next()
}

/// Self-contained bench environment over the in-process stub suite.
pub struct Bench {
    store: Arc<ArtifactStore>,
    tools: Arc<Toolwire>,
    engine: Arc<CfEngine>,
    agent: Agent,
}

struct InstanceRun {
    record: InstanceRecord,
    log_events: Vec<Value>,
}

impl Bench {
    pub fn new(engine: EngineConfig) -> Self {
        let store = Arc::new(ArtifactStore::in_memory());
        let clock = Arc::new(FixedClock(0));
        let tools = Arc::new(stub_toolwire(&store, clock.clone(), &SuiteHooks::default()));
        let engine = Arc::new(CfEngine::new(tools.clone(), store.clone(), engine));
        let agent = Agent::new(tools.clone(), engine.clone(), clock);
        Self { store, tools, engine, agent }
    }

    /// Runs the bench. With `out`, writes `bench.json`, `bench.jsonl` and
    /// one agent session log per instance under `out/sessions`, replacing
    /// earlier files of the same names.
    pub async fn run(&self, cfg: &BenchConfig, out: Option<&Path>) -> Result<BenchReport, BenchError> {
        cfg.policy.validate().map_err(|e| BenchError::Invalid(e.to_string()))?;
        if cfg.corpus == 0 {
            return Err(BenchError::Invalid("corpus must hold at least one instance".into()));
        }
        if let Some(out) = out {
            std::fs::create_dir_all(out.join(SESSIONS_DIR))?;
        }
        let specs = corpus(cfg.seed, cfg.corpus);
        let runs: Vec<Result<InstanceRun, BenchError>> =
            futures::stream::iter(specs.iter().map(|spec| self.instance(spec, cfg, out))).buffered(PARALLEL).collect().await;
        let mut records = Vec::with_capacity(runs.len());
        let bench_log = match out {
            Some(out) => Some(fresh_log("bench", &out.join(BENCH_LOG))?),
            None => None,
        };
        for run in runs {
            let run = run?;
            if let Some(log) = &bench_log {
                for body in run.log_events {
                    log.append(EventKind::CandidateScored, body)?;
                }
            }
            records.push(run.record);
        }
        if let Some(log) = &bench_log {
            log.close();
        }
        let report = assemble(cfg.seed, cfg.policy, records)?;
        if let Some(out) = out {
            std::fs::write(out.join(REPORT_FILE), report.to_json())?;
        }
        Ok(report)
    }

    async fn instance(&self, spec: &InstanceSpec, cfg: &BenchConfig, out: Option<&Path>) -> Result<InstanceRun, BenchError> {
        let scene = SyntheticScene::new(spec.scene_seed, SCENE_SIZE, SCENE_SIZE, Some(spec.lesion))
            .map_err(|e| BenchError::Invalid(e.to_string()))?;
        let factual = self.store.put(scene.to_artifact()).map_err(|e| BenchError::Invalid(e.to_string()))?;
        let mut results = BTreeMap::new();
        let mut log_events = Vec::new();

        if cfg.methods.iter().any(|m| matches!(m, Method::Single | Method::Ensemble)) {
            let region = self.report_region(&factual).await?;
            let configs = self.engine.enumerate(cfg.policy.budget)?;
            if cfg.methods.contains(&Method::Single) {
                let c = self.engine.run_candidate(&factual, &configs[0], region.as_ref(), &cfg.policy).await?;
                log_events.push(json!({"instance": spec.index, "method": Method::Single, "candidate": c}));
                results.insert(Method::Single, MethodResult::from_candidate(&c, 1));
            }
            if cfg.methods.contains(&Method::Ensemble) {
                let runs = configs.iter().map(|c| self.engine.run_candidate(&factual, c, region.as_ref(), &cfg.policy));
                let all: Vec<CandidateCF> = futures::future::join_all(runs).await.into_iter().collect::<Result<_, _>>()?;
                for c in &all {
                    log_events.push(json!({"instance": spec.index, "method": Method::Ensemble, "candidate": c}));
                }
                let best = external_best(&all, &cfg.policy).ok_or_else(|| BenchError::Invalid("no candidates".into()))?;
                results.insert(Method::Ensemble, MethodResult::from_candidate(&best, all.len()));
            }
        }

        if cfg.methods.contains(&Method::Agent) {
            let id = session_id(spec.index);
            let log = match out {
                Some(out) => fresh_log(&id, &out.join(SESSIONS_DIR).join(format!("{id}.jsonl")))?,
                None => SessionLog::in_memory(id.clone(), Arc::new(FixedClock(0))),
            };
            let query = Query::new(AGENT_QUERY, Some(factual.clone()), id).map_err(|e| BenchError::Invalid(e.to_string()))?;
            let scenario = builtin_scenario(AGENT_SCENARIO).expect("built-in scenario");
            let loop_cfg = LoopConfig { policy: cfg.policy, ..LoopConfig::default() };
            self.agent.run_session(&query, &mut ScriptedHead::new(scenario), &loop_cfg, &log, None).await?;
            log.close();
            let (best, n) = agent_best(&log.records().iter().map(|r| (r.kind, r.body.clone())).collect::<Vec<_>>())?;
            results.insert(Method::Agent, MethodResult::from_candidate(&best, n));
        }
        Ok(InstanceRun { record: InstanceRecord { spec: *spec, results }, log_events })
    }

    async fn report_region(&self, factual: &cfagent_core::ArtifactId) -> Result<Option<Region>, BenchError> {
        let out = self.tools.invoke_with_fallback(REPORT, &json!({"image": factual.to_ref()})).await;
        if let Some(e) = out.result.error {
            return Err(BenchError::Invalid(format!("report failed: {}", e.code)));
        }
        Ok(out.result.payload.get("region").and_then(|r| serde_json::from_value(r.clone()).ok()))
    }
}

pub fn session_id(index: usize) -> String {
    format!("bench-{index:04}")
}

fn fresh_log(session: &str, path: &Path) -> Result<SessionLog, BenchError> {
    if path.exists() {
        std::fs::remove_file(path)?;
    }
    Ok(SessionLog::with_file(session, Arc::new(FixedClock(0)), path)?)
}

/// Selected candidate and candidate count of the last successful workflow
/// in a session's events.
fn agent_best(events: &[(EventKind, Value)]) -> Result<(CandidateCF, usize), BenchError> {
    let payload = events
        .iter()
        .rev()
        .filter(|(kind, _)| *kind == EventKind::ToolResult)
        .map(|(_, body)| &body["result"])
        .find(|r| r["tool"] == CF_WORKFLOW && r["ok"] == true)
        .ok_or_else(|| BenchError::Invalid("agent session produced no workflow result".into()))?;
    let best: CandidateCF = serde_json::from_value(payload["payload"]["report"]["best"].clone())
        .map_err(|e| BenchError::Invalid(format!("workflow report: {e}")))?;
    let n = payload["payload"]["candidates"].as_u64().unwrap_or(0) as usize;
    Ok((best, n))
}

/// Rebuilds a report from the logs a bench run left in `dir`.
pub fn rebuild(dir: &Path) -> Result<BenchReport, BenchError> {
    let stored = load_report(dir)?;
    let specs = corpus(stored.seed, stored.instances);
    let mut per: Vec<BTreeMap<Method, MethodResult>> = vec![BTreeMap::new(); specs.len()];
    let mut ensemble: Vec<Vec<CandidateCF>> = vec![Vec::new(); specs.len()];
    let bench_log = dir.join(BENCH_LOG);
    if bench_log.exists() {
        for rec in read_jsonl(&bench_log)? {
            let i = rec.body["instance"].as_u64().ok_or_else(|| BenchError::Invalid("event without instance".into()))? as usize;
            if i >= specs.len() {
                return Err(BenchError::Invalid(format!("instance {i} outside the corpus")));
            }
            let c: CandidateCF = serde_json::from_value(rec.body["candidate"].clone())
                .map_err(|e| BenchError::Invalid(format!("candidate: {e}")))?;
            match rec.body["method"].as_str().and_then(Method::parse) {
                Some(Method::Single) => {
                    per[i].insert(Method::Single, MethodResult::from_candidate(&c, 1));
                }
                Some(Method::Ensemble) => ensemble[i].push(c),
                _ => return Err(BenchError::Invalid("unknown method in bench log".into())),
            }
        }
    }
    for (i, cands) in ensemble.iter().enumerate() {
        if let Some(best) = external_best(cands, &stored.policy) {
            per[i].insert(Method::Ensemble, MethodResult::from_candidate(&best, cands.len()));
        }
    }
    for (i, results) in per.iter_mut().enumerate() {
        let path = dir.join(SESSIONS_DIR).join(format!("{}.jsonl", session_id(i)));
        if path.exists() {
            let events: Vec<(EventKind, Value)> = read_jsonl(&path)?.into_iter().map(|r| (r.kind, r.body)).collect();
            let (best, n) = agent_best(&events)?;
            results.insert(Method::Agent, MethodResult::from_candidate(&best, n));
        }
    }
    let records = specs.into_iter().zip(per).map(|(spec, results)| InstanceRecord { spec, results }).collect();
    assemble(stored.seed, stored.policy, records)
}

pub fn load_report(dir: &Path) -> Result<BenchReport, BenchError> {
    let text = std::fs::read_to_string(dir.join(REPORT_FILE))?;
    serde_json::from_str(&text).map_err(|e| BenchError::Invalid(format!("{REPORT_FILE}: {e}")))
}

/// Every file a bench run writes, relative to its output directory.
pub fn output_files(dir: &Path) -> Vec<PathBuf> {
    let mut files = vec![PathBuf::from(REPORT_FILE), PathBuf::from(BENCH_LOG)];
    if let Ok(entries) = std::fs::read_dir(dir.join(SESSIONS_DIR)) {
        let mut names: Vec<PathBuf> =
            entries.filter_map(|e| e.ok()).map(|e| PathBuf::from(SESSIONS_DIR).join(e.file_name())).collect();
        names.sort();
        files.extend(names);
    }
    files
}
