#![allow(dead_code)]

use std::sync::Arc;

use cfagent_core::stubs::{Lesion, SyntheticScene};
use cfagent_core::{ArtifactId, ArtifactStore, FixedClock, Query, SessionLog};
use cfagent_runtime::agent::{Agent, LoopConfig, SessionControl, SessionOutcome};
use cfagent_runtime::engine::{CfEngine, EngineConfig};
use cfagent_runtime::head::{builtin_scenario, ScriptedHead};
use cfagent_runtime::suite::{stub_toolwire, SuiteHooks};
use cfagent_runtime::toolwire::Toolwire;

pub struct Harness {
    pub store: Arc<ArtifactStore>,
    pub tools: Arc<Toolwire>,
    pub agent: Agent,
}

impl Harness {
    pub fn new() -> Self {
        Self::with_hooks(SuiteHooks::default())
    }

    pub fn with_hooks(hooks: SuiteHooks) -> Self {
        let store = Arc::new(ArtifactStore::in_memory());
        let clock = Arc::new(FixedClock(1_000));
        let tools = Arc::new(stub_toolwire(&store, clock.clone(), &hooks));
        let engine = Arc::new(CfEngine::new(tools.clone(), store.clone(), EngineConfig::default()));
        let agent = Agent::new(tools.clone(), engine, clock);
        Self { store, tools, agent }
    }

    pub fn put_scene(&self, seed: u64, lesion: Option<Lesion>) -> ArtifactId {
        self.store.put(SyntheticScene::new(seed, 64, 64, lesion).unwrap().to_artifact()).unwrap()
    }

    pub async fn run(
        &self,
        scenario: &str,
        text: &str,
        image: &ArtifactId,
        cfg: &LoopConfig,
        control: Option<&SessionControl>,
    ) -> (SessionOutcome, SessionLog) {
        let log = new_log();
        let outcome = self.run_in(&log, scenario, text, image, cfg, control).await;
        (outcome, log)
    }

    pub async fn run_in(
        &self,
        log: &SessionLog,
        scenario: &str,
        text: &str,
        image: &ArtifactId,
        cfg: &LoopConfig,
        control: Option<&SessionControl>,
    ) -> SessionOutcome {
        let query = Query::new(text, Some(image.clone()), "s").unwrap();
        let mut head = ScriptedHead::new(builtin_scenario(scenario).unwrap());
        self.agent.run_session(&query, &mut head, cfg, log, control).await.unwrap()
    }

    pub fn total_calls(&self) -> u64 {
        self.tools.listing().iter().map(|d| self.tools.calls(&d.name)).sum()
    }
}

pub fn new_log() -> SessionLog {
    SessionLog::in_memory("s", Arc::new(FixedClock(1_000)))
}

/// Event kinds in log order, as their wire names.
pub fn kinds(log: &SessionLog) -> Vec<String> {
    log.records().iter().map(|r| serde_json::to_value(r.kind).unwrap().as_str().unwrap().to_string()).collect()
}

/// Polls until the log holds `n` records of `kind`.
pub async fn wait_for(log: &SessionLog, kind: &str, n: usize) {
    for _ in 0..2_000 {
        if kinds(log).iter().filter(|k| *k == kind).count() >= n {
            return;
        }
        tokio::time::sleep(std::time::Duration::from_millis(2)).await;
    }
    panic!("no {n} x {kind} in {:?}", kinds(log));
}

/// Polls until a control record with `state` appears `n` times.
pub async fn wait_for_control(log: &SessionLog, state: &str, n: usize) {
    for _ in 0..2_000 {
        let seen = log.records().iter().filter(|r| r.body.get("state").and_then(|s| s.as_str()) == Some(state)).count();
        if seen >= n {
            return;
        }
        tokio::time::sleep(std::time::Duration::from_millis(2)).await;
    }
    panic!("control state {state} never reached {n}: {:?}", kinds(log));
}

/// Strong lesion well inside the centred disk.
pub fn strong_lesion() -> Lesion {
    Lesion { cx: 20.0, cy: 20.0, r: 6.0, a: 0.8 }
}

/// Lesion tucked into the upper-left corner, mostly outside the centred
/// disk the editors fall back to without a region.
pub fn corner_lesion() -> Lesion {
    Lesion { cx: 9.0, cy: 9.0, r: 6.0, a: 0.7 }
}
