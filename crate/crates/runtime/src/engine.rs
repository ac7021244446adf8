//! Generate, test and select: fans candidate edits out through the tool
//! registry, scores them and keeps the best.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use cfagent_core::cf::{self, ArgMap, CandidateCF, CandidateConfig, CfError, SelectionPolicy};
use cfagent_core::metrics::{difference_map_of, MetricError};
use cfagent_core::stubs::Region;
use cfagent_core::{ArtifactId, ArtifactStore, EventKind, MetricBundle, SessionLog, ToolResult};

use crate::stub_server::{CLASSIFY, EDIT_A, EDIT_B};
use crate::toolwire::Toolwire;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Selection(#[from] CfError),
    #[error("editor {editor} failed: {code}: {message}")]
    EditorFailed { editor: String, code: String, message: String },
    #[error("classifier failed: {code}: {message}")]
    ClassifierFailed { code: String, message: String },
    #[error("tool returned an unexpected payload: {0}")]
    BadPayload(String),
    #[error("artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl EngineError {
    /// Error code used when the failure becomes a tool observation.
    pub fn code(&self) -> String {
        match self {
            EngineError::Selection(_) => "bad_policy".into(),
            EngineError::EditorFailed { code, .. } => format!("editor_failed:{code}"),
            EngineError::ClassifierFailed { code, .. } => format!("classifier_failed:{code}"),
            EngineError::BadPayload(_) => "bad_payload".into(),
            EngineError::Artifact(_) => "unknown_artifact".into(),
            EngineError::Metric(_) => "metric".into(),
        }
    }
}

/// Editors and their argument grids, in enumeration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub editors: Vec<String>,
    pub grids: BTreeMap<String, Vec<ArgMap>>,
    pub classifier: String,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            editors: vec![EDIT_A.into(), EDIT_B.into()],
            grids: BTreeMap::from([
                (EDIT_A.into(), cf::strength_grid(&[0.5, 0.75, 1.0])),
                (EDIT_B.into(), cf::strength_grid(&[0.5, 1.0])),
            ]),
            classifier: CLASSIFY.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfReport {
    pub factual: ArtifactId,
    pub prompt: String,
    pub region: Option<Region>,
    pub best: CandidateCF,
    pub all: Vec<CandidateCF>,
    pub difference_map: ArtifactId,
    /// Candidates sent to editors (fallback hops are not counted).
    pub editor_calls: usize,
}

impl CfReport {
    /// Observation handed back to the head. Artifact ids appear in `@` form
    /// so templates and actions can reuse them; the full report rides along.
    pub fn payload(&self) -> Value {
        json!({
            "best": {
                "index": self.best.config.index,
                "editor": self.best.config.editor,
                "served_by": self.best.served_by,
                "image": self.best.image.to_ref(),
                "score": self.best.score,
                "cpg": self.best.metrics.cpg,
                "flipped": self.best.metrics.flipped,
                "ssim": self.best.metrics.ssim,
                "sip": self.best.metrics.sip,
            },
            "difference_map": self.difference_map.to_ref(),
            "candidates": self.all.len(),
            "report": self,
        })
    }
}

pub struct CfEngine {
    tools: Arc<Toolwire>,
    store: Arc<ArtifactStore>,
    config: EngineConfig,
}

fn artifact_of(result: &ToolResult, key: &str) -> Result<ArtifactId, EngineError> {
    result
        .payload
        .get(key)
        .and_then(Value::as_str)
        .and_then(|s| ArtifactId::from_ref(s).ok())
        .ok_or_else(|| EngineError::BadPayload(format!("{}: missing {key}", result.tool)))
}

pub fn region_args(region: &Region) -> [(String, Value); 3] {
    [("cx".into(), json!(region.cx)), ("cy".into(), json!(region.cy)), ("r".into(), json!(region.r))]
}

impl CfEngine {
    pub fn new(tools: Arc<Toolwire>, store: Arc<ArtifactStore>, config: EngineConfig) -> Self {
        Self { tools, store, config }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn enumerate(&self, budget: usize) -> Result<Vec<CandidateConfig>, EngineError> {
        Ok(cf::enumerate_candidates(&self.config.editors, &self.config.grids, budget)?)
    }

    pub async fn classify(&self, image: &ArtifactId) -> Result<f64, EngineError> {
        let out = self.tools.invoke_with_fallback(&self.config.classifier, &json!({ "image": image.to_ref() })).await;
        if let Some(e) = &out.result.error {
            return Err(EngineError::ClassifierFailed { code: e.code.clone(), message: e.message.clone() });
        }
        out.result
            .payload
            .get("score")
            .and_then(Value::as_f64)
            .ok_or_else(|| EngineError::BadPayload("classifier: missing score".into()))
    }

    /// Edits, classifies and scores one configuration.
    pub async fn run_candidate(
        &self,
        factual: &ArtifactId,
        config: &CandidateConfig,
        region: Option<&Region>,
        policy: &SelectionPolicy,
    ) -> Result<CandidateCF, EngineError> {
        let score_factual = self.classify(factual).await?;
        self.score_candidate(factual, score_factual, config, region, policy).await
    }

    async fn score_candidate(
        &self,
        factual: &ArtifactId,
        score_factual: f64,
        config: &CandidateConfig,
        region: Option<&Region>,
        policy: &SelectionPolicy,
    ) -> Result<CandidateCF, EngineError> {
        let mut args: Map<String, Value> = config.args.clone().into_iter().collect();
        args.insert("image".into(), json!(factual.to_ref()));
        if let Some(r) = region {
            args.extend(region_args(r));
        }
        let out = self.tools.invoke_with_fallback(&config.editor, &Value::Object(args)).await;
        if let Some(e) = &out.result.error {
            return Err(EngineError::EditorFailed { editor: config.editor.clone(), code: e.code.clone(), message: e.message.clone() });
        }
        let image = artifact_of(&out.result, "image")?;
        let score_cf = self.classify(&image).await?;
        let metrics = self.metrics(factual, &image, score_factual, score_cf, policy.threshold)?;
        Ok(CandidateCF {
            config: config.clone(),
            image,
            served_by: out.served_by.unwrap_or_else(|| config.editor.clone()),
            score_factual,
            score_cf,
            score: policy.score(&metrics),
            metrics,
        })
    }

    /// Metric bundle recomputed from stored pixels.
    pub fn metrics(
        &self,
        factual: &ArtifactId,
        cf: &ArtifactId,
        score_factual: f64,
        score_cf: f64,
        threshold: f64,
    ) -> Result<MetricBundle, EngineError> {
        let f = self.store.get(factual).map_err(|e| EngineError::Artifact(e.to_string()))?;
        let c = self.store.get(cf).map_err(|e| EngineError::Artifact(e.to_string()))?;
        Ok(MetricBundle::compute((&*f).into(), (&*c).into(), score_factual, score_cf, threshold)?)
    }

    /// Enumerates within the budget, runs every candidate concurrently,
    /// selects the best and stores its difference map. When `log` is given,
    /// one `candidate_scored` event per candidate is appended in index order.
    pub async fn run_workflow(
        &self,
        factual: &ArtifactId,
        prompt: &str,
        region: Option<Region>,
        policy: &SelectionPolicy,
        log: Option<&SessionLog>,
    ) -> Result<CfReport, EngineError> {
        policy.validate()?;
        let configs = self.enumerate(policy.budget)?;
        assert!(configs.len() <= policy.budget, "enumeration exceeded the budget");
        let score_factual = self.classify(factual).await?;
        let runs = configs
            .iter()
            .map(|c| self.score_candidate(factual, score_factual, c, region.as_ref(), policy));
        let all: Vec<CandidateCF> = futures::future::join_all(runs).await.into_iter().collect::<Result<_, _>>()?;
        if let Some(log) = log {
            for c in &all {
                log.append(EventKind::CandidateScored, serde_json::to_value(c).expect("candidate serializes"))
                    .map_err(|e| EngineError::Artifact(e.to_string()))?;
            }
        }
        let best = cf::select_best(&all)?.clone();
        let f = self.store.get(factual).map_err(|e| EngineError::Artifact(e.to_string()))?;
        let c = self.store.get(&best.image).map_err(|e| EngineError::Artifact(e.to_string()))?;
        let map = difference_map_of(&f, &c, true)?;
        let difference_map = self.store.put(map.to_artifact()).map_err(|e| EngineError::Artifact(e.to_string()))?;
        Ok(CfReport {
            factual: factual.clone(),
            prompt: prompt.to_string(),
            region,
            best,
            editor_calls: all.len(),
            all,
            difference_map,
        })
    }
}
