//! Candidate enumeration and selection for the generate–test–select loop.
//!
//! Execution (calling editors and the classifier) lives in the runtime; this
//! module holds the pure parts so they can be checked exhaustively.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::image::ArtifactId;
use crate::metrics::{MetricBundle, DEFAULT_FLIP_THRESHOLD};

/// Hard ceiling on candidates per instance.
pub const MAX_CANDIDATES: usize = 5;

pub type ArgMap = BTreeMap<String, Value>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CfError {
    #[error("empty argument grid for editor {0}")]
    EmptyGrid(String),
    #[error("no editors given")]
    NoEditors,
    #[error("budget {0} outside [1, 5]")]
    BadBudget(usize),
    #[error("lambda {0} must be finite and >= 0")]
    BadLambda(f64),
    #[error("no candidates to select from")]
    NoCandidates,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionPolicy {
    pub lambda: f64,
    pub threshold: f64,
    pub budget: usize,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self { lambda: 1.0, threshold: DEFAULT_FLIP_THRESHOLD, budget: MAX_CANDIDATES }
    }
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<(), CfError> {
        if !(1..=MAX_CANDIDATES).contains(&self.budget) {
            return Err(CfError::BadBudget(self.budget));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(CfError::BadLambda(self.lambda));
        }
        Ok(())
    }

    /// Combined objective: prediction gain minus weighted identity loss.
    pub fn score(&self, metrics: &MetricBundle) -> f64 {
        metrics.cpg - self.lambda * metrics.sip
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateConfig {
    pub editor: String,
    pub args: ArgMap,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateCF {
    pub config: CandidateConfig,
    pub image: ArtifactId,
    /// Tool that actually produced the image (differs from `config.editor`
    /// after a fallback).
    pub served_by: String,
    pub score_factual: f64,
    pub score_cf: f64,
    pub metrics: MetricBundle,
    pub score: f64,
}

/// Round-robin over editors, then grid order, truncated to `budget`.
pub fn enumerate_candidates(
    editors: &[String],
    grids: &BTreeMap<String, Vec<ArgMap>>,
    budget: usize,
) -> Result<Vec<CandidateConfig>, CfError> {
    if !(1..=MAX_CANDIDATES).contains(&budget) {
        return Err(CfError::BadBudget(budget));
    }
    if editors.is_empty() {
        return Err(CfError::NoEditors);
    }
    let mut columns = Vec::with_capacity(editors.len());
    for e in editors {
        match grids.get(e) {
            Some(g) if !g.is_empty() => columns.push((e, g)),
            _ => return Err(CfError::EmptyGrid(e.clone())),
        }
    }
    let depth = columns.iter().map(|(_, g)| g.len()).max().unwrap_or(0);
    let mut out = Vec::new();
    'outer: for level in 0..depth {
        for (editor, grid) in &columns {
            if let Some(args) = grid.get(level) {
                if out.len() == budget {
                    break 'outer;
                }
                out.push(CandidateConfig { editor: (*editor).clone(), args: args.clone(), index: out.len() });
            }
        }
    }
    Ok(out)
}

/// Ranking used by selection: higher score, then higher SSIM, then lower
/// index. `Ordering::Less` means `a` ranks first.
pub fn rank(a: &CandidateCF, b: &CandidateCF) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| b.metrics.ssim.total_cmp(&a.metrics.ssim))
        .then_with(|| a.config.index.cmp(&b.config.index))
}

pub fn select_best(candidates: &[CandidateCF]) -> Result<&CandidateCF, CfError> {
    candidates.iter().min_by(|a, b| rank(a, b)).ok_or(CfError::NoCandidates)
}

/// Strength-only grid helper: `[{"strength": s}, ...]`.
pub fn strength_grid(strengths: &[f64]) -> Vec<ArgMap> {
    strengths
        .iter()
        .map(|&s| BTreeMap::from([("strength".to_string(), Value::from(s))]))
        .collect()
}
