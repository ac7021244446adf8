//! Browser demo: render a synthetic scene, sweep the five counterfactual
//! candidates and inspect the difference and SSIM maps of any of them.
//!
//! The plain Rust API (`Demo::build`, `Demo::run_sweep`, ...) is what the
//! wasm bindings wrap, so it can be tested natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use cfagent_core::cf::{enumerate_candidates, select_best, strength_grid, CandidateCF, CandidateConfig, SelectionPolicy};
use cfagent_core::colormap::to_rgba;
use cfagent_core::metrics::{difference_map, ssim_map, DEFAULT_FLIP_THRESHOLD};
use cfagent_core::stubs::{self, Lesion, Report, SyntheticScene};
use cfagent_core::{ImageArtifact, MetricBundle};

pub const SIZE: u32 = 64;

/// One row of a sweep, as handed to the page.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub index: usize,
    pub editor: String,
    pub strength: f64,
    pub score_cf: f64,
    pub metrics: MetricBundle,
    pub score: f64,
    pub best: bool,
}

#[wasm_bindgen]
pub struct Demo {
    factual: ImageArtifact,
    score_factual: f64,
    report: Report,
    candidates: Vec<ImageArtifact>,
}

fn editor_configs() -> Vec<CandidateConfig> {
    let editors = vec!["edit_a".to_string(), "edit_b".to_string()];
    let grids = [("edit_a".to_string(), strength_grid(&[0.5, 0.75, 1.0])), ("edit_b".to_string(), strength_grid(&[0.5, 1.0]))]
        .into_iter()
        .collect();
    enumerate_candidates(&editors, &grids, cfagent_core::cf::MAX_CANDIDATES).expect("fixed grid is valid")
}

impl Demo {
    pub fn build(seed: u64, lesion: Option<Lesion>) -> Result<Demo, String> {
        let factual = SyntheticScene::new(seed, SIZE, SIZE, lesion).map_err(|e| e.to_string())?.to_artifact();
        let report = stubs::report(&factual).map_err(|e| e.to_string())?;
        Ok(Demo { score_factual: stubs::classify(&factual.pixels), factual, report, candidates: Vec::new() })
    }

    pub fn ssim_side() -> u32 {
        SIZE + 1 - cfagent_core::metrics::SSIM_WINDOW as u32
    }

    pub fn factual(&self) -> &ImageArtifact {
        &self.factual
    }

    pub fn report(&self) -> &Report {
        &self.report
    }

    /// Generates all five candidates and scores them. `grounded` passes the
    /// reported region to the regional editor; otherwise it edits the
    /// centred disk.
    pub fn run_sweep(&mut self, lambda: f64, grounded: bool) -> Result<Vec<SweepRow>, String> {
        let policy = SelectionPolicy { lambda, ..SelectionPolicy::default() };
        policy.validate().map_err(|e| e.to_string())?;
        let region = if grounded { self.report.region } else { None };
        let mut images = Vec::new();
        let mut scored = Vec::new();
        for config in editor_configs() {
            let strength = config.args["strength"].as_f64().expect("strength grid");
            let edited = match config.editor.as_str() {
                "edit_a" => stubs::edit_region(&self.factual, region, strength),
                _ => stubs::edit_global(&self.factual, strength),
            }
            .map_err(|e| e.to_string())?
            .unwrap_or_else(|| self.factual.clone());
            let score_cf = stubs::classify(&edited.pixels);
            let metrics = MetricBundle::compute(
                (&self.factual).into(),
                (&edited).into(),
                self.score_factual,
                score_cf,
                DEFAULT_FLIP_THRESHOLD,
            )
            .map_err(|e| e.to_string())?;
            scored.push(CandidateCF {
                image: edited.id.clone(),
                served_by: config.editor.clone(),
                score_factual: self.score_factual,
                score_cf,
                score: policy.score(&metrics),
                metrics,
                config,
            });
            images.push(edited);
        }
        let best = select_best(&scored).map_err(|e| e.to_string())?.config.index;
        self.candidates = images;
        Ok(scored
            .into_iter()
            .map(|c| SweepRow {
                index: c.config.index,
                strength: c.config.args["strength"].as_f64().unwrap_or_default(),
                best: c.config.index == best,
                editor: c.config.editor,
                score_cf: c.score_cf,
                metrics: c.metrics,
                score: c.score,
            })
            .collect())
    }

    fn candidate(&self, index: usize) -> Result<&ImageArtifact, String> {
        self.candidates.get(index).ok_or_else(|| format!("no candidate {index}; run a sweep first"))
    }

    /// Normalised `|factual - candidate|`.
    pub fn difference(&self, index: usize) -> Result<Vec<f32>, String> {
        let cf = self.candidate(index)?;
        let map = difference_map((&self.factual).into(), cf.into(), true).map_err(|e| e.to_string())?;
        Ok(map.pixels.iter().map(|&v| v as f32).collect())
    }

    /// Local SSIM over every full window position, clamped at zero. The map
    /// is `ssim_side()` pixels square.
    pub fn similarity(&self, index: usize) -> Result<Vec<f32>, String> {
        let cf = self.candidate(index)?;
        let map = ssim_map((&self.factual).into(), cf.into()).map_err(|e| e.to_string())?;
        Ok(map.iter().map(|&v| v.max(0.0) as f32).collect())
    }
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
impl Demo {
    /// A scene with a lesion at `(cx, cy)` of radius `r` and amplitude `a`,
    /// or a healthy scene when `healthy` is set.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, cx: f64, cy: f64, r: f64, a: f64, healthy: bool) -> Result<Demo, JsError> {
        let lesion = (!healthy).then_some(Lesion { cx, cy, r, a });
        Demo::build(u64::from(seed), lesion).map_err(js)
    }

    pub fn size(&self) -> u32 {
        SIZE
    }

    #[wasm_bindgen(js_name = ssimSize)]
    pub fn ssim_size(&self) -> u32 {
        Demo::ssim_side()
    }

    #[wasm_bindgen(js_name = classifierScore)]
    pub fn classifier_score(&self) -> f64 {
        self.score_factual
    }

    pub fn findings(&self) -> String {
        self.report.findings.clone()
    }

    #[wasm_bindgen(js_name = factualRgba)]
    pub fn factual_rgba(&self) -> Vec<u8> {
        to_rgba(&self.factual.pixels, false)
    }

    /// Runs the sweep and returns its rows as a JSON array.
    pub fn sweep(&mut self, lambda: f64, grounded: bool) -> Result<String, JsError> {
        let rows = self.run_sweep(lambda, grounded).map_err(js)?;
        Ok(serde_json::to_string(&rows).expect("rows serialize"))
    }

    #[wasm_bindgen(js_name = candidateRgba)]
    pub fn candidate_rgba(&self, index: usize) -> Result<Vec<u8>, JsError> {
        Ok(to_rgba(&self.candidate(index).map_err(js)?.pixels, false))
    }

    #[wasm_bindgen(js_name = differenceRgba)]
    pub fn difference_rgba(&self, index: usize) -> Result<Vec<u8>, JsError> {
        Ok(to_rgba(&self.difference(index).map_err(js)?, true))
    }

    #[wasm_bindgen(js_name = ssimRgba)]
    pub fn ssim_rgba(&self, index: usize) -> Result<Vec<u8>, JsError> {
        Ok(to_rgba(&self.similarity(index).map_err(js)?, false))
    }
}
