//! Counterfactual quality metrics.
//!
//! * SIP: mean absolute pixel difference (lower preserves identity better).
//! * CPG: absolute change of the classifier score.
//! * CFR: fraction of pairs whose thresholded label changes.
//! * SSIM: mean local SSIM over all valid 11×11 Gaussian windows (σ = 1.5).
//!
//! All arithmetic is in `f64` over the stored `f32` pixels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ArtifactId, ImageArtifact};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const DYNAMIC_RANGE: f64 = 1.0;
pub const DEFAULT_FLIP_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("images must be at least 11x11 for SSIM, got {0}x{1}")]
    TooSmall(usize, usize),
    #[error("score {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("flip rate of an empty set")]
    EmptySet,
}

/// Borrowed single-channel pixel plane.
#[derive(Debug, Clone, Copy)]
pub struct Plane<'a> {
    pub width: usize,
    pub height: usize,
    pub pixels: &'a [f32],
}

impl<'a> Plane<'a> {
    pub fn new(width: usize, height: usize, pixels: &'a [f32]) -> Self {
        assert_eq!(width * height, pixels.len(), "plane size");
        Self { width, height, pixels }
    }
}

impl<'a> From<&'a ImageArtifact> for Plane<'a> {
    fn from(img: &'a ImageArtifact) -> Self {
        Plane::new(img.width as usize, img.height as usize, &img.pixels)
    }
}

fn same_dims(a: Plane<'_>, b: Plane<'_>) -> Result<(), MetricError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub cpg: f64,
    pub flipped: bool,
    pub ssim: f64,
    pub sip: f64,
}

impl MetricBundle {
    /// Scores plus both images give the full bundle.
    pub fn compute(
        factual: Plane<'_>,
        cf: Plane<'_>,
        score_factual: f64,
        score_cf: f64,
        threshold: f64,
    ) -> Result<Self, MetricError> {
        Ok(Self {
            cpg: cpg(score_factual, score_cf)?,
            flipped: flipped(score_factual, score_cf, threshold)?,
            ssim: ssim(factual, cf)?,
            sip: sip(factual, cf)?,
        })
    }
}

/// Per-pixel `|a - b|`, row-major.
pub fn abs_diff(a: Plane<'_>, b: Plane<'_>) -> Result<Vec<f64>, MetricError> {
    same_dims(a, b)?;
    Ok(a.pixels
        .iter()
        .zip(b.pixels)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
        .collect())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn sip(factual: Plane<'_>, cf: Plane<'_>) -> Result<f64, MetricError> {
    Ok(mean(&abs_diff(factual, cf)?))
}

fn check_score(s: f64) -> Result<f64, MetricError> {
    if s.is_finite() && (0.0..=1.0).contains(&s) {
        Ok(s)
    } else {
        Err(MetricError::OutOfRange(s))
    }
}

pub fn cpg(score_factual: f64, score_cf: f64) -> Result<f64, MetricError> {
    Ok((check_score(score_factual)? - check_score(score_cf)?).abs())
}

/// A pair flips when exactly one side is at or above the threshold.
pub fn flipped(score_factual: f64, score_cf: f64, threshold: f64) -> Result<bool, MetricError> {
    Ok((check_score(score_factual)? >= threshold) != (check_score(score_cf)? >= threshold))
}

pub fn cfr(pairs: &[(f64, f64)], threshold: f64) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let mut count = 0usize;
    for &(f, c) in pairs {
        if flipped(f, c, threshold)? {
            count += 1;
        }
    }
    Ok(count as f64 / pairs.len() as f64)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Valid-mode separable filtering: output is (w-10)×(h-10).
fn filter_valid(src: &[f64], width: usize, height: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; ow * height];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for x in 0..ow {
            horiz[y * ow + x] = taps.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * horiz[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Local SSIM map over every valid window, row-major (w-10)×(h-10).
pub fn ssim_map(a: Plane<'_>, b: Plane<'_>) -> Result<Vec<f64>, MetricError> {
    same_dims(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(MetricError::TooSmall(a.width, a.height));
    }
    let (w, h) = (a.width, a.height);
    let x: Vec<f64> = a.pixels.iter().map(|&v| f64::from(v)).collect();
    let y: Vec<f64> = b.pixels.iter().map(|&v| f64::from(v)).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let taps = gaussian_taps();
    let mx = filter_valid(&x, w, h, &taps);
    let my = filter_valid(&y, w, h, &taps);
    let mxx = filter_valid(&xx, w, h, &taps);
    let myy = filter_valid(&yy, w, h, &taps);
    let mxy = filter_valid(&xy, w, h, &taps);
    let c1 = (SSIM_K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE).powi(2);
    Ok((0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .collect())
}

pub fn ssim(a: Plane<'_>, b: Plane<'_>) -> Result<f64, MetricError> {
    Ok(mean(&ssim_map(a, b)?))
}

/// Per-pixel absolute difference between a factual image and its
/// counterfactual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceMap {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<f64>,
    pub normalized: bool,
    pub factual: Option<ArtifactId>,
    pub cf: Option<ArtifactId>,
}

impl DifferenceMap {
    pub fn mean(&self) -> f64 {
        mean(&self.pixels)
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(0.0, f64::max)
    }

    /// Stores the map as an image artifact (values narrowed to f32).
    pub fn to_artifact(&self) -> ImageArtifact {
        let pixels = self.pixels.iter().map(|&v| v as f32).collect();
        let mut img = ImageArtifact::new(self.width, self.height, pixels)
            .expect("difference values lie in [0, 1]")
            .with_provenance(if self.normalized { "difference-map:normalized" } else { "difference-map" })
            .with_meta("kind", "difference_map");
        if let Some(f) = &self.factual {
            img = img.with_meta("factual", f.as_str());
        }
        if let Some(c) = &self.cf {
            img = img.with_meta("cf", c.as_str());
        }
        img
    }
}

pub fn difference_map(factual: Plane<'_>, cf: Plane<'_>, normalize: bool) -> Result<DifferenceMap, MetricError> {
    let mut pixels = abs_diff(factual, cf)?;
    let max = pixels.iter().copied().fold(0.0, f64::max);
    let normalized = normalize && max > 0.0;
    if normalized {
        pixels.iter_mut().for_each(|p| *p /= max);
    }
    Ok(DifferenceMap {
        width: factual.width as u32,
        height: factual.height as u32,
        pixels,
        normalized,
        factual: None,
        cf: None,
    })
}

pub fn difference_map_of(factual: &ImageArtifact, cf: &ImageArtifact, normalize: bool) -> Result<DifferenceMap, MetricError> {
    let mut map = difference_map(factual.into(), cf.into(), normalize)?;
    map.factual = Some(factual.id.clone());
    map.cf = Some(cf.id.clone());
    Ok(map)
}
