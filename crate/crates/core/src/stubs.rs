//! Deterministic synthetic tools.
//!
//! Scenes are a faint vertical gradient with seeded noise and at most one
//! hard-edged bright disk (the "lesion"). Every tool is a pure function of
//! its arguments and the pixels of the images it reads, so any behaviour
//! downstream can be checked against hand arithmetic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageArtifact;
use crate::types::meta_f64;

pub const CLASSIFIER_GAIN: f64 = 4.0;
pub const NOISE_AMPLITUDE: f64 = 0.02;
pub const MIN_DIM: u32 = 16;
pub const MAX_DIM: u32 = 512;
/// Half-width of the box blur used by the global editor.
pub const BLUR_RADIUS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StubError {
    #[error("dimensions {0}x{1} outside [16, 512]")]
    BadDimensions(u32, u32),
    #[error("bad region: {0}")]
    BadRegion(String),
    #[error("strength {0} outside [0, 1]")]
    BadStrength(f64),
    #[error("artifact has no synthetic ground truth")]
    NoGroundTruth,
}

impl StubError {
    /// Wire error code.
    pub fn code(&self) -> &'static str {
        match self {
            StubError::BadDimensions(..) => "bad_dimensions",
            StubError::BadRegion(_) => "bad_region",
            StubError::BadStrength(_) => "bad_args",
            StubError::NoGroundTruth => "no_ground_truth",
        }
    }
}

/// xorshift64* seeded only by `seed`.
#[derive(Debug, Clone)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    const SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

    pub fn new(seed: u64) -> Self {
        let state = seed ^ Self::SEED_MIX;
        Self { state: if state == 0 { Self::SEED_MIX } else { state } }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in [0, 1) with 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// A disk region in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Region {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 - self.cx;
        let dy = y as f64 - self.cy;
        dx * dx + dy * dy <= self.r * self.r
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.r > 0.0
            && [self.cx, self.cy, self.r].iter().all(|v| v.is_finite())
            && self.cx - self.r >= 0.0
            && self.cy - self.r >= 0.0
            && self.cx + self.r <= f64::from(width) - 1.0
            && self.cy + self.r <= f64::from(height) - 1.0
    }

    /// Largest disk centred in the image; used when no region is known.
    pub fn inscribed(width: u32, height: u32) -> Self {
        let cx = (f64::from(width) - 1.0) / 2.0;
        let cy = (f64::from(height) - 1.0) / 2.0;
        Self { cx, cy, r: cx.min(cy) }
    }

    pub fn mask(&self, width: u32, height: u32) -> Vec<bool> {
        let (w, h) = (width as usize, height as usize);
        (0..w * h).map(|i| self.contains(i % w, i / w)).collect()
    }

    /// `upper-left`, `upper-right`, `lower-left` or `lower-right`.
    pub fn quadrant(&self, width: u32, height: u32) -> &'static str {
        let left = self.cx < f64::from(width) / 2.0;
        let upper = self.cy < f64::from(height) / 2.0;
        match (upper, left) {
            (true, true) => "upper-left",
            (true, false) => "upper-right",
            (false, true) => "lower-left",
            (false, false) => "lower-right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    /// Added intensity inside the disk, in [0, 1].
    pub a: f64,
}

impl Lesion {
    pub fn region(&self) -> Region {
        Region { cx: self.cx, cy: self.cy, r: self.r }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub g0: f64,
    pub g1: f64,
    pub noise: f64,
    pub lesion: Option<Lesion>,
}

impl SyntheticScene {
    /// Background parameters are drawn from `seed`; a zero-amplitude lesion
    /// is the same scene as no lesion.
    pub fn new(seed: u64, width: u32, height: u32, lesion: Option<Lesion>) -> Result<Self, StubError> {
        if !(MIN_DIM..=MAX_DIM).contains(&width) || !(MIN_DIM..=MAX_DIM).contains(&height) {
            return Err(StubError::BadDimensions(width, height));
        }
        let lesion = match lesion {
            Some(l) if !(0.0..=1.0).contains(&l.a) => {
                return Err(StubError::BadRegion(format!("lesion amplitude {} outside [0, 1]", l.a)))
            }
            Some(l) if !l.region().fits(width, height) => {
                return Err(StubError::BadRegion(format!("lesion disk {:?} not inside {width}x{height}", l.region())))
            }
            Some(l) if l.a == 0.0 => None,
            other => other,
        };
        let mut rng = XorShift64Star::new(seed);
        let g0 = 0.30 + 0.10 * rng.next_f64();
        let g1 = g0 + 0.05 * (2.0 * rng.next_f64() - 1.0);
        Ok(Self { seed, width, height, g0, g1, noise: NOISE_AMPLITUDE, lesion })
    }

    /// Gradient plus noise, no lesion.
    pub fn render_background(&self) -> Vec<f32> {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut rng = XorShift64Star::new(self.seed);
        // skip the two background draws
        rng.next_f64();
        rng.next_f64();
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            let t = y as f64 / (h - 1) as f64;
            let g = self.g0 + (self.g1 - self.g0) * t;
            for _ in 0..w {
                let v = g + self.noise * (2.0 * rng.next_f64() - 1.0);
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        out
    }

    pub fn render(&self) -> Vec<f32> {
        let mut px = self.render_background();
        if let Some(lesion) = self.lesion {
            let w = self.width as usize;
            let region = lesion.region();
            for (i, p) in px.iter_mut().enumerate() {
                if region.contains(i % w, i / w) {
                    *p = (f64::from(*p) + lesion.a).clamp(0.0, 1.0) as f32;
                }
            }
        }
        px
    }

    pub fn to_artifact(&self) -> ImageArtifact {
        let mut img = ImageArtifact::new(self.width, self.height, self.render())
            .expect("scene pixels are clamped")
            .with_provenance(format!("stub-gen:seed={}", self.seed))
            .with_meta("scene.kind", "generated");
        for (k, v) in self.background_meta() {
            img.meta.insert(k, v);
        }
        if let Some(l) = self.lesion {
            img = img
                .with_meta("scene.lesion.cx", l.cx.to_string())
                .with_meta("scene.lesion.cy", l.cy.to_string())
                .with_meta("scene.lesion.r", l.r.to_string())
                .with_meta("scene.lesion.a", l.a.to_string());
        }
        img
    }

    /// Keys that let an editor re-render the lesion-free background. They
    /// are carried forward onto derived images.
    pub fn background_meta(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("scene.seed".to_string(), self.seed.to_string()),
            ("scene.width".to_string(), self.width.to_string()),
            ("scene.height".to_string(), self.height.to_string()),
        ])
    }

    /// Background scene recorded on an artifact, if any.
    pub fn background_from_meta(meta: &BTreeMap<String, String>) -> Option<Self> {
        let seed = meta.get("scene.seed")?.parse().ok()?;
        let width = meta.get("scene.width")?.parse().ok()?;
        let height = meta.get("scene.height")?.parse().ok()?;
        Self::new(seed, width, height, None).ok()
    }

    /// Full ground truth; only images produced by the generator carry it.
    pub fn from_meta(meta: &BTreeMap<String, String>) -> Option<Self> {
        if meta.get("scene.kind").map(String::as_str) != Some("generated") {
            return None;
        }
        let mut scene = Self::background_from_meta(meta)?;
        if meta.contains_key("scene.lesion.cx") {
            scene.lesion = Some(Lesion {
                cx: meta_f64(meta, "scene.lesion.cx")?,
                cy: meta_f64(meta, "scene.lesion.cy")?,
                r: meta_f64(meta, "scene.lesion.r")?,
                a: meta_f64(meta, "scene.lesion.a")?,
            });
        }
        Some(scene)
    }
}

/// Linear-interpolated percentile over sorted values, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Pathology score: `clamp01(4 · (p99 − mean))`.
pub fn classify(pixels: &[f32]) -> f64 {
    let mut v: Vec<f64> = pixels.iter().map(|&p| f64::from(p)).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.sort_by(f64::total_cmp);
    let p99 = percentile(&v, 0.99);
    (CLASSIFIER_GAIN * (p99 - mean)).clamp(0.0, 1.0)
}

fn check_strength(s: f64) -> Result<(), StubError> {
    if s.is_finite() && (0.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(StubError::BadStrength(s))
    }
}

fn derived(source: &ImageArtifact, pixels: Vec<f32>, provenance: String) -> ImageArtifact {
    let mut img = ImageArtifact::new(source.width, source.height, pixels)
        .expect("editor output is clamped")
        .with_provenance(provenance)
        .with_meta("source", source.id.as_str());
    for (k, v) in &source.meta {
        if matches!(k.as_str(), "scene.seed" | "scene.width" | "scene.height") {
            img.meta.insert(k.clone(), v.clone());
        }
    }
    img
}

/// Region-grounded editor: blends the lesion-free background into the disk.
/// Without a region the centred inscribed disk is used. Strength 0 returns
/// `None` (the input is the output).
pub fn edit_region(image: &ImageArtifact, region: Option<Region>, strength: f64) -> Result<Option<ImageArtifact>, StubError> {
    check_strength(strength)?;
    let region = region.unwrap_or_else(|| Region::inscribed(image.width, image.height));
    if !region.fits(image.width, image.height) {
        return Err(StubError::BadRegion(format!("disk {region:?} not inside {}x{}", image.width, image.height)));
    }
    if strength == 0.0 {
        return Ok(None);
    }
    let scene = SyntheticScene::background_from_meta(&image.meta).ok_or(StubError::NoGroundTruth)?;
    if scene.width != image.width || scene.height != image.height {
        return Err(StubError::NoGroundTruth);
    }
    let bg = scene.render_background();
    let w = image.width as usize;
    let s = strength as f32;
    let pixels = image
        .pixels
        .iter()
        .zip(&bg)
        .enumerate()
        .map(|(i, (&p, &b))| {
            let m = if region.contains(i % w, i / w) { s } else { 0.0 };
            (p * (1.0 - m) + b * m).clamp(0.0, 1.0)
        })
        .collect();
    Ok(Some(derived(
        image,
        pixels,
        format!("stub-edit-region:strength={strength}:cx={}:cy={}:r={}", region.cx, region.cy, region.r),
    )))
}

/// Mean over a (2R+1)² box with edge clamping.
pub fn box_blur(pixels: &[f32], width: usize, height: usize) -> Vec<f32> {
    let rad = BLUR_RADIUS as isize;
    let mut out = Vec::with_capacity(pixels.len());
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc = 0.0f64;
            for dy in -rad..=rad {
                let yy = (y + dy).clamp(0, height as isize - 1) as usize;
                for dx in -rad..=rad {
                    let xx = (x + dx).clamp(0, width as isize - 1) as usize;
                    acc += f64::from(pixels[yy * width + xx]);
                }
            }
            out.push((acc / ((2 * rad + 1) * (2 * rad + 1)) as f64) as f32);
        }
    }
    out
}

/// Global editor: suppresses everything brighter than its local mean.
pub fn edit_global(image: &ImageArtifact, strength: f64) -> Result<Option<ImageArtifact>, StubError> {
    check_strength(strength)?;
    if strength == 0.0 {
        return Ok(None);
    }
    let blurred = box_blur(&image.pixels, image.width as usize, image.height as usize);
    let s = strength as f32;
    let pixels = image
        .pixels
        .iter()
        .zip(&blurred)
        .map(|(&p, &b)| (p - s * (p - b).max(0.0)).clamp(0.0, 1.0))
        .collect();
    Ok(Some(derived(image, pixels, format!("stub-edit-global:strength={strength}"))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub findings: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
}

pub const NO_FINDING: &str = "no finding";

pub fn report(image: &ImageArtifact) -> Result<Report, StubError> {
    let scene = SyntheticScene::from_meta(&image.meta).ok_or(StubError::NoGroundTruth)?;
    Ok(match scene.lesion {
        Some(l) => Report {
            findings: format!("lesion in {} quadrant", l.region().quadrant(image.width, image.height)),
            region: Some(l.region()),
        },
        None => Report { findings: NO_FINDING.into(), region: None },
    })
}

/// Binary mask of pixels above `mean + 2σ` (population σ).
pub fn segment(image: &ImageArtifact) -> ImageArtifact {
    let n = image.pixels.len() as f64;
    let mean = image.pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / n;
    let var = image.pixels.iter().map(|&p| (f64::from(p) - mean).powi(2)).sum::<f64>() / n;
    let cut = mean + 2.0 * var.sqrt();
    let pixels = image.pixels.iter().map(|&p| if f64::from(p) > cut { 1.0 } else { 0.0 }).collect();
    ImageArtifact::new(image.width, image.height, pixels)
        .expect("mask is binary")
        .with_provenance("stub-segment")
        .with_meta("kind", "mask")
        .with_meta("source", image.id.as_str())
}
