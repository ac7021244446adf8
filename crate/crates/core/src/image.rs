//! Single-channel float images and the AIMG1 byte format.
//!
//! An [`ImageArtifact`] is addressed by the SHA-256 of its canonical AIMG1
//! encoding. Provenance and meta are descriptive only and do not take part
//! in the id.
//!
//! AIMG1 layout (little-endian throughout):
//!
//! | bytes | field                         |
//! |-------|-------------------------------|
//! | 5     | magic `AIMG1`                 |
//! | 4     | width `u32`                   |
//! | 4     | height `u32`                  |
//! | 1     | channels `u8` (always 1)      |
//! | 1     | dtype `u8` (0 = float32)      |
//! | 4·n   | `f32` pixels, row-major       |

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ArtifactError;

pub const MAGIC: &[u8; 5] = b"AIMG1";
pub const HEADER_LEN: usize = 15;
pub const DTYPE_F32: u8 = 0;

/// Hex-encoded content hash of an artifact.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArtifactId(String);

impl ArtifactId {
    /// Wraps a hex string. Uppercase digits are folded to lowercase.
    pub fn new(hex: impl Into<String>) -> Result<Self, ArtifactError> {
        let hex = hex.into().to_ascii_lowercase();
        if hex.is_empty() || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(ArtifactError::BadId(hex));
        }
        Ok(Self(hex))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The `@<hex>` form used in actions and wire frames.
    pub fn to_ref(&self) -> String {
        format!("@{}", self.0)
    }

    /// Parses `@<hex>`.
    pub fn from_ref(s: &str) -> Result<Self, ArtifactError> {
        match s.strip_prefix('@') {
            Some(hex) => Self::new(hex),
            None => Err(ArtifactError::BadId(s.to_string())),
        }
    }
}

impl fmt::Display for ArtifactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageArtifact {
    pub id: ArtifactId,
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub pixels: Vec<f32>,
    #[serde(default)]
    pub provenance: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl ImageArtifact {
    /// Builds a validated single-channel image and computes its id.
    pub fn new(width: u32, height: u32, pixels: Vec<f32>) -> Result<Self, ArtifactError> {
        validate(width, height, 1, &pixels)?;
        let id = content_id(width, height, 1, &pixels);
        Ok(Self {
            id,
            width,
            height,
            channels: 1,
            pixels,
            provenance: String::new(),
            meta: BTreeMap::new(),
        })
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> f32 {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn same_shape(&self, other: &ImageArtifact) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Re-checks every invariant, including that `id` matches the content.
    pub fn check(&self) -> Result<(), ArtifactError> {
        validate(self.width, self.height, self.channels, &self.pixels)?;
        let expected = content_id(self.width, self.height, self.channels, &self.pixels);
        if expected != self.id {
            return Err(ArtifactError::IdMismatch {
                claimed: self.id.to_string(),
                actual: expected.to_string(),
            });
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_raw(self.width, self.height, self.channels, &self.pixels)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ArtifactError> {
        decode_artifact(bytes)
    }
}

fn validate(width: u32, height: u32, channels: u8, pixels: &[f32]) -> Result<(), ArtifactError> {
    if channels != 1 {
        return Err(ArtifactError::UnsupportedChannels(channels));
    }
    let expected = width as usize * height as usize * channels as usize;
    if expected == 0 || pixels.len() != expected {
        return Err(ArtifactError::DimensionMismatch {
            width,
            height,
            pixels: pixels.len(),
        });
    }
    if let Some((index, &value)) = pixels
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
    {
        return Err(ArtifactError::InvalidPixel { index, value });
    }
    Ok(())
}

fn encode_raw(width: u32, height: u32, channels: u8, pixels: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * pixels.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    out.push(channels);
    out.push(DTYPE_F32);
    for p in pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

/// SHA-256 over the canonical AIMG1 encoding, lowercase hex.
pub fn content_id(width: u32, height: u32, channels: u8, pixels: &[f32]) -> ArtifactId {
    let digest = Sha256::digest(encode_raw(width, height, channels, pixels));
    ArtifactId(hex::encode(digest.as_slice()))
}

pub fn encode_artifact(image: &ImageArtifact) -> Vec<u8> {
    image.encode()
}

pub fn decode_artifact(bytes: &[u8]) -> Result<ImageArtifact, ArtifactError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ArtifactError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(ArtifactError::TruncatedPayload {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let width = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    let height = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes"));
    let channels = bytes[13];
    let dtype = bytes[14];
    if dtype != DTYPE_F32 {
        return Err(ArtifactError::UnsupportedDtype(dtype));
    }
    if channels != 1 {
        return Err(ArtifactError::UnsupportedChannels(channels));
    }
    let count = width as usize * height as usize * channels as usize;
    let expected = HEADER_LEN + 4 * count;
    if bytes.len() < expected {
        return Err(ArtifactError::TruncatedPayload {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(ArtifactError::TrailingBytes(bytes.len() - expected));
    }
    let pixels: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    ImageArtifact::new(width, height, pixels)
}
