//! Frozen per-magnification feature extractors and multi-scale concatenation.

mod augment;
mod io;

use std::fmt;

use image::RgbImage;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::Magnification;
use crate::seeds;

pub use augment::{augment_patch, AugmentParams, PixelAugmenter};
pub use io::{export_embeddings_csv, import_embeddings, write_embeddings, EmbeddingRecord, EmbeddingTable};

pub const EMBEDDING_DIM: usize = 512;

/// Identity of a patch: its slide and 20x center.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchRef {
    pub slide_id: String,
    pub center_20x: (i64, i64),
}

impl PatchRef {
    pub fn new(slide_id: impl Into<String>, center_20x: (i64, i64)) -> Self {
        PatchRef {
            slide_id: slide_id.into(),
            center_20x,
        }
    }
}

impl fmt::Display for PatchRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@({},{})", self.slide_id, self.center_20x.0, self.center_20x.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    values: Vec<f32>,
    magnification: Magnification,
    patch_ref: PatchRef,
}

impl FeatureVector {
    pub fn new(values: Vec<f32>, magnification: Magnification, patch_ref: PatchRef) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::EmbeddingLength {
                patch: patch_ref.to_string(),
                len: values.len(),
                expected: EMBEDDING_DIM,
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature {i} for {patch_ref}")));
        }
        Ok(FeatureVector {
            values,
            magnification,
            patch_ref,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn magnification(&self) -> Magnification {
        self.magnification
    }

    pub fn patch_ref(&self) -> &PatchRef {
        &self.patch_ref
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConcatFeature {
    values: Vec<f32>,
    magnifications: Vec<Magnification>,
    patch_ref: PatchRef,
}

impl ConcatFeature {
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn magnifications(&self) -> &[Magnification] {
        &self.magnifications
    }

    pub fn patch_ref(&self) -> &PatchRef {
        &self.patch_ref
    }
}

/// Blocks of 512 in the given order; a single part passes through unchanged.
pub fn concat_features(parts: &[FeatureVector]) -> Result<ConcatFeature> {
    let first = parts.first().ok_or_else(|| Error::invalid("no feature parts"))?;
    let mut magnifications = Vec::with_capacity(parts.len());
    let mut values = Vec::with_capacity(parts.len() * EMBEDDING_DIM);
    for part in parts {
        if part.patch_ref != first.patch_ref {
            return Err(Error::PatchRefMismatch(
                first.patch_ref.to_string(),
                part.patch_ref.to_string(),
            ));
        }
        if magnifications.contains(&part.magnification) {
            return Err(Error::invalid(format!(
                "duplicate magnification {}x",
                part.magnification
            )));
        }
        magnifications.push(part.magnification);
        values.extend_from_slice(&part.values);
    }
    Ok(ConcatFeature {
        values,
        magnifications,
        patch_ref: first.patch_ref.clone(),
    })
}

/// A frozen feature extractor for one magnification. Implementations take
/// `&self` only; nothing in the pipeline can change an embedder's state.
pub trait Embedder: Send + Sync {
    fn magnification(&self) -> Magnification;
    fn patch_size(&self) -> u32;
    /// Raw 512-d embedding of a `patch_size` square raster.
    fn embed(&self, patch: &RgbImage) -> Result<Vec<f32>>;
}

pub fn embed_patch(embedder: &dyn Embedder, patch_ref: PatchRef, patch: &RgbImage) -> Result<FeatureVector> {
    FeatureVector::new(embedder.embed(patch)?, embedder.magnification(), patch_ref)
}

const GRID: usize = 32;
const BLOCK: usize = 4;
const RAW_STATS: usize = 6 + (GRID / BLOCK) * (GRID / BLOCK) * 3;

/// Hand-crafted stand-in for a CNN backbone: image statistics of a 32x32
/// thumbnail (channel means and variances plus an 8x8 grid of block means,
/// 198 values) mapped to 512 dimensions by a fixed Gaussian projection. The
/// projection seed mixes in the magnification so each level gets its own
/// independent extractor.
#[derive(Clone, Debug)]
pub struct ReferenceEmbedder {
    magnification: Magnification,
    patch_size: u32,
    projection: Vec<f32>,
}

impl ReferenceEmbedder {
    pub fn new(seed: u64, magnification: Magnification, patch_size: u32) -> Result<Self> {
        if (patch_size as usize) < GRID {
            return Err(Error::invalid(format!("patch size {patch_size} below {GRID}")));
        }
        let mut rng = seeds::rng(seed, &[seeds::TAG_EMBED, (magnification.value() * 10.0) as u64]);
        let scale = 1.0 / (RAW_STATS as f64).sqrt();
        let projection = (0..EMBEDDING_DIM * RAW_STATS)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * scale) as f32
            })
            .collect();
        Ok(ReferenceEmbedder {
            magnification,
            patch_size,
            projection,
        })
    }

    /// One embedder per magnification, sharing the global seed.
    pub fn bank(seed: u64, magnifications: &[Magnification], patch_size: u32) -> Result<Vec<ReferenceEmbedder>> {
        magnifications
            .iter()
            .map(|&m| ReferenceEmbedder::new(seed, m, patch_size))
            .collect()
    }

    fn raw_statistics(patch: &RgbImage) -> [f32; RAW_STATS] {
        let thumb = thumbnail(patch);
        let n = (GRID * GRID) as f32;
        let mut stats = [0f32; RAW_STATS];
        for c in 0..3 {
            let mean = thumb.iter().map(|px| px[c]).sum::<f32>() / n;
            let var = thumb.iter().map(|px| (px[c] - mean).powi(2)).sum::<f32>() / n;
            stats[c] = 4.0 * (mean - 0.5);
            stats[3 + c] = 16.0 * var;
        }
        let blocks = GRID / BLOCK;
        for by in 0..blocks {
            for bx in 0..blocks {
                let mut acc = [0f32; 3];
                for y in by * BLOCK..(by + 1) * BLOCK {
                    for x in bx * BLOCK..(bx + 1) * BLOCK {
                        for c in 0..3 {
                            acc[c] += thumb[y * GRID + x][c];
                        }
                    }
                }
                for c in 0..3 {
                    let mean = acc[c] / (BLOCK * BLOCK) as f32;
                    stats[6 + (by * blocks + bx) * 3 + c] = 4.0 * (mean - 0.5);
                }
            }
        }
        stats
    }
}

/// Area-averaged 32x32 thumbnail with channels on [0, 1].
fn thumbnail(patch: &RgbImage) -> Vec<[f32; 3]> {
    let (w, h) = (patch.width() as usize, patch.height() as usize);
    let raw = patch.as_raw();
    let mut out = vec![[0f32; 3]; GRID * GRID];
    for ty in 0..GRID {
        let (ya, yb) = (ty * h / GRID, (ty + 1) * h / GRID);
        for tx in 0..GRID {
            let (xa, xb) = (tx * w / GRID, (tx + 1) * w / GRID);
            let mut acc = [0u32; 3];
            for y in ya..yb {
                let row = y * w * 3;
                for x in xa..xb {
                    let p = row + x * 3;
                    acc[0] += u32::from(raw[p]);
                    acc[1] += u32::from(raw[p + 1]);
                    acc[2] += u32::from(raw[p + 2]);
                }
            }
            let n = ((yb - ya) * (xb - xa)) as f32 * 255.0;
            out[ty * GRID + tx] = acc.map(|s| s as f32 / n);
        }
    }
    out
}

impl Embedder for ReferenceEmbedder {
    fn magnification(&self) -> Magnification {
        self.magnification
    }

    fn patch_size(&self) -> u32 {
        self.patch_size
    }

    fn embed(&self, patch: &RgbImage) -> Result<Vec<f32>> {
        if patch.dimensions() != (self.patch_size, self.patch_size) {
            return Err(Error::DimensionMismatch {
                expected: format!("{0}x{0} patch", self.patch_size),
                actual: format!("{}x{}", patch.width(), patch.height()),
            });
        }
        let stats = Self::raw_statistics(patch);
        Ok(self
            .projection
            .chunks_exact(RAW_STATS)
            .map(|row| row.iter().zip(&stats).map(|(a, b)| a * b).sum())
            .collect())
    }
}
