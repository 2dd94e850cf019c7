//! Per-slide preparation shared by the CV harness and the staged CLI:
//! mask, extract and sample coordinates, read patches at every requested
//! magnification and embed them.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::classifier::TrainConfig;
use crate::cohort::Cohort;
use crate::embedding::{Embedder, EmbeddingTable, PatchRef, ReferenceEmbedder, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::masking::{mask_slide, MaskingConfig};
use crate::patching::{
    extract_valid_coordinates, project_patch, PatchCoordinate, SlideCoordinates, DEFAULT_CAP, DEFAULT_COVERAGE_MIN,
    DEFAULT_PATCH_SIZE,
};
use crate::pyramid::{Magnification, PrognosisLabel, SlidePyramid};
use crate::seeds;

/// Independent seeds for each random stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub sampling: u64,
    pub split: u64,
    pub embedding: u64,
    pub training: u64,
}

impl Seeds {
    pub fn from_base(seed: u64) -> Self {
        Seeds {
            sampling: seeds::derive(seed, &[seeds::TAG_SAMPLE]),
            split: seeds::derive(seed, &[seeds::TAG_SPLIT]),
            embedding: seeds::derive(seed, &[seeds::TAG_EMBED]),
            training: seeds::derive(seed, &[seeds::TAG_INIT]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub magnifications: Vec<Magnification>,
    pub patch_size: u32,
    pub coverage_min: f64,
    pub cap: usize,
    pub masking: MaskingConfig,
    pub folds: usize,
    pub seeds: Seeds,
    pub train: TrainConfig,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl PipelineConfig {
    pub fn new(magnifications: &[Magnification], seed: u64) -> Self {
        PipelineConfig {
            magnifications: magnifications.to_vec(),
            patch_size: DEFAULT_PATCH_SIZE,
            coverage_min: DEFAULT_COVERAGE_MIN,
            cap: DEFAULT_CAP,
            masking: MaskingConfig::default(),
            folds: 5,
            seeds: Seeds::from_base(seed),
            train: TrainConfig::for_scales(magnifications.len()),
            parallelism: Parallelism::Sequential,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.magnifications.is_empty() {
            return Err(Error::invalid("at least one magnification is required"));
        }
        for (i, m) in self.magnifications.iter().enumerate() {
            if !Magnification::EXTRACTION.contains(m) {
                return Err(Error::invalid(format!("magnification {m} is not one of 10x, 20x, 40x")));
            }
            if self.magnifications[..i].contains(m) {
                return Err(Error::invalid(format!("magnification {m} listed twice")));
            }
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "patch size {} must be positive and even",
                self.patch_size
            )));
        }
        if !(self.coverage_min > 0.0 && self.coverage_min <= 1.0) {
            return Err(Error::invalid(format!(
                "coverage_min {} outside (0, 1]",
                self.coverage_min
            )));
        }
        if self.cap == 0 {
            return Err(Error::invalid("cap must be positive"));
        }
        if self.folds < 2 {
            return Err(Error::invalid(format!("need at least 2 folds, got {}", self.folds)));
        }
        self.masking.thresholds.validate()?;
        self.train.validate()
    }

    pub fn input_dim(&self) -> usize {
        EMBEDDING_DIM * self.magnifications.len()
    }

    pub fn embedders(&self) -> Result<Vec<ReferenceEmbedder>> {
        ReferenceEmbedder::bank(self.seeds.embedding, &self.magnifications, self.patch_size)
    }
}

/// Where patch features come from.
#[derive(Clone, Debug, Default)]
pub enum FeatureSource {
    /// Embed pixels with the built-in reference extractor.
    #[default]
    Reference,
    /// Look features up in a precomputed embedding file; no pixels are read.
    Imported(EmbeddingTable),
}

impl FeatureSource {
    pub fn kind(&self) -> FeatureKind {
        match self {
            FeatureSource::Reference => FeatureKind::Reference,
            FeatureSource::Imported(_) => FeatureKind::Imported,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Reference,
    Imported,
}

/// A slide reduced to its sampled patches and their features.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSlide {
    pub slide_id: String,
    pub label: PrognosisLabel,
    /// Valid coordinates before capping.
    pub valid_patches: usize,
    pub coords: Vec<PatchCoordinate>,
    /// Concatenated features per patch, magnifications in config order.
    pub features: Vec<Vec<f32>>,
    /// Raw patches per coordinate (one per magnification), kept for augmentation.
    pub rasters: Option<Vec<Vec<RgbImage>>>,
}

impl PreparedSlide {
    /// Keeps the feature blocks and rasters of `to`, a subset of `from`.
    pub fn restrict(&self, from: &[Magnification], to: &[Magnification]) -> Result<PreparedSlide> {
        let cols: Vec<usize> = to
            .iter()
            .map(|m| {
                from.iter()
                    .position(|x| x == m)
                    .ok_or_else(|| Error::LevelNotAvailable(m.value().to_string()))
            })
            .collect::<Result<_>>()?;
        let features = self
            .features
            .iter()
            .map(|f| {
                cols.iter()
                    .flat_map(|&c| f[c * EMBEDDING_DIM..(c + 1) * EMBEDDING_DIM].iter().copied())
                    .collect()
            })
            .collect();
        let rasters = self.rasters.as_ref().map(|r| {
            r.iter()
                .map(|views| cols.iter().map(|&c| views[c].clone()).collect())
                .collect()
        });
        Ok(PreparedSlide {
            features,
            rasters,
            ..self.clone()
        })
    }

    pub fn with_label(&self, label: PrognosisLabel) -> PreparedSlide {
        PreparedSlide {
            label,
            coords: self
                .coords
                .iter()
                .map(|c| PatchCoordinate { label, ..c.clone() })
                .collect(),
            ..self.clone()
        }
    }
}

/// Masks the slide and returns every valid coordinate.
pub fn slide_coordinates(pyramid: &SlidePyramid, cfg: &PipelineConfig) -> Result<SlideCoordinates> {
    let masks = mask_slide(pyramid, &cfg.masking)?;
    Ok(SlideCoordinates {
        slide_id: pyramid.slide_id().to_string(),
        label: pyramid.label(),
        coords: extract_valid_coordinates(&masks.lesion, pyramid.label(), cfg.patch_size, cfg.coverage_min)?,
    })
}

/// One patch per magnification, centered on the same tissue.
pub fn read_patches(
    pyramid: &SlidePyramid,
    coord: &PatchCoordinate,
    magnifications: &[Magnification],
    patch_size: u32,
) -> Result<Vec<RgbImage>> {
    magnifications
        .iter()
        .map(|&m| {
            pyramid.read_region(
                m,
                project_patch(coord.center_20x, m, patch_size)?,
                (patch_size, patch_size),
            )
        })
        .collect()
}

pub fn embed_views(views: &[RgbImage], embedders: &[&dyn Embedder]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(EMBEDDING_DIM * embedders.len());
    for (view, e) in views.iter().zip(embedders) {
        out.extend(e.embed(view)?);
    }
    Ok(out)
}

/// Full per-slide preparation with reference embeddings.
pub fn prepare_slide(
    pyramid: &SlidePyramid,
    cfg: &PipelineConfig,
    embedders: &[&dyn Embedder],
    keep_rasters: bool,
) -> Result<PreparedSlide> {
    let all = slide_coordinates(pyramid, cfg)?;
    let coords = if all.coords.is_empty() {
        Vec::new()
    } else {
        all.sampled(cfg.cap, cfg.seeds.sampling)?
    };
    let mut features = Vec::with_capacity(coords.len());
    let mut rasters = Vec::new();
    for c in &coords {
        if embedders.is_empty() && !keep_rasters {
            features.push(Vec::new());
            continue;
        }
        let views = read_patches(pyramid, c, &cfg.magnifications, cfg.patch_size)?;
        features.push(embed_views(&views, embedders)?);
        if keep_rasters {
            rasters.push(views);
        }
    }
    Ok(PreparedSlide {
        slide_id: all.slide_id,
        label: all.label,
        valid_patches: all.coords.len(),
        coords,
        features,
        rasters: keep_rasters.then_some(rasters),
    })
}

/// Replaces the features of prepared slides with imported ones and drops
/// pixel access.
pub fn attach_imported(
    slides: &[PreparedSlide],
    table: &EmbeddingTable,
    mags: &[Magnification],
) -> Result<Vec<PreparedSlide>> {
    slides
        .iter()
        .map(|s| {
            let refs: Vec<PatchRef> = s
                .coords
                .iter()
                .map(|c| PatchRef::new(&c.slide_id, c.center_20x))
                .collect();
            let (found, missing) = table.resolve(&refs, mags)?;
            if let Some(m) = missing.first() {
                return Err(Error::invalid(format!(
                    "embedding file has no entry for patch {m} ({} missing in slide {})",
                    missing.len(),
                    s.slide_id
                )));
            }
            Ok(PreparedSlide {
                features: found.into_iter().map(|f| f.into_values()).collect(),
                rasters: None,
                ..s.clone()
            })
        })
        .collect()
}

/// Prepares every slide of the cohort, slides in parallel.
pub fn prepare_cohort(cohort: &Cohort, cfg: &PipelineConfig, source: &FeatureSource) -> Result<Vec<PreparedSlide>> {
    cfg.validate()?;
    let bank = cfg.embedders()?;
    let inline = matches!(source, FeatureSource::Reference);
    // Imported features are attached afterwards, so nothing is embedded here.
    let embedders: Vec<&dyn Embedder> = if inline {
        bank.iter().map(|e| e as &dyn Embedder).collect()
    } else {
        Vec::new()
    };
    let keep = cfg.train.augmentation_enabled && inline;
    let slides = cfg.parallelism.map_indexed(cohort.len(), |i| {
        let pyramid = cohort.load(i)?;
        prepare_slide(&pyramid, cfg, &embedders, keep)
    });
    let slides: Vec<PreparedSlide> = slides.into_iter().collect::<Result<_>>()?;
    match source {
        FeatureSource::Reference => Ok(slides),
        FeatureSource::Imported(table) => attach_imported(&slides, table, &cfg.magnifications),
    }
}
