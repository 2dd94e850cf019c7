//! Training-time augmentation on the pixel path: random resized crop
//! (area scale in [0.8, 1.0]) back to the patch size, then a horizontal flip
//! with probability 0.5.

use fast_image_resize::{FilterType, ResizeAlg, ResizeOptions, Resizer};
use image::imageops;
use image::RgbImage;
use rand::Rng;

use super::Embedder;
use crate::classifier::EpochAugmenter;
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::seeds;

pub const CROP_SCALE: (f64, f64) = (0.8, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub side: u32,
    pub x: u32,
    pub y: u32,
    pub flip: bool,
}

impl AugmentParams {
    pub fn draw(patch_size: u32, rng: &mut impl Rng) -> Self {
        let scale = rng.random_range(CROP_SCALE.0..=CROP_SCALE.1);
        let side = ((f64::from(patch_size) * scale.sqrt()).round() as u32).clamp(1, patch_size);
        let slack = patch_size - side;
        AugmentParams {
            side,
            x: rng.random_range(0..=slack),
            y: rng.random_range(0..=slack),
            flip: rng.random_bool(0.5),
        }
    }
}

pub fn augment_patch(patch: &RgbImage, params: AugmentParams) -> RgbImage {
    let (w, h) = patch.dimensions();
    let mut out = RgbImage::new(w, h);
    let options = ResizeOptions::new()
        .resize_alg(ResizeAlg::Convolution(FilterType::Bilinear))
        .crop(
            f64::from(params.x),
            f64::from(params.y),
            f64::from(params.side),
            f64::from(params.side),
        );
    Resizer::new()
        .resize(patch, &mut out, &options)
        .expect("source and destination are both RGB8");
    if params.flip {
        imageops::flip_horizontal_in_place(&mut out);
    }
    out
}

/// Re-embeds augmented training patches every epoch. One set of crop/flip
/// parameters is drawn per patch and shared by all its magnifications so the
/// views stay centered on the same tissue.
pub struct PixelAugmenter<'a> {
    /// Per training patch, one raster per magnification in embedder order.
    patches: Vec<&'a [RgbImage]>,
    embedders: Vec<&'a dyn Embedder>,
    seed: u64,
    parallelism: Parallelism,
}

impl<'a> PixelAugmenter<'a> {
    pub fn new(
        patches: Vec<&'a [RgbImage]>,
        embedders: Vec<&'a dyn Embedder>,
        seed: u64,
        parallelism: Parallelism,
    ) -> Result<Self> {
        if let Some(bad) = patches.iter().find(|p| p.len() != embedders.len()) {
            return Err(Error::DimensionMismatch {
                expected: format!("{} rasters per patch", embedders.len()),
                actual: bad.len().to_string(),
            });
        }
        Ok(PixelAugmenter {
            patches,
            embedders,
            seed,
            parallelism,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

impl EpochAugmenter for PixelAugmenter<'_> {
    fn epoch_features(&self, epoch: usize) -> Result<Vec<Vec<f32>>> {
        self.parallelism
            .map_indexed(self.patches.len(), |i| {
                let views = self.patches[i];
                let mut rng = seeds::rng(self.seed, &[seeds::TAG_AUGMENT, epoch as u64, i as u64]);
                let size = views[0].width();
                let params = AugmentParams::draw(size, &mut rng);
                let mut features = Vec::new();
                for (view, embedder) in views.iter().zip(&self.embedders) {
                    features.extend(embedder.embed(&augment_patch(view, params))?);
                }
                Ok(features)
            })
            .into_iter()
            .collect()
    }
}
