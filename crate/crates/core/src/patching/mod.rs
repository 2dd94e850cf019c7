//! Tiling of the lesion region into 20x-anchored patches, projection of
//! patch centers across magnifications, per-slide caps and patient-level
//! stratified folds.

mod dataset;

use rand::seq::index;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::pyramid::{round_half_up_ratio, Magnification, PrognosisLabel};
use crate::seeds;

pub use dataset::{
    build_dataset, dataset_file_name, read_manifest, write_manifest, DatasetManifest, SlideCoordinates, Split,
};

pub const DEFAULT_PATCH_SIZE: u32 = 224;
pub const DEFAULT_COVERAGE_MIN: f64 = 0.7;
pub const DEFAULT_CAP: usize = 250;

/// Mask pixels are this many 20x pixels on a side.
const MASK_TO_20X: i64 = 8;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchCoordinate {
    pub slide_id: String,
    pub center_20x: (i64, i64),
    pub label: PrognosisLabel,
}

/// Fraction of the 20x footprint `[x0, x0+size) x [y0, y0+size)` covered by the mask,
/// as `(covered 20x pixels, footprint pixels)`.
pub fn footprint_coverage(mask: &BinaryMask, top_left_20x: (i64, i64), size: u32) -> (u64, u64) {
    let size = i64::from(size);
    let (x0, y0) = top_left_20x;
    let (x1, y1) = (x0 + size, y0 + size);
    let span = |a: i64, b: i64| (a.div_euclid(MASK_TO_20X), (b - 1).div_euclid(MASK_TO_20X));
    let overlap = |lo: i64, hi: i64, cell: i64| {
        (hi.min(cell * MASK_TO_20X + MASK_TO_20X) - lo.max(cell * MASK_TO_20X)).max(0) as u64
    };
    let (cx0, cx1) = span(x0, x1);
    let (cy0, cy1) = span(y0, y1);
    let mut covered = 0u64;
    for cy in cy0..=cy1 {
        let wy = overlap(y0, y1, cy);
        for cx in cx0..=cx1 {
            if mask.get_signed(cx, cy) {
                covered += wy * overlap(x0, x1, cx);
            }
        }
    }
    (covered, (size * size) as u64)
}

/// Valid patch centers on the non-overlapping 20x grid, in row-major order.
pub fn extract_valid_coordinates(
    lesion: &BinaryMask,
    label: PrognosisLabel,
    patch_size: u32,
    coverage_min: f64,
) -> Result<Vec<PatchCoordinate>> {
    if patch_size == 0 {
        return Err(Error::invalid("patch_size must be positive"));
    }
    if !(coverage_min > 0.0 && coverage_min <= 1.0) {
        return Err(Error::invalid(format!("coverage_min {coverage_min} outside (0, 1]")));
    }
    let (w, h) = lesion.dims();
    let p = i64::from(patch_size);
    let cols = i64::from(w) * MASK_TO_20X / p;
    let rows = i64::from(h) * MASK_TO_20X / p;
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let top_left = (c * p, r * p);
            let (covered, total) = footprint_coverage(lesion, top_left, patch_size);
            if covered as f64 >= coverage_min * total as f64 {
                out.push(PatchCoordinate {
                    slide_id: lesion.slide_id().to_string(),
                    center_20x: (top_left.0 + p / 2, top_left.1 + p / 2),
                    label,
                });
            }
        }
    }
    Ok(out)
}

/// Center at magnification `m`, rounded half up.
pub fn scale_center(center_20x: (i64, i64), m: Magnification) -> (i64, i64) {
    let (num, den) = m.ratio_to_20x();
    (
        round_half_up_ratio(center_20x.0 * num, den),
        round_half_up_ratio(center_20x.1 * num, den),
    )
}

/// Top-left corner at magnification `m` of the patch sharing the 20x center's midpoint.
pub fn project_patch(center_20x: (i64, i64), m: Magnification, patch_size: u32) -> Result<(i64, i64)> {
    if !patch_size.is_multiple_of(2) {
        return Err(Error::invalid(format!("patch size {patch_size} must be even")));
    }
    let half = i64::from(patch_size / 2);
    let (cx, cy) = scale_center(center_20x, m);
    Ok((cx - half, cy - half))
}

/// Uniform sample of at most `cap` items without replacement, keeping input order.
pub fn sample_coordinates<T: Clone>(coords: &[T], cap: usize, seed: u64) -> Result<Vec<T>> {
    if cap == 0 {
        return Err(Error::invalid("cap must be positive"));
    }
    if coords.len() <= cap {
        return Ok(coords.to_vec());
    }
    let mut rng = seeds::rng(seed, &[seeds::TAG_SAMPLE]);
    let mut picked = index::sample(&mut rng, coords.len(), cap).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| coords[i].clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// Patient-level stratified k-fold split. Each class is shuffled and dealt
/// round-robin, the second class continuing where the first stopped so fold
/// sizes differ by at most one.
pub fn stratified_kfold(patients: &[(String, PrognosisLabel)], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    let mut fold_of = vec![0usize; patients.len()];
    let mut next = 0usize;
    for label in [PrognosisLabel::Good, PrognosisLabel::Bad] {
        let mut members: Vec<usize> = (0..patients.len()).filter(|&i| patients[i].1 == label).collect();
        if members.len() < k {
            return Err(Error::TooFewMembers {
                label: label.to_string(),
                count: members.len(),
                k,
            });
        }
        let mut rng = seeds::rng(seed, &[seeds::TAG_SPLIT, label.index() as u64]);
        members.shuffle(&mut rng);
        for i in members {
            fold_of[i] = next % k;
            next += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (val, train): (Vec<_>, Vec<_>) = patients.iter().zip(&fold_of).partition(|(_, &g)| g == f);
            Fold {
                train: train.into_iter().map(|(p, _)| p.0.clone()).collect(),
                validation: val.into_iter().map(|(p, _)| p.0.clone()).collect(),
            }
        })
        .collect())
}
