//! Tissue, annotation and lesion masks at the 2.5x working magnification.

mod io;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{Magnification, Polygon, PolygonKind, SlidePyramid};

pub use io::{read_mask, write_mask, MaskSidecar};

pub const WORKING_MAGNIFICATION: Magnification = Magnification::X2_5;
pub const DEFAULT_RADIUS: u32 = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    slide_id: String,
    width: u32,
    height: u32,
    grid: Vec<bool>,
}

impl BinaryMask {
    pub fn new(slide_id: impl Into<String>, width: u32, height: u32) -> Self {
        BinaryMask {
            slide_id: slide_id.into(),
            width,
            height,
            grid: vec![false; (width * height) as usize],
        }
    }

    pub fn filled(slide_id: impl Into<String>, width: u32, height: u32, value: bool) -> Self {
        let mut m = BinaryMask::new(slide_id, width, height);
        m.grid.fill(value);
        m
    }

    pub fn from_fn(slide_id: impl Into<String>, width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut m = BinaryMask::new(slide_id, width, height);
        for y in 0..height {
            for x in 0..width {
                m.set(x, y, f(x, y));
            }
        }
        m
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn working_magnification(&self) -> Magnification {
        WORKING_MAGNIFICATION
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.grid[(y * self.width + x) as usize]
    }

    /// Out-of-range coordinates read as false.
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < i64::from(self.width) && y < i64::from(self.height) && self.get(x as u32, y as u32)
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.grid[(y * self.width + x) as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.grid
    }

    fn check_same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", self.width, self.height),
                actual: format!("{}x{}", other.width, other.height),
            });
        }
        Ok(())
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_dims(other)?;
        let grid = self.grid.iter().zip(&other.grid).map(|(a, b)| *a && *b).collect();
        Ok(BinaryMask { grid, ..self.clone() })
    }

    /// True iff every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.grid.iter().zip(&other.grid).all(|(a, b)| !*a || *b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsvThresholds {
    /// Hue on the half-degree scale [0, 180].
    pub hue_min: f64,
    pub hue_max: f64,
    /// Saturation on [0, 255].
    pub sat_min: f64,
}

impl Default for HsvThresholds {
    fn default() -> Self {
        HsvThresholds {
            hue_min: 100.0,
            hue_max: 180.0,
            sat_min: 30.0,
        }
    }
}

impl HsvThresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.hue_min
            && self.hue_min <= self.hue_max
            && self.hue_max <= 180.0
            && (0.0..=255.0).contains(&self.sat_min);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad HSV thresholds {self:?}")))
        }
    }
}

/// Standard RGB to HSV with hue in half-degrees [0, 180) and S, V on [0, 255].
pub fn rgb_to_hsv(rgb: [u8; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb.map(f64::from);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let sat = if max > 0.0 { delta / max * 255.0 } else { 0.0 };
    if delta == 0.0 {
        return (0.0, sat, max);
    }
    let deg = if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (deg / 2.0, sat, max)
}

pub fn compute_tissue_mask(slide_id: &str, level: &RgbImage, th: &HsvThresholds) -> Result<BinaryMask> {
    th.validate()?;
    if level.width() == 0 || level.height() == 0 {
        return Err(Error::invalid("empty raster"));
    }
    Ok(BinaryMask::from_fn(slide_id, level.width(), level.height(), |x, y| {
        let (h, s, _) = rgb_to_hsv(level.get_pixel(x, y).0);
        h >= th.hue_min && h <= th.hue_max && s >= th.sat_min
    }))
}

/// Even-odd fill of lesion polygons scaled from 40x to the mask grid.
/// A pixel is set iff its center lies inside any lesion polygon.
pub fn rasterize_annotations(slide_id: &str, polygons: &[Polygon], dims: (u32, u32)) -> BinaryMask {
    let (w, h) = dims;
    let mut mask = BinaryMask::new(slide_id, w, h);
    let (num, den) = WORKING_MAGNIFICATION.ratio_to_40x();
    let scale = num as f64 / den as f64;
    let mut crossings = Vec::new();
    for poly in polygons.iter().filter(|p| p.kind == PolygonKind::Lesion) {
        let pts: Vec<(f64, f64)> = poly.vertices.iter().map(|&(x, y)| (x * scale, y * scale)).collect();
        for row in 0..h {
            let cy = f64::from(row) + 0.5;
            crossings.clear();
            for i in 0..pts.len() {
                let (x0, y0) = pts[i];
                let (x1, y1) = pts[(i + 1) % pts.len()];
                if (y0 <= cy && cy < y1) || (y1 <= cy && cy < y0) {
                    crossings.push(x0 + (cy - y0) / (y1 - y0) * (x1 - x0));
                }
            }
            crossings.sort_by(f64::total_cmp);
            for pair in crossings.chunks_exact(2) {
                // Centers in [a, b): first column with center >= a.
                let start = (pair[0] - 0.5).ceil().max(0.0);
                let end = (pair[1] - 0.5).ceil().min(f64::from(w));
                let mut col = start;
                while col < end {
                    mask.set(col as u32, row, true);
                    col += 1.0;
                }
            }
        }
    }
    mask
}

fn disk_offsets(radius: u32) -> Vec<(i64, i64)> {
    let r = i64::from(radius);
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Dilation; pixels outside the grid count as unset.
pub fn dilate(mask: &BinaryMask, radius: u32) -> BinaryMask {
    let offsets = disk_offsets(radius);
    let (w, h) = mask.dims();
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            let hit = offsets
                .iter()
                .any(|&(dx, dy)| mask.get_signed(i64::from(x) + dx, i64::from(y) + dy));
            out.set(x, y, hit);
        }
    }
    out
}

/// Erosion; pixels outside the grid count as set, making this the adjoint of [`dilate`].
pub fn erode(mask: &BinaryMask, radius: u32) -> BinaryMask {
    let offsets = disk_offsets(radius);
    let (w, h) = mask.dims();
    let (wi, hi) = (i64::from(w), i64::from(h));
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            let keep = offsets.iter().all(|&(dx, dy)| {
                let (nx, ny) = (i64::from(x) + dx, i64::from(y) + dy);
                nx < 0 || ny < 0 || nx >= wi || ny >= hi || mask.get(nx as u32, ny as u32)
            });
            out.set(x, y, keep);
        }
    }
    out
}

/// Closing followed by opening with a disk of the given radius.
pub fn morph_close_open(mask: &BinaryMask, radius: u32) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let closed = erode(&dilate(mask, radius), radius);
    dilate(&erode(&closed, radius), radius)
}

pub fn compute_lesion_mask(tissue: &BinaryMask, annotation: &BinaryMask, radius: u32) -> Result<BinaryMask> {
    Ok(morph_close_open(&tissue.and(annotation)?, radius))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub thresholds: HsvThresholds,
    pub radius: u32,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            thresholds: HsvThresholds::default(),
            radius: DEFAULT_RADIUS,
        }
    }
}

/// Tissue, annotation and final lesion masks of one slide.
pub struct SlideMasks {
    pub tissue: BinaryMask,
    pub annotation: BinaryMask,
    pub lesion: BinaryMask,
}

pub fn mask_slide(pyramid: &SlidePyramid, cfg: &MaskingConfig) -> Result<SlideMasks> {
    let level = pyramid.level(WORKING_MAGNIFICATION)?;
    let tissue = compute_tissue_mask(pyramid.slide_id(), level, &cfg.thresholds)?;
    let annotation = rasterize_annotations(pyramid.slide_id(), pyramid.annotations(), level.dimensions());
    let lesion = compute_lesion_mask(&tissue, &annotation, cfg.radius)?;
    Ok(SlideMasks {
        tissue,
        annotation,
        lesion,
    })
}
