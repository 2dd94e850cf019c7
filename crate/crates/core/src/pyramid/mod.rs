//! Multi-resolution slide images indexed by magnification.

mod io;
mod synth;

use std::collections::BTreeMap;
use std::fmt;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub use io::{read_pyramid, write_pyramid, MANIFEST_FILE};
pub use synth::{generate_synthetic_slide, LesionShape, SyntheticSlide, SyntheticSpec, MIN_SIDE_40X};

pub const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrognosisLabel {
    Good,
    Bad,
}

impl PrognosisLabel {
    /// Class index used by the classifier: 0 good, 1 bad.
    pub fn index(self) -> usize {
        match self {
            PrognosisLabel::Good => 0,
            PrognosisLabel::Bad => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            PrognosisLabel::Good
        } else {
            PrognosisLabel::Bad
        }
    }

    pub fn is_bad(self) -> bool {
        self == PrognosisLabel::Bad
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PrognosisLabel::Good => "good",
            PrognosisLabel::Bad => "bad",
        }
    }
}

impl fmt::Display for PrognosisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PrognosisLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "good" => Ok(PrognosisLabel::Good),
            "bad" => Ok(PrognosisLabel::Bad),
            other => Err(Error::invalid(format!("unknown label {other:?}"))),
        }
    }
}

/// A stored pyramid level. Ordering is by increasing resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Magnification {
    X2_5,
    X10,
    X20,
    X40,
}

impl Magnification {
    pub const ALL: [Magnification; 4] = [
        Magnification::X40,
        Magnification::X20,
        Magnification::X10,
        Magnification::X2_5,
    ];

    /// Levels patches may be extracted from.
    pub const EXTRACTION: [Magnification; 3] = [Magnification::X10, Magnification::X20, Magnification::X40];

    pub fn value(self) -> f64 {
        match self {
            Magnification::X40 => 40.0,
            Magnification::X20 => 20.0,
            Magnification::X10 => 10.0,
            Magnification::X2_5 => 2.5,
        }
    }

    pub fn from_value(v: f64) -> Result<Self> {
        Magnification::ALL
            .into_iter()
            .find(|m| m.value() == v)
            .ok_or_else(|| Error::LevelNotAvailable(format!("{v}")))
    }

    /// Scale relative to 40x as an exact fraction `(num, den)`.
    pub fn ratio_to_40x(self) -> (i64, i64) {
        match self {
            Magnification::X40 => (1, 1),
            Magnification::X20 => (1, 2),
            Magnification::X10 => (1, 4),
            Magnification::X2_5 => (1, 16),
        }
    }

    /// Scale relative to 20x as an exact fraction `(num, den)`.
    pub fn ratio_to_20x(self) -> (i64, i64) {
        match self {
            Magnification::X40 => (2, 1),
            Magnification::X20 => (1, 1),
            Magnification::X10 => (1, 2),
            Magnification::X2_5 => (1, 8),
        }
    }

    /// Level dimension from the 40x dimension, rounded half up.
    pub fn level_dim(self, dim_40x: u32) -> u32 {
        let (num, den) = self.ratio_to_40x();
        round_half_up_ratio(i64::from(dim_40x) * num, den) as u32
    }

    pub fn label(self) -> &'static str {
        match self {
            Magnification::X40 => "40",
            Magnification::X20 => "20",
            Magnification::X10 => "10",
            Magnification::X2_5 => "2.5",
        }
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Magnification {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_end_matches('x');
        let v: f64 = s
            .parse()
            .map_err(|_| Error::invalid(format!("bad magnification {s:?}")))?;
        Magnification::from_value(v)
    }
}

impl Serialize for Magnification {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Magnification::X2_5 => s.serialize_f64(2.5),
            other => s.serialize_u32(other.value() as u32),
        }
    }
}

impl<'de> Deserialize<'de> for Magnification {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Magnification::from_value(v).map_err(serde::de::Error::custom)
    }
}

/// `round(numer / denom)` with ties rounded toward +infinity, exact in integers.
pub fn round_half_up_ratio(numer: i64, denom: i64) -> i64 {
    debug_assert!(denom > 0);
    (2 * numer + denom).div_euclid(2 * denom)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolygonKind {
    Lesion,
    Other,
}

/// Annotation outline in 40x pixel coordinates, implicitly closed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<(f64, f64)>,
    pub kind: PolygonKind,
}

impl Polygon {
    pub fn new(vertices: Vec<(f64, f64)>, kind: PolygonKind) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::invalid(format!(
                "polygon needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        Ok(Polygon { vertices, kind })
    }

    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64, kind: PolygonKind) -> Self {
        Polygon {
            vertices: vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)],
            kind,
        }
    }
}

/// One slide at every stored magnification. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct SlidePyramid {
    slide_id: String,
    label: PrognosisLabel,
    width_40x: u32,
    height_40x: u32,
    levels: BTreeMap<Magnification, RgbImage>,
    annotations: Vec<Polygon>,
}

impl SlidePyramid {
    /// Builds a pyramid from explicit levels, checking level geometry.
    pub fn from_levels(
        slide_id: impl Into<String>,
        label: PrognosisLabel,
        width_40x: u32,
        height_40x: u32,
        levels: BTreeMap<Magnification, RgbImage>,
        annotations: Vec<Polygon>,
    ) -> Result<Self> {
        if width_40x == 0 || height_40x == 0 {
            return Err(Error::invalid("slide has zero extent"));
        }
        for (m, img) in &levels {
            let want = (m.level_dim(width_40x), m.level_dim(height_40x));
            if img.dimensions() != want {
                return Err(Error::DimensionMismatch {
                    expected: format!("{}x{} at {m}x", want.0, want.1),
                    actual: format!("{}x{}", img.width(), img.height()),
                });
            }
        }
        Ok(SlidePyramid {
            slide_id: slide_id.into(),
            label,
            width_40x,
            height_40x,
            levels,
            annotations,
        })
    }

    /// Builds every level by area-averaging the 40x raster.
    pub fn from_base(
        slide_id: impl Into<String>,
        label: PrognosisLabel,
        base_40x: RgbImage,
        annotations: Vec<Polygon>,
    ) -> Result<Self> {
        let (w, h) = base_40x.dimensions();
        let mut levels = BTreeMap::new();
        for m in [Magnification::X20, Magnification::X10, Magnification::X2_5] {
            levels.insert(m, box_downsample(&base_40x, m.level_dim(w), m.level_dim(h)));
        }
        levels.insert(Magnification::X40, base_40x);
        SlidePyramid::from_levels(slide_id, label, w, h, levels, annotations)
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn label(&self) -> PrognosisLabel {
        self.label
    }

    /// Same pixels under a different label (used to build label-permuted cohorts).
    pub fn with_label(mut self, label: PrognosisLabel) -> Self {
        self.label = label;
        self
    }

    pub fn dims_40x(&self) -> (u32, u32) {
        (self.width_40x, self.height_40x)
    }

    pub fn annotations(&self) -> &[Polygon] {
        &self.annotations
    }

    pub fn magnifications(&self) -> impl Iterator<Item = Magnification> + '_ {
        self.levels.keys().copied()
    }

    pub fn level(&self, m: Magnification) -> Result<&RgbImage> {
        self.levels
            .get(&m)
            .ok_or_else(|| Error::LevelNotAvailable(m.label().to_string()))
    }

    /// Reads a `w`x`h` window at magnification `m`; pixels outside the slide are white.
    pub fn read_region(&self, m: Magnification, top_left: (i64, i64), size: (u32, u32)) -> Result<RgbImage> {
        let level = self.level(m)?;
        if size.0 == 0 || size.1 == 0 {
            return Err(Error::invalid(format!("empty region {}x{}", size.0, size.1)));
        }
        let (lw, lh) = (i64::from(level.width()), i64::from(level.height()));
        let mut out = RgbImage::from_pixel(size.0, size.1, WHITE);
        let (x0, y0) = top_left;
        let src_x0 = x0.max(0);
        let src_x1 = (x0 + i64::from(size.0)).min(lw);
        if src_x0 >= src_x1 {
            return Ok(out);
        }
        for y in y0.max(0)..(y0 + i64::from(size.1)).min(lh) {
            let row = (y * lw) as usize * 3;
            let src = &level.as_raw()[row + src_x0 as usize * 3..row + src_x1 as usize * 3];
            let oy = (y - y0) as usize;
            let ox = (src_x0 - x0) as usize;
            let stride = size.0 as usize * 3;
            let dst = &mut *out;
            dst[oy * stride + ox * 3..oy * stride + ox * 3 + src.len()].copy_from_slice(src);
        }
        Ok(out)
    }
}

/// Area-average downsampling to `out_w`x`out_h` (box filter, round half up).
pub fn box_downsample(src: &RgbImage, out_w: u32, out_h: u32) -> RgbImage {
    let (sw, sh) = src.dimensions();
    let fx = f64::from(sw) / f64::from(out_w);
    let fy = f64::from(sh) / f64::from(out_h);
    let bounds = |i: u32, f: f64, limit: u32| {
        let a = ((f64::from(i) * f).floor() as u32).min(limit - 1);
        let b = ((f64::from(i + 1) * f).floor() as u32).clamp(a + 1, limit);
        (a, b)
    };
    let raw = src.as_raw();
    let mut out = RgbImage::new(out_w, out_h);
    for oy in 0..out_h {
        let (ya, yb) = bounds(oy, fy, sh);
        for ox in 0..out_w {
            let (xa, xb) = bounds(ox, fx, sw);
            let mut acc = [0u64; 3];
            for y in ya..yb {
                let row = (y * sw) as usize * 3;
                for x in xa..xb {
                    let p = row + x as usize * 3;
                    acc[0] += u64::from(raw[p]);
                    acc[1] += u64::from(raw[p + 1]);
                    acc[2] += u64::from(raw[p + 2]);
                }
            }
            let n = u64::from((yb - ya) * (xb - xa));
            let px = acc.map(|s| ((2 * s + n) / (2 * n)) as u8);
            out.put_pixel(ox, oy, Rgb(px));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(color: [u8; 3], w: u32, h: u32) -> SlidePyramid {
        SlidePyramid::from_base(
            "s",
            PrognosisLabel::Good,
            RgbImage::from_pixel(w, h, Rgb(color)),
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn level_dims_follow_rounding_rule() {
        assert_eq!(Magnification::X20.level_dim(1025), 513);
        assert_eq!(Magnification::X10.level_dim(1026), 257); // 256.5 -> 257
        assert_eq!(Magnification::X2_5.level_dim(1032), 65); // 64.5 -> 65
        assert_eq!(Magnification::X2_5.level_dim(1031), 64);
        let p = uniform([0, 0, 255], 1030, 1000);
        assert_eq!(p.level(Magnification::X2_5).unwrap().dimensions(), (64, 63));
    }

    #[test]
    fn round_half_up_on_negatives() {
        assert_eq!(round_half_up_ratio(-1, 2), 0);
        assert_eq!(round_half_up_ratio(-3, 2), -1);
        assert_eq!(round_half_up_ratio(1001, 2), 501);
        assert_eq!(round_half_up_ratio(999, 2), 500);
    }

    #[test]
    fn read_region_uniform_blue() {
        let p = uniform([0, 0, 255], 64, 64);
        let r = p.read_region(Magnification::X20, (0, 0), (4, 4)).unwrap();
        assert!(r.pixels().all(|px| *px == Rgb([0, 0, 255])));
    }

    #[test]
    fn read_region_pads_white_out_of_bounds() {
        let p = uniform([0, 0, 255], 64, 64);
        let r = p.read_region(Magnification::X20, (-2, 0), (4, 4)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let want = if x < 2 { WHITE } else { Rgb([0, 0, 255]) };
                assert_eq!(*r.get_pixel(x, y), want);
            }
        }
        let far = p.read_region(Magnification::X20, (1000, 1000), (3, 2)).unwrap();
        assert!(far.pixels().all(|px| *px == WHITE));
    }

    #[test]
    fn read_region_unknown_level() {
        let mut levels = BTreeMap::new();
        levels.insert(Magnification::X40, RgbImage::new(8, 8));
        let p = SlidePyramid::from_levels("s", PrognosisLabel::Bad, 8, 8, levels, vec![]).unwrap();
        let err = p.read_region(Magnification::X10, (0, 0), (2, 2)).unwrap_err();
        assert!(err.to_string().contains("level not available"));
        assert!(p.read_region(Magnification::X40, (0, 0), (0, 2)).is_err());
    }

    #[test]
    fn read_region_copies_exact_pixels() {
        let mut base = RgbImage::new(32, 32);
        for (x, y, px) in base.enumerate_pixels_mut() {
            *px = Rgb([x as u8, y as u8, (x + y) as u8]);
        }
        let p = SlidePyramid::from_base("s", PrognosisLabel::Good, base.clone(), vec![]).unwrap();
        let r = p.read_region(Magnification::X40, (30, 5), (4, 3)).unwrap();
        assert_eq!(*r.get_pixel(0, 0), *base.get_pixel(30, 5));
        assert_eq!(*r.get_pixel(1, 2), *base.get_pixel(31, 7));
        assert_eq!(*r.get_pixel(2, 0), WHITE);
    }

    #[test]
    fn magnification_serde_and_parse() {
        let ms = vec![Magnification::X40, Magnification::X2_5];
        let s = serde_json::to_string(&ms).unwrap();
        assert_eq!(s, "[40,2.5]");
        let back: Vec<Magnification> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, ms);
        assert_eq!("20x".parse::<Magnification>().unwrap(), Magnification::X20);
        assert!("15".parse::<Magnification>().is_err());
    }
}
