//! Deterministic synthetic H&E-like slides with a planted prognosis signal.
//!
//! Each slide is white scanner background with one irregular lesion blob of
//! pink stroma and purple nuclei, a rough lesion annotation around it, and a
//! few small tissue fragments that lie outside the annotation. Bad-prognosis
//! slides get denser, larger and darker nuclei; `signal_strength` scales the
//! difference and 0 makes both labels share one texture distribution.

use std::f64::consts::TAU;

use image::{Rgb, RgbImage};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Magnification, Polygon, PolygonKind, PrognosisLabel, SlidePyramid};
use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::seeds;

pub const MIN_SIDE_40X: u32 = 1024;

const STROMA: [f64; 3] = [232.0, 150.0, 195.0];
const NUCLEUS: [f64; 3] = [95.0, 55.0, 150.0];
const COLOR_JITTER: f64 = 3.0;
/// Nuclei per 40x pixel of lesion area for a good-prognosis slide.
const BASE_DENSITY: f64 = 1.0e-3;
const BASE_NUCLEUS_RADIUS: f64 = 5.5;
const GOOD_ATYPIA_MAX: f64 = 0.4;
const DENSITY_GAIN: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionShape {
    /// Mean blob radius as a fraction of the shorter slide side.
    pub radius_frac: f64,
    /// Amplitude of the low-order harmonics perturbing the outline.
    pub irregularity: f64,
    /// Relative margin between the blob and its rough annotation.
    pub annotation_margin: f64,
    /// Small tissue islands placed outside the annotation.
    pub fragments: usize,
}

impl Default for LesionShape {
    fn default() -> Self {
        LesionShape {
            radius_frac: 0.3,
            irregularity: 0.12,
            annotation_margin: 0.12,
            fragments: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub slide_id: String,
    pub seed: u64,
    pub label: PrognosisLabel,
    pub size_40x: (u32, u32),
    #[serde(default)]
    pub lesion_shape: LesionShape,
    pub signal_strength: f64,
}

pub struct SyntheticSlide {
    pub pyramid: SlidePyramid,
    /// Ground-truth blob at 2.5x: pixel centers inside the planted lesion.
    pub lesion_truth: BinaryMask,
}

struct Outline {
    cx: f64,
    cy: f64,
    radius: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl Outline {
    fn radius_at(&self, theta: f64) -> f64 {
        let wobble: f64 = self
            .harmonics
            .iter()
            .map(|&(k, amp, phase)| amp * (k * theta + phase).cos())
            .sum();
        self.radius * (1.0 + wobble)
    }

    fn max_radius(&self) -> f64 {
        self.radius * (1.0 + self.harmonics.iter().map(|h| h.1.abs()).sum::<f64>())
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r2 = dx * dx + dy * dy;
        let rmin = self.radius * (1.0 - self.harmonics.iter().map(|h| h.1.abs()).sum::<f64>());
        if r2 <= rmin * rmin {
            return true;
        }
        let rmax = self.max_radius();
        if r2 > rmax * rmax {
            return false;
        }
        r2.sqrt() < self.radius_at(dy.atan2(dx))
    }
}

struct Texture {
    stroma: [f64; 3],
    nucleus: [f64; 3],
    density: f64,
    nucleus_radius: f64,
}

impl Texture {
    /// Atypia is `strength` for bad slides and uniform on
    /// `[0, GOOD_ATYPIA_MAX * strength]` for good ones, so some good lesions
    /// look partly aggressive while bad lesions are uniformly so.
    fn draw(label: PrognosisLabel, strength: f64, rng: &mut impl Rng) -> Self {
        let u: f64 = rng.random();
        let atypia = if label.is_bad() {
            strength
        } else {
            GOOD_ATYPIA_MAX * strength * u
        };
        let jitter = Normal::new(0.0, COLOR_JITTER).expect("valid sigma");
        let log_density = Normal::new(0.0, 0.1).expect("valid sigma");
        let stroma = STROMA.map(|c| c + jitter.sample(rng));
        let nucleus = NUCLEUS.map(|c| c * (1.0 - 0.3 * atypia) + jitter.sample(rng));
        Texture {
            stroma,
            nucleus,
            density: BASE_DENSITY * (1.0 + DENSITY_GAIN * atypia) * f64::exp(log_density.sample(rng)),
            nucleus_radius: BASE_NUCLEUS_RADIUS * (1.0 + 0.25 * atypia),
        }
    }
}

fn noisy(base: [f64; 3], noise: u32, amplitude: u32) -> Rgb<u8> {
    let span = 2 * amplitude + 1;
    let mut px = [0u8; 3];
    for (c, out) in px.iter_mut().enumerate() {
        let n = ((noise >> (c * 10)) & 0x3ff) % span;
        *out = (base[c] + f64::from(n) - f64::from(amplitude))
            .round()
            .clamp(0.0, 255.0) as u8;
    }
    Rgb(px)
}

/// Generates one slide; identical specs give pixel-identical pyramids.
pub fn generate_synthetic_slide(spec: &SyntheticSpec) -> Result<SyntheticSlide> {
    let (w, h) = spec.size_40x;
    if w < MIN_SIDE_40X || h < MIN_SIDE_40X {
        return Err(Error::invalid(format!(
            "synthetic slide must be at least {MIN_SIDE_40X}x{MIN_SIDE_40X} at 40x, got {w}x{h}"
        )));
    }
    if !(0.0..=1.0).contains(&spec.signal_strength) {
        return Err(Error::invalid(format!(
            "signal_strength {} outside [0, 1]",
            spec.signal_strength
        )));
    }
    let shape = &spec.lesion_shape;
    if !(shape.radius_frac > 0.0 && shape.radius_frac < 0.45) || !(0.0..0.5).contains(&shape.irregularity) {
        return Err(Error::invalid("lesion shape out of range"));
    }

    let mut rng = seeds::rng(spec.seed, &[seeds::TAG_SYNTH, seeds::hash_str(&spec.slide_id)]);
    let side = f64::from(w.min(h));
    let outline = Outline {
        cx: f64::from(w) * (0.5 + rng.random_range(-0.04..0.04)),
        cy: f64::from(h) * (0.5 + rng.random_range(-0.04..0.04)),
        radius: side * shape.radius_frac,
        harmonics: (2..=4)
            .map(|k| {
                let amp = rng.random_range(-shape.irregularity..=shape.irregularity) / (k as f64 - 1.0);
                (k as f64, amp, rng.random_range(0.0..TAU))
            })
            .collect(),
    };
    let texture = Texture::draw(spec.label, spec.signal_strength, &mut rng);

    let mut base = RgbImage::new(w, h);
    let rmax = outline.max_radius();
    for y in 0..h {
        let fy = f64::from(y) + 0.5;
        for x in 0..w {
            let fx = f64::from(x) + 0.5;
            let noise = rng.next_u32();
            let inside = (fx - outline.cx).abs() <= rmax && (fy - outline.cy).abs() <= rmax && outline.contains(fx, fy);
            let px = if inside {
                noisy(texture.stroma, noise, 12)
            } else {
                noisy([249.0; 3], noise, 4)
            };
            base.put_pixel(x, y, px);
        }
    }

    // Nuclei.
    let area = 0.5
        * (0..360)
            .map(|i| outline.radius_at(TAU * f64::from(i) / 360.0).powi(2) * TAU / 360.0)
            .sum::<f64>();
    let n_nuclei = (texture.density * area).round() as usize;
    let mut placed = 0;
    while placed < n_nuclei {
        let x = outline.cx + rng.random_range(-rmax..rmax);
        let y = outline.cy + rng.random_range(-rmax..rmax);
        if !outline.contains(x, y) {
            continue;
        }
        let r = texture.nucleus_radius * rng.random_range(0.8..1.2);
        let shade = rng.random_range(0.92..1.08);
        let color = texture.nucleus.map(|c| c * shade);
        fill_disc(
            &mut base,
            x,
            y,
            r,
            |px_noise| noisy(color, px_noise, 6),
            &mut rng,
            |fx, fy| outline.contains(fx, fy),
        );
        placed += 1;
    }

    // Tissue islands outside the annotation.
    let corners = [(0.1, 0.1), (0.9, 0.1), (0.1, 0.9), (0.9, 0.9)];
    for &(ux, uy) in corners.iter().cycle().take(shape.fragments.min(4)) {
        let fx = f64::from(w) * ux;
        let fy = f64::from(h) * uy;
        let r = side * rng.random_range(0.02..0.04);
        let stroma = texture.stroma;
        fill_disc(&mut base, fx, fy, r, |n| noisy(stroma, n, 12), &mut rng, |_, _| true);
    }

    // Rough annotation: the outline pushed outward with jittered vertices.
    let vertex_jitter = Normal::new(0.0, 0.02 * outline.radius).expect("valid sigma");
    let n_vertices = 48;
    let vertices = (0..n_vertices)
        .map(|i| {
            let theta = TAU * f64::from(i) / f64::from(n_vertices);
            let r = outline.radius_at(theta) * (1.0 + shape.annotation_margin) + vertex_jitter.sample(&mut rng).abs();
            (
                (outline.cx + r * theta.cos()).round(),
                (outline.cy + r * theta.sin()).round(),
            )
        })
        .collect();
    let annotation = Polygon::new(vertices, PolygonKind::Lesion)?;

    let (mw, mh) = (Magnification::X2_5.level_dim(w), Magnification::X2_5.level_dim(h));
    let mut truth = BinaryMask::new(spec.slide_id.clone(), mw, mh);
    for j in 0..mh {
        for i in 0..mw {
            let x = (f64::from(i) + 0.5) * 16.0;
            let y = (f64::from(j) + 0.5) * 16.0;
            truth.set(i, j, outline.contains(x, y));
        }
    }

    let pyramid = SlidePyramid::from_base(spec.slide_id.clone(), spec.label, base, vec![annotation])?;
    Ok(SyntheticSlide {
        pyramid,
        lesion_truth: truth,
    })
}

fn fill_disc(
    img: &mut RgbImage,
    cx: f64,
    cy: f64,
    r: f64,
    color: impl Fn(u32) -> Rgb<u8>,
    rng: &mut impl RngCore,
    keep: impl Fn(f64, f64) -> bool,
) {
    let (w, h) = img.dimensions();
    let x0 = (cx - r).floor().max(0.0) as u32;
    let y0 = (cy - r).floor().max(0.0) as u32;
    let x1 = ((cx + r).ceil() as u32).min(w);
    let y1 = ((cy + r).ceil() as u32).min(h);
    for y in y0..y1 {
        let fy = f64::from(y) + 0.5;
        for x in x0..x1 {
            let fx = f64::from(x) + 0.5;
            if (fx - cx).powi(2) + (fy - cy).powi(2) <= r * r && keep(fx, fy) {
                img.put_pixel(x, y, color(rng.next_u32()));
            }
        }
    }
}
