//! Open pyramid format: `manifest.json` plus one lossless `level_<m>.png` per level.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ImageEncoder, ImageReader};
use serde::{Deserialize, Serialize};

use super::{Magnification, Polygon, PrognosisLabel, SlidePyramid};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LevelEntry {
    magnification: Magnification,
    width: u32,
    height: u32,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    slide_id: String,
    label: PrognosisLabel,
    width_40x: u32,
    height_40x: u32,
    levels: Vec<LevelEntry>,
    annotations: Vec<Polygon>,
}

fn level_file(m: Magnification) -> String {
    format!("level_{}.png", m.label())
}

pub fn write_pyramid(pyramid: &SlidePyramid, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut levels = Vec::new();
    for m in Magnification::ALL {
        let Ok(img) = pyramid.level(m) else { continue };
        let file = level_file(m);
        let path = dir.join(&file);
        let out = File::create(&path).map_err(|e| Error::io(&path, e))?;
        PngEncoder::new_with_quality(BufWriter::new(out), CompressionType::Fast, FilterType::Sub)
            .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
        levels.push(LevelEntry {
            magnification: m,
            width: img.width(),
            height: img.height(),
            file,
        });
    }
    let (width_40x, height_40x) = pyramid.dims_40x();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        slide_id: pyramid.slide_id().to_string(),
        label: pyramid.label(),
        width_40x,
        height_40x,
        levels,
        annotations: pyramid.annotations().to_vec(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_pyramid(dir: &Path) -> Result<SlidePyramid> {
    let path = dir.join(MANIFEST_FILE);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::json(&path, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let mut levels = BTreeMap::new();
    for entry in &manifest.levels {
        let level_path = dir.join(&entry.file);
        let img = ImageReader::open(&level_path)
            .map_err(|e| Error::io(&level_path, e))?
            .decode()
            .map_err(|source| Error::Image {
                path: level_path.clone(),
                source,
            })?
            .into_rgb8();
        if img.dimensions() != (entry.width, entry.height) {
            return Err(Error::format(&level_path, "level size disagrees with manifest"));
        }
        levels.insert(entry.magnification, img);
    }
    SlidePyramid::from_levels(
        manifest.slide_id,
        manifest.label,
        manifest.width_40x,
        manifest.height_40x,
        levels,
        manifest.annotations,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{generate_synthetic_slide, LesionShape, SyntheticSpec};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let slide = generate_synthetic_slide(&SyntheticSpec {
            slide_id: "rt".into(),
            seed: 5,
            label: PrognosisLabel::Bad,
            size_40x: (1030, 1024),
            lesion_shape: LesionShape::default(),
            signal_strength: 0.6,
        })
        .unwrap();
        write_pyramid(&slide.pyramid, dir.path()).unwrap();
        assert!(dir.path().join("level_2.5.png").exists());
        let back = read_pyramid(dir.path()).unwrap();
        assert_eq!(back, slide.pyramid);

        // Writing the read-back pyramid reproduces the same manifest bytes.
        let dir2 = tempfile::tempdir().unwrap();
        write_pyramid(&back, dir2.path()).unwrap();
        assert_eq!(
            fs::read(dir.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(dir2.path().join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_pyramid(dir.path()), Err(Error::Io { .. })));
    }
}
