//! 1-bit PNG export of masks with a JSON sidecar.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BinaryMask, HsvThresholds, WORKING_MAGNIFICATION};
use crate::error::{Error, Result};
use crate::pyramid::Magnification;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub slide_id: String,
    pub working_magnification: Magnification,
    pub thresholds: HsvThresholds,
    pub radius: u32,
    pub width: u32,
    pub height: u32,
    pub area: usize,
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, e.to_string())
}

/// Writes `<stem>.png` (1 bit per pixel, set = white) and `<stem>.json`.
pub fn write_mask(mask: &BinaryMask, dir: &Path, stem: &str, thresholds: &HsvThresholds, radius: u32) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{stem}.png"));
    let (w, h) = mask.dims();
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc.write_header().map_err(|e| png_err(&path, e))?;
    let row_bytes = (w as usize).div_ceil(8);
    let mut data = vec![0u8; row_bytes * h as usize];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                data[y as usize * row_bytes + x as usize / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    writer.write_image_data(&data).map_err(|e| png_err(&path, e))?;
    writer.finish().map_err(|e| png_err(&path, e))?;

    let sidecar = MaskSidecar {
        slide_id: mask.slide_id().to_string(),
        working_magnification: WORKING_MAGNIFICATION,
        thresholds: *thresholds,
        radius,
        width: w,
        height: h,
        area: mask.count(),
    };
    let json_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))
}

pub fn read_mask(dir: &Path, stem: &str) -> Result<(BinaryMask, MaskSidecar)> {
    let json_path = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: MaskSidecar = serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?;

    let path = dir.join(format!("{stem}.png"));
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| png_err(&path, e))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::One || info.color_type != png::ColorType::Grayscale {
        return Err(Error::format(&path, "mask must be 1-bit grayscale"));
    }
    let (w, h) = (info.width, info.height);
    if (w, h) != (sidecar.width, sidecar.height) {
        return Err(Error::format(&path, "mask size disagrees with sidecar"));
    }
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| png_err(&path, "oversized"))?];
    reader.next_frame(&mut buf).map_err(|e| png_err(&path, e))?;
    let row_bytes = (w as usize).div_ceil(8);
    let mask = BinaryMask::from_fn(sidecar.slide_id.clone(), w, h, |x, y| {
        buf[y as usize * row_bytes + x as usize / 8] & (0x80 >> (x % 8)) != 0
    });
    Ok((mask, sidecar))
}
