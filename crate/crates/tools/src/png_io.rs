//! Range-view images as 16-bit grayscale PNG pairs: depth stored as
//! `round(depth * scale)` with 0 marking an invalid pixel, intensity
//! scaled by 65535.

use std::path::Path;

use image::{ImageBuffer, Luma};
use pbl_core::RangeImage;

use crate::{config_err, Result};

/// Default quantization: 256 levels per meter (max ~255 m).
pub const DEPTH_SCALE: f64 = 256.0;

fn save_u16(path: &Path, width: usize, height: usize, data: Vec<u16>) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, data)
            .expect("buffer sized from image dims");
    buf.save(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn load_u16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?
        .to_luma16();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

pub fn write_range_png(img: &RangeImage, depth_path: &Path, intensity_path: &Path, scale: f64) -> Result<()> {
    let mut depth = Vec::with_capacity(img.depth.len());
    let mut intensity = Vec::with_capacity(img.depth.len());
    for i in 0..img.depth.len() {
        if img.valid[i] {
            let q = (img.depth[i] * scale).round();
            if q < 1.0 || q > 65535.0 {
                return Err(config_err(format!(
                    "depth {} m not representable at scale {scale}",
                    img.depth[i]
                )));
            }
            depth.push(q as u16);
            intensity.push((img.intensity[i].clamp(0.0, 1.0) * 65535.0).round() as u16);
        } else {
            depth.push(0);
            intensity.push(0);
        }
    }
    save_u16(depth_path, img.width, img.height, depth)?;
    save_u16(intensity_path, img.width, img.height, intensity)
}

pub fn read_range_png(depth_path: &Path, intensity_path: &Path, scale: f64) -> Result<RangeImage> {
    let (w, h, depth) = load_u16(depth_path)?;
    let (wi, hi, intensity) = load_u16(intensity_path)?;
    if (w, h) != (wi, hi) {
        return Err(config_err(format!(
            "depth {}x{} and intensity {}x{} sizes differ",
            w, h, wi, hi
        )));
    }
    let mut img = RangeImage::new(w, h);
    for i in 0..depth.len() {
        if depth[i] > 0 {
            img.depth[i] = depth[i] as f64 / scale;
            img.intensity[i] = intensity[i] as f64 / 65535.0;
            img.valid[i] = true;
        }
    }
    Ok(img)
}

/// A single scalar channel in `[0, 1]` as 16-bit grayscale (diagnostics:
/// incidence cosines, weights, ...).
pub fn write_unit_channel_png(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<()> {
    let pix = data.iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    save_u16(path, width, height, pix)
}
