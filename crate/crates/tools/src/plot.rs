//! Minimal headless plot rasterizer: bar charts and line plots straight
//! into PNG images, no display server or font dependencies.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::{config_err, Result};

const MARGIN: u32 = 24;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const BAR: Rgb<u8> = Rgb([66, 110, 180]);
const LINE: Rgb<u8> = Rgb([190, 70, 50]);

fn blank(width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::new(width, height);
    for p in img.pixels_mut() {
        *p = BG;
    }
    img
}

fn draw_axes(img: &mut RgbImage) {
    let (w, h) = img.dimensions();
    for x in MARGIN..w - MARGIN {
        img.put_pixel(x, h - MARGIN, AXIS);
    }
    for y in MARGIN..=h - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }
}

fn save(img: RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

/// One bar per value, scaled to the maximum.
pub fn bar_plot(path: &Path, values: &[f64], width: u32, height: u32) -> Result<()> {
    if values.is_empty() {
        return Err(config_err("bar plot: no values"));
    }
    let mut img = blank(width, height);
    draw_axes(&mut img);
    let span = (width - 2 * MARGIN) as f64 / values.len() as f64;
    let top = values.iter().cloned().fold(0.0_f64, f64::max).max(1e-12);
    let usable = (height - 2 * MARGIN) as f64;
    for (i, v) in values.iter().enumerate() {
        let x0 = MARGIN as f64 + i as f64 * span;
        let x1 = (x0 + span * 0.85).min((width - MARGIN) as f64);
        let bar_h = (v.max(0.0) / top * usable).round() as u32;
        for x in x0 as u32..x1 as u32 {
            for y in 0..bar_h {
                img.put_pixel(x, height - MARGIN - 1 - y, BAR);
            }
        }
    }
    save(img, path)
}

/// Polyline through `(x, y)` samples, axes at the data bounding box.
pub fn line_plot(path: &Path, points: &[(f64, f64)], width: u32, height: u32) -> Result<()> {
    if points.len() < 2 {
        return Err(config_err("line plot: need at least two points"));
    }
    let mut img = blank(width, height);
    draw_axes(&mut img);
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in points {
        x_lo = x_lo.min(*x);
        x_hi = x_hi.max(*x);
        y_lo = y_lo.min(*y);
        y_hi = y_hi.max(*y);
    }
    let x_span = (x_hi - x_lo).max(1e-12);
    let y_span = (y_hi - y_lo).max(1e-12);
    let to_px = |x: f64, y: f64| {
        let px = MARGIN as f64 + (x - x_lo) / x_span * (width - 2 * MARGIN) as f64;
        let py = (height - MARGIN) as f64 - (y - y_lo) / y_span * (height - 2 * MARGIN) as f64;
        (px, py)
    };
    for pair in points.windows(2) {
        let (x0, y0) = to_px(pair[0].0, pair[0].1);
        let (x1, y1) = to_px(pair[1].0, pair[1].1);
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let f = s as f64 / steps as f64;
            let x = (x0 + (x1 - x0) * f).round() as i64;
            let y = (y0 + (y1 - y0) * f).round() as i64;
            if x >= 0 && y >= 0 && (x as u32) < width && (y as u32) < height {
                img.put_pixel(x as u32, y as u32, LINE);
            }
        }
    }
    save(img, path)
}
