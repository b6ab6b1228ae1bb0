//! Per-pixel surface normals and incidence angles from the range view,
//! with the two-stage repair of thick object edges and the horizontal
//! artifact rows caused by per-diode range bias.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{ray_from_pixel, SensorIntrinsics};
use crate::image::XyzImage;
#[cfg(not(feature = "std"))]
use crate::math::FloatMath;
use crate::math::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeFlag {
    None,
    /// Depth discontinuity; excluded from incidence-based losses.
    StrongEdge,
    /// Row-bias artifact; normal replaced by the vertical neighborhood.
    HorizontalArtifact,
}

/// Normals in the sensor frame, oriented toward the sensor.
#[derive(Clone, Debug)]
pub struct NormalImage {
    pub width: usize,
    pub height: usize,
    pub normal: Vec<Vec3>,
    pub cos_incidence: Vec<f64>,
    pub valid: Vec<bool>,
    pub edge_flags: Vec<EdgeFlag>,
}

impl NormalImage {
    fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        NormalImage {
            width,
            height,
            normal: vec![Vec3::ZERO; n],
            cos_incidence: vec![0.0; n],
            valid: vec![false; n],
            edge_flags: vec![EdgeFlag::None; n],
        }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }
}

/// Thresholds for [`repair_edges`].
#[derive(Clone, Copy, Debug)]
pub struct RepairConfig {
    /// Depth gradient magnitude (m per pixel) above which a pixel is a
    /// strong edge.
    pub edge_threshold: f64,
    /// Angular deviation (radians) from the vertical neighborhood above
    /// which a near-flat pixel counts as a horizontal artifact.
    pub artifact_threshold: f64,
    /// Maximum vertical depth second difference (m) for "near flat".
    pub flat_second_diff: f64,
}

impl Default for RepairConfig {
    fn default() -> Self {
        RepairConfig {
            edge_threshold: 1.0,
            artifact_threshold: 25.0_f64.to_radians(),
            flat_second_diff: 0.05,
        }
    }
}

const SCHARR_W: [f64; 3] = [3.0, 10.0, 3.0];

/// Scharr-filtered tangents of the 3-channel coordinate image; the normal
/// is their normalized cross product, flipped to face the sensor. The
/// azimuth axis wraps around the seam, rows do not.
pub fn estimate_normals(xyz: &XyzImage, intr: &SensorIntrinsics) -> NormalImage {
    let (w, h) = (xyz.width, xyz.height);
    let mut out = NormalImage::new(w, h);
    for row in 1..h.saturating_sub(1) {
        'pixel: for col in 0..w {
            let left = (col + w - 1) % w;
            let right = (col + 1) % w;
            for r in [row - 1, row, row + 1] {
                for c in [left, col, right] {
                    if !xyz.valid[xyz.idx(r, c)] {
                        continue 'pixel;
                    }
                }
            }
            let mut tan_h = Vec3::ZERO;
            let mut tan_v = Vec3::ZERO;
            for (k, dr) in [row - 1, row, row + 1].into_iter().enumerate() {
                tan_h = tan_h
                    + (xyz.xyz[xyz.idx(dr, right)] - xyz.xyz[xyz.idx(dr, left)]) * SCHARR_W[k];
            }
            for (k, dc) in [left, col, right].into_iter().enumerate() {
                tan_v = tan_v
                    + (xyz.xyz[xyz.idx(row + 1, dc)] - xyz.xyz[xyz.idx(row - 1, dc)]) * SCHARR_W[k];
            }
            let cross = tan_h.cross(tan_v);
            let n = cross.norm();
            if n < 1e-12 {
                continue;
            }
            let mut normal = cross / n;
            let (_, dir) = ray_from_pixel(row, col, intr);
            if normal.dot(dir) > 0.0 {
                normal = -normal;
            }
            let idx = out.idx(row, col);
            out.normal[idx] = normal;
            out.cos_incidence[idx] = (-normal.dot(dir)).clamp(0.0, 1.0);
            out.valid[idx] = true;
        }
    }
    out
}

fn depth_gradient_mag(depth: &[f64], valid: &[bool], w: usize, h: usize, row: usize, col: usize) -> f64 {
    let idx = row * w + col;
    if !valid[idx] {
        return 0.0;
    }
    let left = row * w + (col + w - 1) % w;
    let right = row * w + (col + 1) % w;
    let mut g: f64 = 0.0;
    if valid[left] && valid[right] {
        g = g.max(0.5 * (depth[right] - depth[left]).abs());
    } else if valid[right] {
        g = g.max((depth[right] - depth[idx]).abs());
    } else if valid[left] {
        g = g.max((depth[idx] - depth[left]).abs());
    }
    if row > 0 && row + 1 < h {
        let up = (row - 1) * w + col;
        let down = (row + 1) * w + col;
        if valid[up] && valid[down] {
            g = g.max(0.5 * (depth[down] - depth[up]).abs());
        }
    }
    g
}

/// Flags strong depth edges and replaces horizontal artifact normals with
/// the average of the nearest clean vertical neighbors. Idempotent:
/// existing artifact flags are kept and their pixels re-derive the same
/// replacement.
pub fn repair_edges(
    nimg: &NormalImage,
    depth: &[f64],
    valid: &[bool],
    intr: &SensorIntrinsics,
    cfg: &RepairConfig,
) -> NormalImage {
    let (w, h) = (nimg.width, nimg.height);
    let mut out = nimg.clone();
    // pass 1: strong edges from the depth image alone
    for row in 0..h {
        for col in 0..w {
            let idx = row * w + col;
            if !nimg.valid[idx] {
                continue;
            }
            if depth_gradient_mag(depth, valid, w, h, row, col) > cfg.edge_threshold {
                out.edge_flags[idx] = EdgeFlag::StrongEdge;
            }
        }
    }
    // pass 2: horizontal artifact detection against the +/-2 row average
    let mut artifact = vec![false; w * h];
    let cos_thresh = cfg.artifact_threshold.cos();
    for row in 2..h.saturating_sub(2) {
        for col in 0..w {
            let idx = row * w + col;
            if !nimg.valid[idx] || out.edge_flags[idx] == EdgeFlag::StrongEdge {
                continue;
            }
            if nimg.edge_flags[idx] == EdgeFlag::HorizontalArtifact {
                artifact[idx] = true;
                continue;
            }
            let up = (row - 2) * w + col;
            let down = (row + 2) * w + col;
            if !nimg.valid[up] || !nimg.valid[down] {
                continue;
            }
            let avg = (nimg.normal[up] + nimg.normal[down]).normalized();
            if avg.norm() < 0.5 {
                continue;
            }
            // near-flat vertical depth profile
            let d0 = depth[(row - 1) * w + col];
            let d1 = depth[idx];
            let d2 = depth[(row + 1) * w + col];
            if d0 <= 0.0 || d2 <= 0.0 {
                continue;
            }
            if (d0 - 2.0 * d1 + d2).abs() > cfg.flat_second_diff {
                continue;
            }
            if nimg.normal[idx].dot(avg) < cos_thresh {
                artifact[idx] = true;
            }
        }
    }
    // pass 3: replace flagged normals by the nearest clean vertical
    // neighbors (reading from the unrepaired image keeps this idempotent)
    for row in 0..h {
        for col in 0..w {
            let idx = row * w + col;
            if !artifact[idx] {
                continue;
            }
            let mut acc = Vec3::ZERO;
            let mut found = 0;
            for dir in [-1i64, 1] {
                let mut r = row as i64 + dir;
                while r >= 0 && (r as usize) < h {
                    let nidx = r as usize * w + col;
                    if nimg.valid[nidx]
                        && !artifact[nidx]
                        && out.edge_flags[nidx] != EdgeFlag::StrongEdge
                    {
                        acc = acc + nimg.normal[nidx];
                        found += 1;
                        break;
                    }
                    r += dir;
                }
            }
            if found == 0 {
                continue;
            }
            let replaced = acc.normalized();
            if replaced.norm() < 0.5 {
                continue;
            }
            out.normal[idx] = replaced;
            let (_, ray) = ray_from_pixel(row, col, intr);
            out.cos_incidence[idx] = (-replaced.dot(ray)).clamp(0.0, 1.0);
            out.edge_flags[idx] = EdgeFlag::HorizontalArtifact;
        }
    }
    out
}

/// Cosine of the incidence angle per pixel plus the shallow-incidence
/// flags (`angle > threshold`) consumed by the intensity loss mask.
pub fn incidence_image(
    nimg: &NormalImage,
    shallow_threshold: f64,
) -> (Vec<f64>, Vec<bool>) {
    let cos_min = shallow_threshold.cos();
    let mut shallow = vec![false; nimg.cos_incidence.len()];
    for (i, c) in nimg.cos_incidence.iter().enumerate() {
        if nimg.valid[i] && *c < cos_min {
            shallow[i] = true;
        }
    }
    (nimg.cos_incidence.clone(), shallow)
}
