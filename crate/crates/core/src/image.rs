//! Point cloud and range-view image containers.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::Vec3;

/// One LiDAR return.
#[derive(Clone, Copy, Debug)]
pub struct Point {
    /// Position in the sensor frame, meters.
    pub position: Vec3,
    /// Normalized return strength in `[0, 1]`.
    pub intensity: f64,
    /// Laser row index, when known.
    pub ring: Option<u32>,
    /// Column index, when known.
    pub col: Option<u32>,
    /// Fraction of the revolution at which the point was captured, `[0, 1)`.
    pub time_frac: Option<f64>,
    /// Measured range from the emitting unit's optical center, when known.
    /// Falls back to the norm of `position` where absent.
    pub range: Option<f64>,
}

impl Point {
    pub fn new(position: Vec3, intensity: f64) -> Self {
        Point { position, intensity, ring: None, col: None, time_frac: None, range: None }
    }
}

/// A set of LiDAR returns, usually one revolution.
#[derive(Clone, Debug, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Multi-channel range-view panorama. `depth == 0` marks an invalid pixel
/// and the `valid` channel is kept consistent with that convention.
#[derive(Clone, Debug)]
pub struct RangeImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub intensity: Vec<f64>,
    pub valid: Vec<bool>,
    /// Source row of the point stored at each pixel (extended reprojection
    /// channels); present only when produced by projection.
    pub src_row: Option<Vec<f64>>,
    pub src_col: Option<Vec<f64>>,
}

impl RangeImage {
    pub fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        RangeImage {
            width,
            height,
            depth: vec![0.0; n],
            intensity: vec![0.0; n],
            valid: vec![false; n],
            src_row: None,
            src_col: None,
        }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn set(&mut self, row: usize, col: usize, depth: f64, intensity: f64) {
        let i = self.idx(row, col);
        debug_assert!(depth > 0.0);
        self.depth[i] = depth;
        self.intensity[i] = intensity;
        self.valid[i] = true;
    }

    pub fn clear_pixel(&mut self, row: usize, col: usize) {
        let i = self.idx(row, col);
        self.depth[i] = 0.0;
        self.intensity[i] = 0.0;
        self.valid[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Grid organized 3D coordinates, one point per range-view pixel.
#[derive(Clone, Debug)]
pub struct XyzImage {
    pub width: usize,
    pub height: usize,
    pub xyz: Vec<Vec3>,
    pub valid: Vec<bool>,
}

impl XyzImage {
    pub fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        XyzImage { width, height, xyz: vec![Vec3::ZERO; n], valid: vec![false; n] }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }
}
