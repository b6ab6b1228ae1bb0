//! Sensor geometry: multi-unit intrinsics and all point / pixel / ray
//! conversions for the range-view representation.
//!
//! Conventions fixed here and relied on everywhere else:
//! * `f0_k` is minus the lowest elevation of unit `k`, so the shifted
//!   elevation `theta = elevation + f0_k + delta_i` spans `[0, f_k]`.
//! * Ray generation uses pixel centers `(i + 0.5, j + 0.5)`; projection
//!   floors continuous coordinates.
//! * Column 0 corresponds to azimuth `pi` (rear) and `j` grows as the
//!   azimuth decreases.

use alloc::vec;
use alloc::vec::Vec;

use crate::image::{Point, PointCloud, RangeImage, XyzImage};
#[cfg(not(feature = "std"))]
use crate::math::FloatMath;
use crate::math::{wrap_angle, Vec3, TAU};
use crate::pose::Pose;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GeometryError {
    /// Point coincides with the unit's optical center.
    DegeneratePoint,
    /// Unit row intervals do not partition `[0, H)`.
    BadRowPartition,
    /// A scalar invariant of the intrinsics failed.
    BadIntrinsics,
}

impl core::fmt::Display for GeometryError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GeometryError::DegeneratePoint => write!(f, "degenerate point"),
            GeometryError::BadRowPartition => {
                write!(f, "unit row ranges must partition the image height")
            }
            GeometryError::BadIntrinsics => write!(f, "invalid intrinsics"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for GeometryError {}

/// Geometry of one vertical sensor unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitIntrinsics {
    /// Vertical angular extent `f_k`, radians.
    pub fov: f64,
    /// Elevation shift `f0_k` mapping the unit's elevations into `[0, f_k]`.
    pub fov_offset: f64,
    /// Height of the unit's optical center `z_k`, meters.
    pub z_offset: f64,
    /// First row owned by the unit (inclusive).
    pub row_start: usize,
    /// One past the last row owned by the unit.
    pub row_end: usize,
}

impl UnitIntrinsics {
    pub fn rows(&self) -> usize {
        self.row_end - self.row_start
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.z_offset)
    }
}

/// Full spinning-LiDAR geometry: one or two stacked units plus per-diode
/// elevation corrections.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorIntrinsics {
    pub width: usize,
    pub height: usize,
    pub units: Vec<UnitIntrinsics>,
    /// Per-row elevation correction, length `height`.
    pub diode_offsets: Vec<f64>,
}

impl SensorIntrinsics {
    pub fn new(
        width: usize,
        height: usize,
        units: Vec<UnitIntrinsics>,
        diode_offsets: Vec<f64>,
    ) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 || units.is_empty() || diode_offsets.len() != height {
            return Err(GeometryError::BadIntrinsics);
        }
        let max_fov = units.iter().fold(0.0_f64, |a, u| a.max(u.fov));
        for u in &units {
            if !(u.fov > 0.0) || u.row_start >= u.row_end || u.row_end > height {
                return Err(GeometryError::BadIntrinsics);
            }
        }
        for d in &diode_offsets {
            if !d.is_finite() || d.abs() >= max_fov {
                return Err(GeometryError::BadIntrinsics);
            }
        }
        // the intervals must be disjoint and cover [0, height)
        let mut owner = vec![usize::MAX; height];
        for (k, u) in units.iter().enumerate() {
            for row in u.row_start..u.row_end {
                if owner[row] != usize::MAX {
                    return Err(GeometryError::BadRowPartition);
                }
                owner[row] = k;
            }
        }
        if owner.iter().any(|o| *o == usize::MAX) {
            return Err(GeometryError::BadRowPartition);
        }
        Ok(SensorIntrinsics { width, height, units, diode_offsets })
    }

    /// Single unit spanning all rows, no diode corrections.
    pub fn single_unit(width: usize, height: usize, fov: f64, fov_offset: f64) -> Self {
        SensorIntrinsics::new(
            width,
            height,
            vec![UnitIntrinsics { fov, fov_offset, z_offset: 0.0, row_start: 0, row_end: height }],
            vec![0.0; height],
        )
        .expect("valid single unit")
    }

    pub fn unit_of_row(&self, row: usize) -> usize {
        self.units
            .iter()
            .position(|u| row >= u.row_start && row < u.row_end)
            .expect("row partition checked at construction")
    }
}

/// Shifted elevation `theta` and azimuth `phi` of a point relative to one
/// unit: `theta = atan2(z - z_k, sqrt(x^2 + y^2)) + f0_k + delta_i`.
pub fn angles_from_point(
    p: Vec3,
    unit: &UnitIntrinsics,
    delta_i: f64,
) -> Result<(f64, f64), GeometryError> {
    let rho_sq = p.x * p.x + p.y * p.y;
    if rho_sq <= 0.0 && (p.z - unit.z_offset).abs() < 1e-12 {
        return Err(GeometryError::DegeneratePoint);
    }
    let theta = (p.z - unit.z_offset).atan2(rho_sq.sqrt()) + unit.fov_offset + delta_i;
    let phi = p.y.atan2(p.x);
    Ok((theta, phi))
}

/// Continuous pixel coordinates from the shifted angles:
/// `i = (1 - theta/f_k) * H_k + row_start`, `j = (0.5 - phi/2pi) * W`
/// with `j` wrapped into `[0, W)`.
pub fn pixel_from_angles(
    theta: f64,
    phi: f64,
    intr: &SensorIntrinsics,
    unit_index: usize,
) -> (f64, f64) {
    let u = &intr.units[unit_index];
    let i = u.row_start as f64 + (1.0 - theta / u.fov) * u.rows() as f64;
    let j = (0.5 - wrap_angle(phi) / TAU) * intr.width as f64;
    let j = j.rem_euclid(intr.width as f64);
    (i, j)
}

/// Ray through the center of pixel `(i, j)`: origin at the owning unit's
/// optical center, unit direction from the recovered elevation and azimuth.
pub fn ray_from_pixel(row: usize, col: usize, intr: &SensorIntrinsics) -> (Vec3, Vec3) {
    let k = intr.unit_of_row(row);
    let u = &intr.units[k];
    let i_local = row as f64 + 0.5 - u.row_start as f64;
    let theta = (1.0 - i_local / u.rows() as f64) * u.fov;
    let elevation = theta - u.fov_offset - intr.diode_offsets[row];
    let phi = (0.5 - (col as f64 + 0.5) / intr.width as f64) * TAU;
    let (ce, se) = (elevation.cos(), elevation.sin());
    let dir = Vec3::new(ce * phi.cos(), ce * phi.sin(), se);
    (u.origin(), dir)
}

/// Counters reported by [`project`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProjectionStats {
    /// Points outside every unit's field of view.
    pub dropped: usize,
    /// Points discarded by the z-buffer rule.
    pub collisions: usize,
}

fn wrap_col(j: f64, width: usize) -> usize {
    let w = width as f64;
    let j = j.rem_euclid(w);
    let c = j.floor() as usize;
    c.min(width - 1)
}

/// Row assignment within one unit: candidate row from the uncorrected
/// elevation, then a local search so the per-row diode offset and the
/// floored coordinate agree.
fn assign_row(
    elevation: f64,
    unit: &UnitIntrinsics,
    intr: &SensorIntrinsics,
) -> Option<(usize, f64)> {
    let h = unit.rows() as f64;
    let theta0 = elevation + unit.fov_offset;
    let i0 = unit.row_start as f64 + (1.0 - theta0 / unit.fov) * h;
    let r0 = i0.floor() as i64;
    let mut best: Option<(f64, usize)> = None;
    for r in (r0 - 2)..=(r0 + 2) {
        if r < unit.row_start as i64 || r >= unit.row_end as i64 {
            continue;
        }
        let r = r as usize;
        let theta = theta0 + intr.diode_offsets[r];
        let i_cont = unit.row_start as f64 + (1.0 - theta / unit.fov) * h;
        let miss = (i_cont - (r as f64 + 0.5)).abs();
        if i_cont.floor() as i64 == r as i64 || miss < 0.75 {
            if best.map_or(true, |(b, _)| miss < b) {
                best = Some((miss, r));
            }
        }
    }
    best.map(|(m, r)| (r, m))
}

/// Projects a cloud into a range image. Row assignment prefers the stored
/// ring index; collisions keep the smaller range, first wins on ties.
pub fn project(cloud: &PointCloud, intr: &SensorIntrinsics) -> (RangeImage, ProjectionStats) {
    let mut img = RangeImage::new(intr.width, intr.height);
    let mut src_row = vec![0.0; intr.width * intr.height];
    let mut src_col = vec![0.0; intr.width * intr.height];
    let mut stats = ProjectionStats::default();
    for p in &cloud.points {
        let assigned = if let Some(ring) = p.ring {
            let row = ring as usize;
            if row >= intr.height {
                None
            } else {
                Some((intr.unit_of_row(row), row))
            }
        } else {
            // Unit elevation ranges may overlap, so score every unit and keep
            // the row whose centre lands closest to the corrected coordinate.
            let mut found: Option<(usize, usize, f64)> = None;
            for (k, u) in intr.units.iter().enumerate() {
                let rho = (p.position.x * p.position.x + p.position.y * p.position.y).sqrt();
                let elevation = (p.position.z - u.z_offset).atan2(rho);
                if let Some((row, miss)) = assign_row(elevation, u, intr) {
                    if found.map_or(true, |(_, _, m)| miss < m) {
                        found = Some((k, row, miss));
                    }
                }
            }
            found.map(|(k, row, _)| (k, row))
        };
        let Some((k, row)) = assigned else {
            stats.dropped += 1;
            continue;
        };
        let u = &intr.units[k];
        let phi = p.position.y.atan2(p.position.x);
        let col = match p.col {
            Some(c) if (c as usize) < intr.width => c as usize,
            _ => wrap_col((0.5 - phi / TAU) * intr.width as f64, intr.width),
        };
        let range = (p.position - u.origin()).norm();
        if range <= 0.0 {
            stats.dropped += 1;
            continue;
        }
        let idx = img.idx(row, col);
        if img.valid[idx] {
            stats.collisions += 1;
            if range >= img.depth[idx] {
                continue;
            }
        }
        img.set(row, col, range, p.intensity);
        src_row[idx] = row as f64;
        src_col[idx] = col as f64;
    }
    img.src_row = Some(src_row);
    img.src_col = Some(src_col);
    (img, stats)
}

/// One point per valid pixel: `origin + depth * direction`, optionally
/// taken through that column's rolling-shutter pose.
pub fn unproject(
    img: &RangeImage,
    intr: &SensorIntrinsics,
    poses: Option<&[Pose]>,
) -> PointCloud {
    if let Some(poses) = poses {
        assert_eq!(poses.len(), img.width, "one pose per column expected");
    }
    let mut points = Vec::with_capacity(img.valid_count());
    for row in 0..img.height {
        for col in 0..img.width {
            let idx = img.idx(row, col);
            if !img.valid[idx] {
                continue;
            }
            let (origin, dir) = ray_from_pixel(row, col, intr);
            let mut pos = origin + dir * img.depth[idx];
            if let Some(poses) = poses {
                pos = poses[col].transform_point(pos);
            }
            points.push(Point {
                position: pos,
                intensity: img.intensity[idx],
                ring: Some(row as u32),
                col: Some(col as u32),
                time_frac: Some(col as f64 / img.width as f64),
                range: Some(img.depth[idx]),
            });
        }
    }
    PointCloud::new(points)
}

/// Grid-organized variant of [`unproject`] (sensor frame, no shutter);
/// input for normal estimation.
pub fn unproject_image(img: &RangeImage, intr: &SensorIntrinsics) -> XyzImage {
    let mut out = XyzImage::new(img.width, img.height);
    for row in 0..img.height {
        for col in 0..img.width {
            let idx = img.idx(row, col);
            if !img.valid[idx] {
                continue;
            }
            let (origin, dir) = ray_from_pixel(row, col, intr);
            out.xyz[idx] = origin + dir * img.depth[idx];
            out.valid[idx] = true;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{SplitMix64, PI};

    fn two_unit_intr(seed: u64) -> SensorIntrinsics {
        let mut rng = SplitMix64::new(seed);
        let h = 64;
        let w = 512;
        let split = 24 + (rng.next_u64() % 16) as usize;
        let f_upper = rng.uniform(0.08, 0.15);
        let f_lower = rng.uniform(0.15, 0.30);
        let units = vec![
            UnitIntrinsics {
                fov: f_upper,
                fov_offset: rng.uniform(-0.02, 0.05),
                z_offset: rng.uniform(0.05, 0.15),
                row_start: 0,
                row_end: split,
            },
            UnitIntrinsics {
                fov: f_lower,
                fov_offset: rng.uniform(0.2, 0.35),
                z_offset: rng.uniform(-0.15, -0.05),
                row_start: split,
                row_end: h,
            },
        ];
        // keep diode offsets below ~0.4 of a row height so rows stay
        // physically separable
        let row_height = f_upper.min(f_lower) / h as f64 * 2.0;
        let deltas: Vec<f64> =
            (0..h).map(|_| rng.uniform(-0.4 * row_height, 0.4 * row_height)).collect();
        SensorIntrinsics::new(w, h, units, deltas).unwrap()
    }

    #[test]
    fn angles_on_axis() {
        let u = UnitIntrinsics { fov: 0.2, fov_offset: 0.0, z_offset: 0.0, row_start: 0, row_end: 8 };
        let (t, p) = angles_from_point(Vec3::new(1.0, 0.0, 0.0), &u, 0.0).unwrap();
        assert!(t.abs() < 1e-15 && p.abs() < 1e-15);
        let (t, p) = angles_from_point(Vec3::new(0.0, 1.0, 0.0), &u, 0.0).unwrap();
        assert!(t.abs() < 1e-15 && (p - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn angles_elevation_plus_offsets() {
        let u =
            UnitIntrinsics { fov: 1.0, fov_offset: 0.1, z_offset: 0.0, row_start: 0, row_end: 8 };
        let (t, p) = angles_from_point(Vec3::new(1.0, 0.0, 1.0), &u, 0.01).unwrap();
        assert!((t - (PI / 4.0 + 0.11)).abs() < 1e-12);
        assert!(p.abs() < 1e-15);
    }

    #[test]
    fn degenerate_point_rejected() {
        let u =
            UnitIntrinsics { fov: 0.2, fov_offset: 0.0, z_offset: 0.5, row_start: 0, row_end: 8 };
        assert_eq!(
            angles_from_point(Vec3::new(0.0, 0.0, 0.5), &u, 0.0).unwrap_err(),
            GeometryError::DegeneratePoint
        );
    }

    #[test]
    fn pixel_from_angles_midpoint_and_edges() {
        let intr = SensorIntrinsics::single_unit(1024, 64, 0.4, 0.0);
        let (i, j) = pixel_from_angles(0.2, 0.0, &intr, 0);
        assert!((i - 32.0).abs() < 1e-12 && (j - 512.0).abs() < 1e-12);
        let (i, j) = pixel_from_angles(0.4, PI, &intr, 0);
        assert!(i.abs() < 1e-12 && j.abs() < 1e-12);
        let (i, j) = pixel_from_angles(0.3, -PI / 2.0, &intr, 0);
        assert!((i - 16.0).abs() < 1e-12 && (j - 768.0).abs() < 1e-12);
    }

    #[test]
    fn azimuth_periodicity() {
        let intr = SensorIntrinsics::single_unit(360, 16, 0.4, 0.0);
        for k in -3..=3 {
            let (_, j0) = pixel_from_angles(0.1, 0.7, &intr, 0);
            let (_, j1) = pixel_from_angles(0.1, 0.7 + k as f64 * TAU, &intr, 0);
            assert!((j0 - j1).abs() < 1e-9, "period {k}: {j0} vs {j1}");
            assert!(j1 >= 0.0 && j1 < 360.0);
        }
    }

    #[test]
    fn forward_ray_axes() {
        // one row, fov 0.2, offset 0.1: the row center elevation is 0.
        // W = 2 puts column 0 at phi = pi/2 and an elevation-zero ray.
        let intr = SensorIntrinsics::single_unit(2, 1, 0.2, 0.1);
        let (o, d) = ray_from_pixel(0, 0, &intr);
        assert!(o.norm() < 1e-15);
        assert!((d - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        // and an odd width puts the middle column at phi = 0 exactly
        let intr = SensorIntrinsics::single_unit(5, 1, 0.2, 0.1);
        let (_, d) = ray_from_pixel(0, 2, &intr);
        assert!((d - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn ray_pixel_roundtrip_all_pixels() {
        for seed in 0..3u64 {
            let intr = two_unit_intr(seed);
            for row in 0..intr.height {
                for col in (0..intr.width).step_by(37) {
                    let (o, d) = ray_from_pixel(row, col, &intr);
                    let k = intr.unit_of_row(row);
                    let p = o + d * 15.0;
                    let (theta, phi) =
                        angles_from_point(p, &intr.units[k], intr.diode_offsets[row]).unwrap();
                    let (i, j) = pixel_from_angles(theta, phi, &intr, k);
                    assert!((i - (row as f64 + 0.5)).abs() < 1e-9, "i {i} row {row}");
                    assert!((j - (col as f64 + 0.5)).abs() < 1e-9, "j {j} col {col}");
                }
            }
        }
    }

    #[test]
    fn project_single_point_on_center_ray() {
        let intr = SensorIntrinsics::single_unit(64, 8, 0.2, 0.1);
        let (o, d) = ray_from_pixel(3, 17, &intr);
        let cloud = PointCloud::new(vec![Point::new(o + d * 10.0, 0.5)]);
        let (img, stats) = project(&cloud, &intr);
        assert_eq!(stats.dropped, 0);
        assert_eq!(img.valid_count(), 1);
        let idx = img.idx(3, 17);
        assert!(img.valid[idx]);
        assert!((img.depth[idx] - 10.0).abs() < 1e-9);
        assert!((img.intensity[idx] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn project_zbuffer_keeps_near() {
        let intr = SensorIntrinsics::single_unit(64, 8, 0.2, 0.1);
        let (o, d) = ray_from_pixel(4, 9, &intr);
        let cloud = PointCloud::new(vec![
            Point::new(o + d * 7.0, 0.1),
            Point::new(o + d * 5.0, 0.9),
        ]);
        let (img, stats) = project(&cloud, &intr);
        assert_eq!(stats.collisions, 1);
        let idx = img.idx(4, 9);
        assert!((img.depth[idx] - 5.0).abs() < 1e-9);
        assert!((img.intensity[idx] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn project_order_invariant_distinct_ranges() {
        let intr = two_unit_intr(7);
        let mut rng = SplitMix64::new(99);
        let mut pts = Vec::new();
        for row in (0..intr.height).step_by(5) {
            for col in (0..intr.width).step_by(61) {
                let (o, d) = ray_from_pixel(row, col, &intr);
                pts.push(Point::new(o + d * rng.uniform(2.0, 50.0), rng.next_f64()));
            }
        }
        let (a, _) = project(&PointCloud::new(pts.clone()), &intr);
        pts.reverse();
        let (b, _) = project(&PointCloud::new(pts), &intr);
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.valid, b.valid);
    }

    #[test]
    fn roundtrip_project_unproject_positions() {
        let intr = two_unit_intr(11);
        let mut rng = SplitMix64::new(5);
        let mut pts = Vec::new();
        for row in 0..intr.height {
            for col in (0..intr.width).step_by(17) {
                let (o, d) = ray_from_pixel(row, col, &intr);
                pts.push(Point::new(o + d * rng.uniform(2.0, 60.0), 0.3));
            }
        }
        let n = pts.len();
        let (img, stats) = project(&PointCloud::new(pts.clone()), &intr);
        assert_eq!(stats.dropped, 0, "no center-ray point may fall out of FOV");
        assert_eq!(img.valid_count(), n);
        let back = unproject(&img, &intr, None);
        assert_eq!(back.len(), n);
        let mut max_err = 0.0_f64;
        for p in &back.points {
            let row = p.ring.unwrap() as usize;
            let col = p.col.unwrap() as usize;
            let orig = pts
                .iter()
                .find(|q| {
                    let (o, d) = ray_from_pixel(row, col, &intr);
                    (q.position - o - d * (q.position - o).norm()).norm() < 1e-7
                })
                .unwrap();
            max_err = max_err.max((p.position - orig.position).norm());
        }
        assert!(max_err < 1e-4, "max roundtrip error {max_err}");
    }

    #[test]
    fn unproject_empty_image() {
        let intr = SensorIntrinsics::single_unit(16, 4, 0.2, 0.1);
        let img = RangeImage::new(16, 4);
        assert!(unproject(&img, &intr, None).is_empty());
    }

    #[test]
    fn unproject_single_pixel_identity_pose() {
        let intr = SensorIntrinsics::single_unit(16, 4, 0.2, 0.1);
        let mut img = RangeImage::new(16, 4);
        img.set(2, 5, 12.0, 0.7);
        let poses = vec![Pose::IDENTITY; 16];
        let cloud = unproject(&img, &intr, Some(&poses));
        assert_eq!(cloud.len(), 1);
        let (o, d) = ray_from_pixel(2, 5, &intr);
        assert!((cloud.points[0].position - (o + d * 12.0)).norm() < 1e-12);
        assert_eq!(cloud.points[0].time_frac, Some(5.0 / 16.0));
    }

    #[test]
    fn row_partition_validated() {
        let units = vec![
            UnitIntrinsics { fov: 0.1, fov_offset: 0.0, z_offset: 0.0, row_start: 0, row_end: 4 },
            UnitIntrinsics { fov: 0.1, fov_offset: 0.0, z_offset: 0.0, row_start: 5, row_end: 8 },
        ];
        assert_eq!(
            SensorIntrinsics::new(16, 8, units, vec![0.0; 8]).unwrap_err(),
            GeometryError::BadRowPartition
        );
    }

    #[test]
    fn project_respects_unit_row_ranges() {
        let intr = two_unit_intr(3);
        let mut rng = SplitMix64::new(12);
        let mut pts = Vec::new();
        for row in 0..intr.height {
            for col in (0..intr.width).step_by(53) {
                let (o, d) = ray_from_pixel(row, col, &intr);
                pts.push(Point::new(o + d * rng.uniform(3.0, 30.0), 0.2));
            }
        }
        let (img, _) = project(&PointCloud::new(pts), &intr);
        for row in 0..intr.height {
            let k = intr.unit_of_row(row);
            let u = &intr.units[k];
            assert!(row >= u.row_start && row < u.row_end);
            // every valid pixel in this row must reproject into this unit's fov
            for col in 0..intr.width {
                let idx = img.idx(row, col);
                if img.valid[idx] {
                    let (o, d) = ray_from_pixel(row, col, &intr);
                    let p = o + d * img.depth[idx];
                    let (theta, _) =
                        angles_from_point(p, u, intr.diode_offsets[row]).unwrap();
                    assert!(theta >= -1e-9 && theta <= u.fov + 1e-9);
                }
            }
        }
    }
}
