//! Synthetic scene description and the analytic scan synthesizer. This is
//! an independent oracle by design: ray/primitive intersections in closed
//! form, exact normals, and the sensor-model forward chain — no voxel
//! sampling shared with the field renderer.

use std::path::Path;

use pbl_core::field::VoxelField;
use pbl_core::geometry::ray_from_pixel;
use pbl_core::image::{Point, PointCloud};
use pbl_core::math::{SplitMix64, Vec3};
use pbl_core::pose::{shutter_poses, Pose, ScanDirection};
use pbl_core::sensor::apply_model;
use pbl_core::{IntensityParams, RangeImage, SensorIntrinsics, UnitIntrinsics};
use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamsDoc;
use crate::poses_io::quat_from_matrix;
use crate::{config_err, Result};

pub const DEFAULT_SEED: u64 = 0x5EED_1DA2;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitDoc {
    pub fov: f64,
    pub fov_offset: f64,
    #[serde(default)]
    pub z_offset: f64,
    pub row_start: usize,
    pub row_end: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    /// Solid half-space `normal . p <= offset`.
    Plane { normal: [f64; 3], offset: f64, base_intensity: f64, reflectivity: f64 },
    Sphere { center: [f64; 3], radius: f64, base_intensity: f64, reflectivity: f64 },
    Box { center: [f64; 3], half_extents: [f64; 3], base_intensity: f64, reflectivity: f64 },
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Noise {
    /// Depth noise sigma, meters.
    #[serde(default)]
    pub depth: f64,
    /// Intensity noise sigma.
    #[serde(default)]
    pub intensity: f64,
}

fn default_max_range() -> f64 {
    120.0
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub units: Vec<UnitDoc>,
    /// Per-row elevation corrections; zeros when omitted.
    #[serde(default)]
    pub diode_offsets: Option<Vec<f64>>,
    pub params: ParamsDoc,
    pub primitives: Vec<Primitive>,
    /// 3x4 row-major rigid transforms, one per frame; identity when empty.
    #[serde(default)]
    pub trajectory: Vec<[f64; 12]>,
    #[serde(default)]
    pub noise: Noise,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_max_range")]
    pub max_range: f64,
    #[serde(default = "default_true")]
    pub shutter: bool,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(config_err("scene: at least one primitive required"));
        }
        if self.noise.depth < 0.0 || self.noise.intensity < 0.0 {
            return Err(config_err("scene: noise sigma must be >= 0"));
        }
        self.intrinsics()?;
        self.params()?;
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<SensorIntrinsics> {
        let units = self
            .units
            .iter()
            .map(|u| UnitIntrinsics {
                fov: u.fov,
                fov_offset: u.fov_offset,
                z_offset: u.z_offset,
                row_start: u.row_start,
                row_end: u.row_end,
            })
            .collect();
        let deltas = match &self.diode_offsets {
            Some(d) => d.clone(),
            None => vec![0.0; self.height],
        };
        SensorIntrinsics::new(self.width, self.height, units, deltas)
            .map_err(|e| config_err(format!("scene: bad intrinsics: {e:?}")))
    }

    pub fn params(&self) -> Result<IntensityParams> {
        let p = self.params.to_params()?;
        if p.laser_powers.len() != self.height {
            return Err(config_err(format!(
                "scene: {} laser powers for height {}",
                p.laser_powers.len(),
                self.height
            )));
        }
        Ok(p)
    }

    pub fn pose(&self, frame: usize) -> Pose {
        match self.trajectory.get(frame) {
            Some(v) => {
                let m = [v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]];
                Pose::new(quat_from_matrix(&m), Vec3::new(v[3], v[7], v[11]))
            }
            None => Pose::IDENTITY,
        }
    }
}

pub fn load_scene(path: &Path) -> Result<SceneSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let spec: SceneSpec = serde_json::from_str(&text)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

struct Hit {
    t: f64,
    normal: Vec3,
    base: f64,
    reflectivity: f64,
}

fn intersect(prim: &Primitive, o: Vec3, d: Vec3) -> Option<(f64, Vec3)> {
    match prim {
        Primitive::Plane { normal, offset, .. } => {
            let n = Vec3::new(normal[0], normal[1], normal[2]).normalized();
            let denom = n.dot(d);
            if n.dot(o) <= *offset || denom >= 0.0 {
                return None; // origin inside the half-space or receding
            }
            let t = (offset - n.dot(o)) / denom;
            (t > 0.0).then_some((t, n))
        }
        Primitive::Sphere { center, radius, .. } => {
            let c = Vec3::new(center[0], center[1], center[2]);
            let oc = o - c;
            let b = oc.dot(d);
            let disc = b * b - (oc.dot(oc) - radius * radius);
            if disc < 0.0 {
                return None;
            }
            let t = -b - disc.sqrt();
            if t <= 0.0 {
                return None; // inside or behind
            }
            let n = (o + d * t - c) / *radius;
            Some((t, n))
        }
        Primitive::Box { center, half_extents, .. } => {
            let c = Vec3::new(center[0], center[1], center[2]);
            let he = half_extents;
            let mut t_enter = f64::NEG_INFINITY;
            let mut t_exit = f64::INFINITY;
            let mut axis = 0usize;
            for (i, (oc, dd, h)) in
                [(o.x - c.x, d.x, he[0]), (o.y - c.y, d.y, he[1]), (o.z - c.z, d.z, he[2])]
                    .into_iter()
                    .enumerate()
            {
                if dd.abs() < 1e-15 {
                    if oc.abs() > h {
                        return None;
                    }
                    continue;
                }
                let (mut a, mut b) = ((-h - oc) / dd, (h - oc) / dd);
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                }
                if a > t_enter {
                    t_enter = a;
                    axis = i;
                }
                t_exit = t_exit.min(b);
            }
            if t_enter <= 0.0 || t_enter > t_exit {
                return None;
            }
            let p = o + d * t_enter - c;
            let mut n = Vec3::ZERO;
            match axis {
                0 => n.x = p.x.signum(),
                1 => n.y = p.y.signum(),
                _ => n.z = p.z.signum(),
            }
            Some((t_enter, n))
        }
    }
}

fn prim_surface(prim: &Primitive) -> (f64, f64) {
    match prim {
        Primitive::Plane { base_intensity, reflectivity, .. }
        | Primitive::Sphere { base_intensity, reflectivity, .. }
        | Primitive::Box { base_intensity, reflectivity, .. } => (*base_intensity, *reflectivity),
    }
}

fn nearest_hit(spec: &SceneSpec, o: Vec3, d: Vec3) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for prim in &spec.primitives {
        if let Some((t, normal)) = intersect(prim, o, d) {
            if t > 0.05 && t < spec.max_range && best.as_ref().map_or(true, |b| t < b.t) {
                let (base, reflectivity) = prim_surface(prim);
                best = Some(Hit { t, normal, base, reflectivity });
            }
        }
    }
    best
}

/// Output of one synthesized revolution.
pub struct SynthScan {
    /// Noiseless depth/intensity.
    pub truth: RangeImage,
    /// Depth/intensity with the spec's seeded noise applied.
    pub noisy: RangeImage,
    /// The noisy returns in scan order (row major), per-column sensor
    /// frame positions, ring/column/time channels filled in.
    pub cloud: PointCloud,
    /// Exact surface normal per pixel (world frame); zero where invalid.
    pub normals: Vec<Vec3>,
    /// Exact incidence cosine per pixel; zero where invalid.
    pub cos_incidence: Vec<f64>,
}

fn gauss(rng: &mut SplitMix64) -> f64 {
    // Box-Muller; next_f64 is in [0, 1)
    let u1 = (1.0 - rng.next_f64()).max(1e-300);
    let u2 = rng.next_f64();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Deterministic for a given spec and frame index.
pub fn synthesize_scan(spec: &SceneSpec, frame: usize) -> Result<SynthScan> {
    spec.validate()?;
    let intr = spec.intrinsics()?;
    let params = spec.params()?;
    let p0 = spec.pose(frame);
    let p1 = if frame + 1 < spec.trajectory.len() { spec.pose(frame + 1) } else { p0 };
    let poses = if spec.shutter {
        shutter_poses(&p0, &p1, intr.width, ScanDirection::Forward)
            .map_err(|e| config_err(format!("scene: {e}")))?
    } else {
        vec![p0; intr.width]
    };

    let mut truth = RangeImage::new(intr.width, intr.height);
    let mut noisy = RangeImage::new(intr.width, intr.height);
    let mut normals = vec![Vec3::ZERO; intr.width * intr.height];
    let mut cos_incidence = vec![0.0; intr.width * intr.height];
    let mut points = Vec::new();
    let mut rng = SplitMix64::new(spec.seed ^ (frame as u64).wrapping_mul(0x9E37_79B9));

    for row in 0..intr.height {
        for col in 0..intr.width {
            let (o_local, d_local) = ray_from_pixel(row, col, &intr);
            let pose = &poses[col];
            let o = pose.transform_point(o_local);
            let d = pose.transform_direction(d_local);
            let Some(hit) = nearest_hit(spec, o, d) else { continue };
            let idx = row * intr.width + col;
            let cos = (-hit.normal.dot(d)).clamp(0.0, 1.0);
            let intensity =
                apply_model(hit.base, hit.t, cos, hit.reflectivity, row, &params).clamp(0.0, 1.0);
            truth.set(row, col, hit.t, intensity);
            normals[idx] = hit.normal;
            cos_incidence[idx] = cos;

            let depth_n = (hit.t + spec.noise.depth * gauss(&mut rng)).max(0.05);
            let int_n = (intensity + spec.noise.intensity * gauss(&mut rng)).clamp(0.0, 1.0);
            noisy.set(row, col, depth_n, int_n);
            points.push(Point {
                position: o_local + d_local * depth_n,
                intensity: int_n,
                ring: Some(row as u32),
                col: Some(col as u32),
                time_frac: Some(col as f64 / intr.width as f64),
                range: Some(depth_n),
            });
        }
    }
    Ok(SynthScan { truth, noisy, cloud: PointCloud::new(points), normals, cos_incidence })
}

/// Signed distance to the primitive surface (negative inside); the box
/// uses the exact exterior distance and an axis bound inside.
fn signed_distance(prim: &Primitive, p: Vec3) -> f64 {
    match prim {
        Primitive::Plane { normal, offset, .. } => {
            Vec3::new(normal[0], normal[1], normal[2]).normalized().dot(p) - offset
        }
        Primitive::Sphere { center, radius, .. } => {
            (p - Vec3::new(center[0], center[1], center[2])).norm() - radius
        }
        Primitive::Box { center, half_extents, .. } => {
            let q = p - Vec3::new(center[0], center[1], center[2]);
            let d = Vec3::new(
                q.x.abs() - half_extents[0],
                q.y.abs() - half_extents[1],
                q.z.abs() - half_extents[2],
            );
            let outside = Vec3::new(d.x.max(0.0), d.y.max(0.0), d.z.max(0.0)).norm();
            outside + d.x.max(d.y).max(d.z).min(0.0)
        }
    }
}

/// Rasterizes the primitives into a voxel field: interiors opaque, and the
/// surface channels painted into *every* cell from the nearest primitive.
/// Painting only interior cells would let the trilinear ramp at a surface
/// mix the base intensity with zeros from the empty neighbors, darkening
/// rendered returns right where the opacity saturates.
pub fn voxelize_scene(
    spec: &SceneSpec,
    origin: Vec3,
    dims: [usize; 3],
    cell_size: f64,
) -> VoxelField {
    let mut field = VoxelField::new(dims, cell_size, origin);
    let sigma = 16.0 / cell_size; // opaque within roughly one cell
    for iz in 0..dims[2] {
        for iy in 0..dims[1] {
            for ix in 0..dims[0] {
                let p = origin
                    + Vec3::new(ix as f64 + 0.5, iy as f64 + 0.5, iz as f64 + 0.5) * cell_size;
                let nearest = spec
                    .primitives
                    .iter()
                    .map(|prim| (signed_distance(prim, p), prim))
                    .min_by(|a, b| a.0.total_cmp(&b.0));
                if let Some((dist, prim)) = nearest {
                    let (base, refl) = prim_surface(prim);
                    let c = field.cell_index(ix, iy, iz);
                    field.intensity[c] = base;
                    field.reflectivity[c] = refl;
                    if dist <= 0.0 {
                        field.density[c] = sigma;
                    }
                }
            }
        }
    }
    field
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_spec() -> SceneSpec {
        SceneSpec {
            width: 64,
            height: 16,
            units: vec![UnitDoc { fov: 0.6, fov_offset: 0.7, z_offset: 0.0, row_start: 0, row_end: 16 }],
            diode_offsets: None,
            params: ParamsDoc::from_params(&IntensityParams::identity(16)),
            primitives: vec![Primitive::Plane {
                normal: [0.0, 0.0, 1.0],
                offset: -2.0,
                base_intensity: 0.5,
                reflectivity: 0.3,
            }],
            trajectory: vec![],
            noise: Noise::default(),
            seed: DEFAULT_SEED,
            max_range: 120.0,
            shutter: false,
        }
    }

    #[test]
    fn ground_plane_depth_exact() {
        let spec = base_spec();
        let intr = spec.intrinsics().unwrap();
        let scan = synthesize_scan(&spec, 0).unwrap();
        // nadir-most ray: bottom row
        let row = 15;
        let col = 0;
        let idx = row * intr.width + col;
        assert!(scan.truth.valid[idx]);
        let (o, d) = ray_from_pixel(row, col, &intr);
        let expect = (-2.0 - o.z) / d.z;
        assert!(
            (scan.truth.depth[idx] - expect).abs() < 1e-9,
            "{} vs {}",
            scan.truth.depth[idx],
            expect
        );
        assert_eq!(scan.normals[idx], Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn centered_sphere_depth() {
        let mut spec = base_spec();
        spec.primitives.push(Primitive::Sphere {
            center: [10.0, 0.0, 0.0],
            radius: 2.0,
            base_intensity: 0.8,
            reflectivity: 0.5,
        });
        let hit = nearest_hit(&spec, Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((hit.t - 8.0).abs() < 1e-12);
        assert_eq!(hit.normal, Vec3::new(-1.0, 0.0, 0.0));
    }

    #[test]
    fn box_face_normal() {
        let prim = Primitive::Box {
            center: [5.0, 0.0, 0.0],
            half_extents: [1.0, 2.0, 2.0],
            base_intensity: 0.5,
            reflectivity: 0.5,
        };
        let (t, n) = intersect(&prim, Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((t - 4.0).abs() < 1e-12);
        assert_eq!(n, Vec3::new(-1.0, 0.0, 0.0));
    }

    #[test]
    fn deterministic_across_runs() {
        let mut spec = base_spec();
        spec.noise = Noise { depth: 0.02, intensity: 0.01 };
        let a = synthesize_scan(&spec, 3).unwrap();
        let b = synthesize_scan(&spec, 3).unwrap();
        assert_eq!(a.noisy.depth, b.noisy.depth);
        assert_eq!(a.noisy.intensity, b.noisy.intensity);
        // different frame, different noise
        let c = synthesize_scan(&spec, 4).unwrap();
        assert_ne!(a.noisy.depth, c.noisy.depth);
    }

    #[test]
    fn empty_primitives_rejected() {
        let mut spec = base_spec();
        spec.primitives.clear();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn synth_matches_voxelized_field_render() {
        // dual implementation agreement: analytic intersections vs the
        // volumetric renderer on a rasterized copy of the same scene
        let spec = base_spec();
        let intr = spec.intrinsics().unwrap();
        let scan = synthesize_scan(&spec, 0).unwrap();
        let cell = 0.25;
        let field = voxelize_scene(&spec, Vec3::new(-16.0, -16.0, -4.0), [128, 128, 10], cell);
        let opts = pbl_core::field::RenderOptions {
            shutter: false,
            max_range: spec.max_range,
            ..Default::default()
        };
        let render = pbl_core::field::render_scan(
            &field,
            &intr,
            &Pose::IDENTITY,
            &Pose::IDENTITY,
            &spec.params().unwrap(),
            &opts,
        )
        .unwrap();
        let mut compared = 0;
        for idx in 0..scan.truth.depth.len() {
            if !scan.truth.valid[idx] || !render.image.valid[idx] {
                continue;
            }
            if scan.truth.depth[idx] > 14.0 {
                continue; // outside the rasterized box
            }
            // rasterization places the surface within one cell of the true
            // plane; compare perpendicular to it (|dz| = |dt| * |d.z|)
            let (_, d) = ray_from_pixel(idx / intr.width, idx % intr.width, &intr);
            let dz = (scan.truth.depth[idx] - render.image.depth[idx]).abs() * d.z.abs();
            assert!(
                dz <= cell,
                "pixel {idx}: {} vs {}",
                scan.truth.depth[idx],
                render.image.depth[idx]
            );
            compared += 1;
        }
        assert!(compared > 200, "only {compared} pixels compared");
    }
}
