//! Explicit voxel scene: density, base intensity, reflectivity and drop
//! probability per cell, rendered by transmittance accumulation along
//! fixed-step rays with trilinear channel interpolation.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{ray_from_pixel, unproject_image, SensorIntrinsics};
use crate::image::RangeImage;
#[cfg(not(feature = "std"))]
use crate::math::FloatMath;
use crate::math::Vec3;
use crate::normals::{estimate_normals, NormalImage};
use crate::pose::{shutter_poses, Pose, PoseError, ScanDirection};
use crate::sensor::{apply_model_eval, IntensityParams};

pub const CHANNELS: [&str; 4] = ["density", "intensity", "reflectivity", "drop"];

/// Dense voxel grid over an axis-aligned box. Cell centers sit at
/// `origin + (index + 0.5) * cell_size`; samples outside the box read 0.
#[derive(Clone, Debug)]
pub struct VoxelField {
    pub dims: [usize; 3],
    pub cell_size: f64,
    pub origin: Vec3,
    /// Extinction per meter, non-negative.
    pub density: Vec<f64>,
    /// Base intensity in [0, 1].
    pub intensity: Vec<f64>,
    /// Reflectivity in [0, 1].
    pub reflectivity: Vec<f64>,
    /// Drop probability contribution in [0, 1].
    pub drop: Vec<f64>,
}

impl VoxelField {
    pub fn new(dims: [usize; 3], cell_size: f64, origin: Vec3) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        VoxelField {
            dims,
            cell_size,
            origin,
            density: vec![0.0; n],
            intensity: vec![0.0; n],
            reflectivity: vec![0.0; n],
            drop: vec![0.0; n],
        }
    }

    pub fn cell_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn cell_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    pub fn max_corner(&self) -> Vec3 {
        self.origin
            + Vec3::new(
                self.dims[0] as f64 * self.cell_size,
                self.dims[1] as f64 * self.cell_size,
                self.dims[2] as f64 * self.cell_size,
            )
    }

    /// The 8 cell indices and trilinear weights around `p`; out-of-grid
    /// corners are dropped (zero padding).
    fn corners(&self, p: Vec3) -> ([(usize, f64); 8], usize) {
        let u = (p - self.origin) / self.cell_size - Vec3::new(0.5, 0.5, 0.5);
        let fx = u.x.floor();
        let fy = u.y.floor();
        let fz = u.z.floor();
        let wx = u.x - fx;
        let wy = u.y - fy;
        let wz = u.z - fz;
        let mut out = [(0usize, 0.0f64); 8];
        let mut n = 0;
        for dz in 0..2usize {
            for dy in 0..2usize {
                for dx in 0..2usize {
                    let ix = fx as i64 + dx as i64;
                    let iy = fy as i64 + dy as i64;
                    let iz = fz as i64 + dz as i64;
                    if ix < 0
                        || iy < 0
                        || iz < 0
                        || ix >= self.dims[0] as i64
                        || iy >= self.dims[1] as i64
                        || iz >= self.dims[2] as i64
                    {
                        continue;
                    }
                    let w = (if dx == 0 { 1.0 - wx } else { wx })
                        * (if dy == 0 { 1.0 - wy } else { wy })
                        * (if dz == 0 { 1.0 - wz } else { wz });
                    out[n] = (self.cell_index(ix as usize, iy as usize, iz as usize), w);
                    n += 1;
                }
            }
        }
        (out, n)
    }

    pub fn sample(&self, channel: &[f64], p: Vec3) -> f64 {
        let (corners, n) = self.corners(p);
        corners[..n].iter().map(|(i, w)| channel[*i] * w).sum()
    }

    /// Trilinear value and its spatial gradient.
    fn sample_with_gradient(&self, channel: &[f64], p: Vec3) -> (f64, Vec3) {
        let h = self.cell_size * 0.5;
        let v = self.sample(channel, p);
        // central differences of the trilinear interpolant; half-cell step
        // keeps this consistent with the piecewise-linear reconstruction
        let gx = (self.sample(channel, p + Vec3::new(h, 0.0, 0.0))
            - self.sample(channel, p - Vec3::new(h, 0.0, 0.0)))
            / (2.0 * h);
        let gy = (self.sample(channel, p + Vec3::new(0.0, h, 0.0))
            - self.sample(channel, p - Vec3::new(0.0, h, 0.0)))
            / (2.0 * h);
        let gz = (self.sample(channel, p + Vec3::new(0.0, 0.0, h))
            - self.sample(channel, p - Vec3::new(0.0, 0.0, h)))
            / (2.0 * h);
        (v, Vec3::new(gx, gy, gz))
    }

    /// Ray/box overlap in ray parameter, clipped to `[0, max_range]`.
    fn clip_ray(&self, origin: Vec3, dir: Vec3, max_range: f64) -> Option<(f64, f64)> {
        let lo = self.origin;
        let hi = self.max_corner();
        let mut t0 = 0.0f64;
        let mut t1 = max_range;
        for (o, d, l, h) in [
            (origin.x, dir.x, lo.x, hi.x),
            (origin.y, dir.y, lo.y, hi.y),
            (origin.z, dir.z, lo.z, hi.z),
        ] {
            if d.abs() < 1e-15 {
                if o < l || o > h {
                    return None;
                }
                continue;
            }
            let (mut a, mut b) = ((l - o) / d, (h - o) / d);
            if a > b {
                core::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        if t1 <= t0 {
            None
        } else {
            Some((t0, t1))
        }
    }
}

/// Accumulated outputs of one ray.
#[derive(Clone, Copy, Debug, Default)]
pub struct RayShade {
    /// Expected range (sum of `T_i alpha_i t_i`).
    pub depth: f64,
    pub intensity: f64,
    pub reflectivity: f64,
    pub drop: f64,
    /// Total accumulation weight `sum T_i alpha_i`.
    pub weight: f64,
    /// Transmittance left after the last sample (background weight).
    pub residual: f64,
}

/// Loss adjoints with respect to the four accumulated outputs.
#[derive(Clone, Copy, Debug, Default)]
pub struct RayAdjoint {
    pub depth: f64,
    pub intensity: f64,
    pub reflectivity: f64,
    pub drop: f64,
}

impl RayAdjoint {
    pub fn is_zero(&self) -> bool {
        self.depth == 0.0 && self.intensity == 0.0 && self.reflectivity == 0.0 && self.drop == 0.0
    }
}

/// Per-channel gradient buffers matching a field's layout.
#[derive(Clone, Debug)]
pub struct FieldGrads {
    pub density: Vec<f64>,
    pub intensity: Vec<f64>,
    pub reflectivity: Vec<f64>,
    pub drop: Vec<f64>,
}

impl FieldGrads {
    pub fn zeros(field: &VoxelField) -> Self {
        let n = field.cell_count();
        FieldGrads {
            density: vec![0.0; n],
            intensity: vec![0.0; n],
            reflectivity: vec![0.0; n],
            drop: vec![0.0; n],
        }
    }
}

/// Gradient of the scalar loss with respect to ray origin and direction.
#[derive(Clone, Copy, Debug, Default)]
pub struct RayInputGrad {
    pub origin: Vec3,
    pub direction: Vec3,
}

const MIN_TRANSMITTANCE: f64 = 1e-7;

struct SampleRecord {
    t: f64,
    pos: Vec3,
    alpha: f64,
    trans: f64,
    values: [f64; 3], // intensity, reflectivity, drop
}

fn march(field: &VoxelField, origin: Vec3, dir: Vec3, step: f64, max_range: f64) -> Vec<SampleRecord> {
    let Some((t0, t1)) = field.clip_ray(origin, dir, max_range) else {
        return Vec::new();
    };
    let count = ((t1 - t0) / step).ceil() as usize;
    let mut records = Vec::with_capacity(count);
    let mut trans = 1.0f64;
    for m in 0..count {
        let t = t0 + (m as f64 + 0.5) * step;
        if t > t1 {
            break;
        }
        let pos = origin + dir * t;
        let sigma = field.sample(&field.density, pos).max(0.0);
        let alpha = 1.0 - (-sigma * step).exp();
        let values = [
            field.sample(&field.intensity, pos),
            field.sample(&field.reflectivity, pos),
            field.sample(&field.drop, pos),
        ];
        records.push(SampleRecord { t, pos, alpha, trans, values });
        trans *= 1.0 - alpha;
        if trans < MIN_TRANSMITTANCE {
            break;
        }
    }
    records
}

fn shade(records: &[SampleRecord]) -> RayShade {
    let mut out = RayShade { residual: 1.0, ..RayShade::default() };
    for r in records {
        let w = r.trans * r.alpha;
        out.depth += w * r.t;
        out.intensity += w * r.values[0];
        out.reflectivity += w * r.values[1];
        out.drop += w * r.values[2];
        out.weight += w;
        out.residual = r.trans * (1.0 - r.alpha);
    }
    out
}

/// Fixed-step transmittance accumulation: `alpha_i = 1 - exp(-sigma_i s)`,
/// `T_i` the running product of `1 - alpha`, channel output
/// `sum T_i alpha_i v_i` (the depth channel uses `v_i = t_i`). Rays that
/// miss the grid return zeros with residual 1.
pub fn render_ray(
    field: &VoxelField,
    origin: Vec3,
    dir: Vec3,
    step: f64,
    max_range: f64,
) -> RayShade {
    shade(&march(field, origin, dir, step, max_range))
}

/// Backward pass of [`render_ray`]: scatters `dL/d(channel cell)` into
/// `grads` and, when requested, accumulates `dL/d(origin, direction)`
/// through the trilinear reconstruction (the sampling pattern itself is
/// treated as fixed).
pub fn render_ray_backward(
    field: &VoxelField,
    origin: Vec3,
    dir: Vec3,
    step: f64,
    max_range: f64,
    adj: &RayAdjoint,
    grads: &mut FieldGrads,
    mut input_grad: Option<&mut RayInputGrad>,
) -> RayShade {
    let records = march(field, origin, dir, step, max_range);
    let out = shade(&records);
    if records.is_empty() || adj.is_zero() {
        return out;
    }
    // suffix sums over l > m of T_l alpha_l v_l per adjoint channel
    let n = records.len();
    let mut suffix = vec![0.0f64; n + 1];
    for m in (0..n).rev() {
        let r = &records[m];
        let w = r.trans * r.alpha;
        let contrib = adj.depth * r.t
            + adj.intensity * r.values[0]
            + adj.reflectivity * r.values[1]
            + adj.drop * r.values[2];
        suffix[m] = suffix[m + 1] + w * contrib;
    }
    for (m, r) in records.iter().enumerate() {
        let w = r.trans * r.alpha;
        let (corners, nc) = field.corners(r.pos);
        // channel value gradients
        let channel_adj = [adj.intensity, adj.reflectivity, adj.drop];
        for (ch, buf) in [
            &mut grads.intensity as &mut Vec<f64>,
            &mut grads.reflectivity,
            &mut grads.drop,
        ]
        .into_iter()
        .enumerate()
        {
            let a = channel_adj[ch];
            if a == 0.0 {
                continue;
            }
            for (idx, cw) in &corners[..nc] {
                buf[*idx] += a * w * cw;
            }
        }
        // density gradient: d(out)/d(sigma_m) = s * ((1 - alpha_m) T_m
        // <adj, v_m> - suffix(m+1)); zero when the relu clamp is active
        let sigma_raw = field.sample(&field.density, r.pos);
        let own = r.trans
            * (1.0 - r.alpha)
            * (adj.depth * r.t
                + adj.intensity * r.values[0]
                + adj.reflectivity * r.values[1]
                + adj.drop * r.values[2]);
        let d_sigma = if sigma_raw > 0.0 { step * (own - suffix[m + 1]) } else { 0.0 };
        if d_sigma != 0.0 {
            for (idx, cw) in &corners[..nc] {
                grads.density[*idx] += d_sigma * cw;
            }
        }
        if let Some(ig) = input_grad.as_deref_mut() {
            let mut d_pos = Vec3::ZERO;
            if d_sigma != 0.0 {
                let (_, g) = field.sample_with_gradient(&field.density, r.pos);
                d_pos = d_pos + g * d_sigma;
            }
            for (ch, buf) in
                [&field.intensity, &field.reflectivity, &field.drop].into_iter().enumerate()
            {
                let a = channel_adj[ch];
                if a == 0.0 {
                    continue;
                }
                let (_, g) = field.sample_with_gradient(buf, r.pos);
                d_pos = d_pos + g * (a * w);
            }
            ig.origin = ig.origin + d_pos;
            ig.direction = ig.direction + d_pos * r.t;
        }
    }
    out
}

/// Pinhole camera description for cross-sensor rendering. Camera frame:
/// `z` forward, `x` right, `y` down.
#[derive(Clone, Copy, Debug)]
pub struct Pinhole {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Per-pixel rendering outputs for a full view.
#[derive(Clone, Debug)]
pub struct RenderResult {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub intensity_base: Vec<f64>,
    pub reflectivity: Vec<f64>,
    pub drop_prob: Vec<f64>,
    pub weight: Vec<f64>,
    pub transmittance_residual: Vec<f64>,
}

impl RenderResult {
    fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        RenderResult {
            width,
            height,
            depth: vec![0.0; n],
            intensity_base: vec![0.0; n],
            reflectivity: vec![0.0; n],
            drop_prob: vec![0.0; n],
            weight: vec![0.0; n],
            transmittance_residual: vec![1.0; n],
        }
    }
}

/// Options shared by scan and camera rendering.
#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    pub shutter: bool,
    pub direction: ScanDirection,
    /// Sample spacing; defaults to half a cell.
    pub step: Option<f64>,
    pub max_range: f64,
    /// Accumulation weight above which a pixel counts as a return.
    pub valid_weight: f64,
    pub apply_distance: bool,
    pub apply_incidence: bool,
    pub apply_laser: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            shutter: true,
            direction: ScanDirection::Forward,
            step: None,
            max_range: 120.0,
            valid_weight: 0.5,
            apply_distance: true,
            apply_incidence: true,
            apply_laser: true,
        }
    }
}

pub struct ScanRender {
    pub image: RangeImage,
    pub result: RenderResult,
    /// Incidence cosine per pixel used by the intensity chain (1 where no
    /// normal support exists).
    pub cos_incidence: Vec<f64>,
    pub normals: NormalImage,
}

/// Renders a full revolution: per-column rolling-shutter poses, volumetric
/// accumulation, then the intensity chain on top of the base channels.
pub fn render_scan(
    field: &VoxelField,
    intr: &SensorIntrinsics,
    p0: &Pose,
    p1: &Pose,
    params: &IntensityParams,
    opts: &RenderOptions,
) -> Result<ScanRender, PoseError> {
    let step = opts.step.unwrap_or(field.cell_size * 0.5);
    let poses = if opts.shutter {
        shutter_poses(p0, p1, intr.width, opts.direction)?
    } else {
        vec![*p0; intr.width]
    };
    let mut result = RenderResult::new(intr.width, intr.height);
    for row in 0..intr.height {
        for col in 0..intr.width {
            let (o_local, d_local) = ray_from_pixel(row, col, intr);
            let pose = &poses[col];
            let o = pose.transform_point(o_local);
            let d = pose.transform_direction(d_local);
            let shade = render_ray(field, o, d, step, opts.max_range);
            let idx = row * intr.width + col;
            result.depth[idx] = shade.depth;
            result.intensity_base[idx] = shade.intensity;
            result.reflectivity[idx] = shade.reflectivity;
            result.drop_prob[idx] = shade.drop;
            result.weight[idx] = shade.weight;
            result.transmittance_residual[idx] = shade.residual;
        }
    }
    // geometry image in the sensor frame (shutter off) for normals
    let mut depth_img = RangeImage::new(intr.width, intr.height);
    for idx in 0..result.depth.len() {
        if result.weight[idx] > opts.valid_weight && result.depth[idx] > 0.0 {
            depth_img.depth[idx] = result.depth[idx];
            depth_img.valid[idx] = true;
        }
    }
    let xyz = unproject_image(&depth_img, intr);
    let normals = estimate_normals(&xyz, intr);
    let cos_incidence: Vec<f64> = normals
        .valid
        .iter()
        .zip(&normals.cos_incidence)
        .map(|(v, c)| if *v { *c } else { 1.0 })
        .collect();

    let mut image = RangeImage::new(intr.width, intr.height);
    for row in 0..intr.height {
        for col in 0..intr.width {
            let idx = row * intr.width + col;
            if !depth_img.valid[idx] {
                continue;
            }
            let i_star = shade_intensity(
                result.intensity_base[idx],
                result.depth[idx],
                cos_incidence[idx],
                result.reflectivity[idx],
                row,
                params,
                opts,
            );
            image.set(row, col, result.depth[idx], i_star.clamp(0.0, 1.0));
        }
    }
    Ok(ScanRender { image, result, cos_incidence, normals })
}

/// Intensity chain with individual factors switchable for resimulation.
pub fn shade_intensity(
    base: f64,
    depth: f64,
    cos: f64,
    r_hat: f64,
    ring: usize,
    params: &IntensityParams,
    opts: &RenderOptions,
) -> f64 {
    let mut p = params.clone();
    if !opts.apply_distance {
        p.distance = crate::sensor::DistanceParams::identity();
    }
    if !opts.apply_laser {
        for l in &mut p.laser_powers {
            *l = 1.0;
        }
    }
    let cos = if opts.apply_incidence { cos } else { 1.0 };
    let r = if opts.apply_incidence { r_hat } else { 0.0 };
    apply_model_eval(base, depth, cos, r, ring, &p).value
}

pub struct CameraRender {
    pub result: RenderResult,
    /// Intensity after distance and incidence factors (unit laser power).
    pub final_intensity: Vec<f64>,
}

/// One ray per camera pixel through `((u - cx)/fx, (v - cy)/fy, 1)`;
/// rolling shutter does not apply. Incidence cosines come from
/// screen-space normals of the rendered depth.
pub fn render_camera(
    field: &VoxelField,
    pin: &Pinhole,
    pose: &Pose,
    params: &IntensityParams,
    opts: &RenderOptions,
) -> CameraRender {
    let step = opts.step.unwrap_or(field.cell_size * 0.5);
    let mut result = RenderResult::new(pin.width, pin.height);
    let mut dirs = vec![Vec3::ZERO; pin.width * pin.height];
    for v in 0..pin.height {
        for u in 0..pin.width {
            let cam = Vec3::new(
                (u as f64 + 0.5 - pin.cx) / pin.fx,
                (v as f64 + 0.5 - pin.cy) / pin.fy,
                1.0,
            )
            .normalized();
            let d = pose.transform_direction(cam);
            let o = pose.translation;
            let shade = render_ray(field, o, d, step, opts.max_range);
            let idx = v * pin.width + u;
            dirs[idx] = d;
            result.depth[idx] = shade.depth;
            result.intensity_base[idx] = shade.intensity;
            result.reflectivity[idx] = shade.reflectivity;
            result.drop_prob[idx] = shade.drop;
            result.weight[idx] = shade.weight;
            result.transmittance_residual[idx] = shade.residual;
        }
    }
    let cos = camera_incidence(&result, pose, &dirs);
    let mut final_intensity = vec![0.0; pin.width * pin.height];
    for idx in 0..final_intensity.len() {
        if result.weight[idx] <= opts.valid_weight {
            continue;
        }
        let mut p = params.clone();
        if !opts.apply_distance {
            p.distance = crate::sensor::DistanceParams::identity();
        }
        p.laser_powers = vec![1.0; 1];
        let c = if opts.apply_incidence { cos[idx] } else { 1.0 };
        let r = if opts.apply_incidence { result.reflectivity[idx] } else { 0.0 };
        final_intensity[idx] =
            apply_model_eval(result.intensity_base[idx], result.depth[idx], c, r, 0, &p)
                .value
                .clamp(0.0, 1.0);
    }
    CameraRender { result, final_intensity }
}

/// Screen-space incidence cosines from central differences of the world
/// positions (1 where there is no neighbor support).
fn camera_incidence(result: &RenderResult, pose: &Pose, dirs: &[Vec3]) -> Vec<f64> {
    let (w, h) = (result.width, result.height);
    let pos = |idx: usize| pose.translation + dirs[idx] * result.depth[idx];
    let mut cos = vec![1.0; w * h];
    for v in 1..h.saturating_sub(1) {
        for u in 1..w.saturating_sub(1) {
            let idx = v * w + u;
            let neighbors = [idx - 1, idx + 1, idx - w, idx + w];
            if result.depth[idx] <= 0.0 || neighbors.iter().any(|n| result.depth[*n] <= 0.0) {
                continue;
            }
            let du = pos(idx + 1) - pos(idx - 1);
            let dv = pos(idx + w) - pos(idx - w);
            let n = du.cross(dv).normalized();
            if n.norm() < 0.5 {
                continue;
            }
            cos[idx] = n.dot(dirs[idx]).abs().clamp(0.0, 1.0);
        }
    }
    cos
}
