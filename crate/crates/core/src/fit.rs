//! Joint fitting of field contents, intensity-chain parameters and pose
//! offsets against observed scans, plus the finite-difference gradient
//! audit over every differentiable pipeline segment.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::calib::point_residuals;
use crate::field::{
    render_ray, render_ray_backward, FieldGrads, RayAdjoint, RayInputGrad, VoxelField,
};
use crate::geometry::{ray_from_pixel, unproject_image, SensorIntrinsics};
use crate::image::RangeImage;
#[cfg(not(feature = "std"))]
use crate::math::FloatMath;
use crate::math::{logit, sigmoid, softplus, softplus_inv, Quat, SplitMix64, Vec3};
use crate::normals::estimate_normals;
use crate::optim::{Adam, OptimizerConfig};
use crate::pose::{shutter_poses, Pose, PoseError, ScanDirection};
use crate::sensor::{
    apply_model_eval, loss_laser, median_reflectivity, loss_total, DistanceGrad, IntensityParams,
    LossTerms, LossWeights, MaskSet,
};

#[derive(Debug)]
pub enum FitError {
    NoObservations,
    NoFreeParameters,
    /// Observation image size differs from the intrinsics.
    SizeMismatch,
    Pose(PoseError),
    /// Loss went non-finite; carries the last finite state.
    NonFinite(Box<FitResult>),
}

impl core::fmt::Display for FitError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            FitError::NoObservations => write!(f, "no observations"),
            FitError::NoFreeParameters => write!(f, "no free parameters"),
            FitError::SizeMismatch => write!(f, "observation size does not match intrinsics"),
            FitError::Pose(e) => write!(f, "{e}"),
            FitError::NonFinite(_) => write!(f, "non-finite loss"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for FitError {}

impl From<PoseError> for FitError {
    fn from(e: PoseError) -> Self {
        FitError::Pose(e)
    }
}

/// One observed scan with its bracketing poses.
#[derive(Clone, Debug)]
pub struct Observation {
    pub image: RangeImage,
    pub p0: Pose,
    pub p1: Pose,
}

/// Which parameter groups the optimizer may move.
#[derive(Clone, Copy, Debug, Default)]
pub struct FreeParams {
    pub field: bool,
    pub distance: bool,
    pub laser: bool,
    pub incidence: bool,
    pub pose_offsets: bool,
}

impl FreeParams {
    pub fn any(&self) -> bool {
        self.field || self.distance || self.laser || self.incidence || self.pose_offsets
    }
}

/// Small-angle rotation vectors and translations correcting each frame's
/// given poses (applied on the left).
#[derive(Clone, Debug, PartialEq)]
pub struct PoseOffsets {
    pub rotation: Vec<Vec3>,
    pub translation: Vec<Vec3>,
}

impl PoseOffsets {
    pub fn identity(frames: usize) -> Self {
        PoseOffsets { rotation: vec![Vec3::ZERO; frames], translation: vec![Vec3::ZERO; frames] }
    }

    pub fn pose(&self, frame: usize) -> Pose {
        Pose::new(Quat::from_rotation_vector(self.rotation[frame]), self.translation[frame])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr_field: f64,
    pub lr_sensor: f64,
    pub lr_pose: f64,
    /// Multiplied onto every learning rate each iteration.
    pub lr_decay: f64,
    pub weights: LossWeights,
    pub shutter: bool,
    pub direction: ScanDirection,
    /// Sample spacing; defaults to half a cell.
    pub step: Option<f64>,
    pub max_range: f64,
    /// Accumulation weight above which a rendered pixel counts as a return.
    pub valid_weight: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 500,
            lr_field: 1e-2,
            lr_sensor: 1e-3,
            lr_pose: 1e-2,
            lr_decay: 1.0,
            weights: LossWeights::default(),
            shutter: true,
            direction: ScanDirection::Forward,
            step: None,
            max_range: 120.0,
            valid_weight: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub field: VoxelField,
    pub params: IntensityParams,
    pub offsets: PoseOffsets,
    /// Best loss seen up to each iteration; non-increasing.
    pub history: Vec<f64>,
    pub final_terms: LossTerms,
}

const RAW_EPS: f64 = 1e-6;
const BCE_EPS: f64 = 1e-4;

/// Rotation of `v` by the rotation vector `omega` plus the Jacobian
/// `d(R(omega) v)/d omega`, columns indexed by the omega component.
pub fn rotate_with_jacobian(omega: Vec3, v: Vec3) -> (Vec3, [Vec3; 3]) {
    let q = Quat::from_rotation_vector(omega);
    let rv = q.rotate(v);
    let theta_sq = omega.dot(omega);
    let theta = theta_sq.sqrt();
    // right Jacobian coefficients with small-angle fallbacks
    let (c1, c2) = if theta < 1e-4 {
        (0.5 - theta_sq / 24.0, 1.0 / 6.0 - theta_sq / 120.0)
    } else {
        ((1.0 - theta.cos()) / theta_sq, (theta - theta.sin()) / (theta_sq * theta))
    };
    // Jr = I - c1 [omega]x + c2 [omega]x^2, applied columnwise
    let jr_col = |e: Vec3| e - omega.cross(e) * c1 + omega.cross(omega.cross(e)) * c2;
    // d(Rv)/d omega = -R [v]x Jr
    let mut cols = [Vec3::ZERO; 3];
    for (k, col) in cols.iter_mut().enumerate() {
        let e = match k {
            0 => Vec3::new(1.0, 0.0, 0.0),
            1 => Vec3::new(0.0, 1.0, 0.0),
            _ => Vec3::new(0.0, 0.0, 1.0),
        };
        let jc = jr_col(e);
        *col = -q.rotate(v.cross(jc));
    }
    (rv, cols)
}

struct FrameRender {
    depth: Vec<f64>,
    base: Vec<f64>,
    refl: Vec<f64>,
    drop: Vec<f64>,
    weight: Vec<f64>,
    cos: Vec<f64>,
    /// World rays and their pre-offset counterparts, kept only when the
    /// backward pass needs them.
    rays: Option<Vec<(Vec3, Vec3, Vec3, Vec3)>>,
}

fn render_frame(
    field: &VoxelField,
    intr: &SensorIntrinsics,
    obs: &Observation,
    dp: &Pose,
    cfg: &FitConfig,
    keep_rays: bool,
) -> Result<FrameRender, PoseError> {
    let step = cfg.step.unwrap_or(field.cell_size * 0.5);
    let poses = if cfg.shutter {
        shutter_poses(&obs.p0, &obs.p1, intr.width, cfg.direction)?
    } else {
        vec![obs.p0; intr.width]
    };
    let n = intr.width * intr.height;
    let mut fr = FrameRender {
        depth: vec![0.0; n],
        base: vec![0.0; n],
        refl: vec![0.0; n],
        drop: vec![0.0; n],
        weight: vec![0.0; n],
        cos: vec![1.0; n],
        rays: keep_rays.then(|| vec![(Vec3::ZERO, Vec3::ZERO, Vec3::ZERO, Vec3::ZERO); n]),
    };
    for row in 0..intr.height {
        for col in 0..intr.width {
            let idx = row * intr.width + col;
            let (o_l, d_l) = ray_from_pixel(row, col, intr);
            let a = poses[col].transform_point(o_l);
            let b = poses[col].transform_direction(d_l);
            let o = dp.transform_point(a);
            let d = dp.transform_direction(b);
            if let Some(rays) = &mut fr.rays {
                rays[idx] = (o, d, a, b);
            }
            let s = render_ray(field, o, d, step, cfg.max_range);
            fr.depth[idx] = s.depth;
            fr.base[idx] = s.intensity;
            fr.refl[idx] = s.reflectivity;
            fr.drop[idx] = s.drop;
            fr.weight[idx] = s.weight;
        }
    }
    // incidence cosines from the rendered geometry (sensor frame); the
    // fit treats them as constants of the iteration
    let mut depth_img = RangeImage::new(intr.width, intr.height);
    for idx in 0..n {
        if fr.weight[idx] > cfg.valid_weight && fr.depth[idx] > 0.0 {
            depth_img.depth[idx] = fr.depth[idx];
            depth_img.valid[idx] = true;
        }
    }
    let normals = estimate_normals(&unproject_image(&depth_img, intr), intr);
    for idx in 0..n {
        if normals.valid[idx] {
            fr.cos[idx] = normals.cos_incidence[idx];
        }
    }
    Ok(fr)
}

#[derive(Default)]
struct SensorGrads {
    distance: DistanceGrad,
    laser: Vec<f64>,
    a: f64,
    b: f64,
}

fn bce(p: f64, y: f64) -> (f64, f64) {
    // log arguments floored so saturated renders stay finite (gradient
    // bounded by 1 / BCE_EPS); an exact match still yields exactly zero
    let p_lo = p.max(BCE_EPS);
    let p_hi = (1.0 - p).max(BCE_EPS);
    let loss = -(y * p_lo.ln() + (1.0 - y) * p_hi.ln());
    let grad = -y / p_lo + (1.0 - y) / p_hi;
    (loss, grad)
}

struct FrameLoss {
    terms: LossTerms,
    adjoints: Vec<RayAdjoint>,
}

/// Loss terms of one frame plus the per-pixel adjoints on the rendered
/// channels; sensor-parameter gradients accumulate into `sg`.
#[allow(clippy::too_many_arguments)]
fn frame_loss(
    fr: &FrameRender,
    obs: &Observation,
    intr: &SensorIntrinsics,
    params: &IntensityParams,
    masks: &MaskSet,
    weights: &LossWeights,
    frames_total: f64,
    sg: Option<&mut SensorGrads>,
) -> FrameLoss {
    let n = intr.width * intr.height;
    let cos_min = masks.incidence_threshold.cos();
    // selection pass
    let mut n_depth = 0usize;
    let mut n_mask = 0usize;
    let mut n_int = 0usize;
    let mut refl_valid = vec![false; n];
    for idx in 0..n {
        if masks.drop_mask[idx] {
            continue;
        }
        n_mask += 1;
        if !obs.image.valid[idx] {
            continue;
        }
        n_depth += 1;
        refl_valid[idx] = true;
        if !masks.intensity_mask[idx] && fr.cos[idx] >= cos_min {
            n_int += 1;
        }
    }
    let median = median_reflectivity(&fr.refl, &refl_valid);
    let mut terms = LossTerms::default();
    let mut adjoints = vec![RayAdjoint::default(); n];
    let mut sg = sg;
    for row in 0..intr.height {
        for col in 0..intr.width {
            let idx = row * intr.width + col;
            if masks.drop_mask[idx] {
                continue;
            }
            let gt_valid = obs.image.valid[idx];
            // drop channel: predicts the probability of no return
            if n_mask > 0 {
                let y = if gt_valid { 0.0 } else { 1.0 };
                let (l, g) = bce(fr.drop[idx], y);
                terms.mask += l / n_mask as f64;
                adjoints[idx].drop += weights.gamma * g / (n_mask as f64 * frames_total);
            }
            if !gt_valid {
                continue;
            }
            if n_depth > 0 {
                let res = fr.depth[idx] - obs.image.depth[idx];
                terms.depth += res * res / n_depth as f64;
                adjoints[idx].depth += weights.alpha * 2.0 * res / (n_depth as f64 * frames_total);
            }
            if n_int > 0 && !masks.intensity_mask[idx] && fr.cos[idx] >= cos_min {
                let eval =
                    apply_model_eval(fr.base[idx], fr.depth[idx], fr.cos[idx], fr.refl[idx], row, params);
                let res = eval.value - obs.image.intensity[idx];
                terms.intensity += res * res / n_int as f64;
                let scale = weights.beta * 2.0 * res / (n_int as f64 * frames_total);
                adjoints[idx].intensity += scale * eval.d_base;
                adjoints[idx].reflectivity += scale * eval.d_r_hat;
                if let Some(sg) = sg.as_deref_mut() {
                    let g = &eval.distance_grad;
                    sg.distance.s += scale * g.s;
                    sg.distance.q += scale * g.q;
                    sg.distance.d_near += scale * g.d_near;
                    sg.distance.s_eta += scale * g.s_eta;
                    sg.distance.q_eta += scale * g.q_eta;
                    sg.distance.k_steep += scale * g.k_steep;
                    sg.distance.lens_delta += scale * g.lens_delta;
                    sg.laser[row] += scale * eval.d_laser;
                    sg.a += scale * eval.d_a;
                    sg.b += scale * eval.d_b;
                }
            }
        }
    }
    if let Some((mi, m)) = median {
        let short = params.reflect_target - m;
        if short > 0.0 {
            terms.reflectivity = short;
            adjoints[mi].reflectivity -= weights.r / frames_total;
        }
    }
    FrameLoss { terms, adjoints }
}

// --- parameter packing -------------------------------------------------

const SENSOR_HEAD: usize = 7;

fn pack_sensor(p: &IntensityParams) -> Vec<f64> {
    let mut v = Vec::with_capacity(SENSOR_HEAD + p.laser_powers.len() + 2);
    let d = &p.distance;
    for x in [d.s, d.q, d.d_near, d.s_eta, d.q_eta, d.k_steep] {
        v.push(x.max(RAW_EPS).ln());
    }
    v.push(d.lens_delta);
    for l in &p.laser_powers {
        v.push(l.max(RAW_EPS).ln());
    }
    v.push(p.incidence_a.max(RAW_EPS).ln());
    v.push(p.incidence_b.max(RAW_EPS).ln());
    v
}

fn unpack_sensor(raw: &[f64], template: &IntensityParams) -> IntensityParams {
    let mut p = template.clone();
    p.distance.s = raw[0].exp();
    p.distance.q = raw[1].exp();
    p.distance.d_near = raw[2].exp();
    p.distance.s_eta = raw[3].exp();
    p.distance.q_eta = raw[4].exp();
    p.distance.k_steep = raw[5].exp();
    p.distance.lens_delta = raw[6];
    let h = p.laser_powers.len();
    for (i, l) in p.laser_powers.iter_mut().enumerate() {
        *l = raw[SENSOR_HEAD + i].exp();
    }
    p.incidence_a = raw[SENSOR_HEAD + h].exp();
    p.incidence_b = raw[SENSOR_HEAD + h + 1].exp();
    p
}

fn sensor_grad_to_raw(sg: &SensorGrads, laser_grad: &[f64], raw: &[f64], out: &mut [f64]) {
    // log-space chain rule: dL/d ln x = x dL/dx
    let d = [
        sg.distance.s,
        sg.distance.q,
        sg.distance.d_near,
        sg.distance.s_eta,
        sg.distance.q_eta,
        sg.distance.k_steep,
    ];
    for (i, g) in d.iter().enumerate() {
        out[i] = g * raw[i].exp();
    }
    out[6] = sg.distance.lens_delta;
    let h = sg.laser.len();
    for i in 0..h {
        out[SENSOR_HEAD + i] = (sg.laser[i] + laser_grad[i]) * raw[SENSOR_HEAD + i].exp();
    }
    out[SENSOR_HEAD + h] = sg.a * raw[SENSOR_HEAD + h].exp();
    out[SENSOR_HEAD + h + 1] = sg.b * raw[SENSOR_HEAD + h + 1].exp();
}

fn pack_field(f: &VoxelField) -> Vec<f64> {
    let n = f.cell_count();
    let mut v = Vec::with_capacity(4 * n);
    for s in &f.density {
        v.push(softplus_inv(s.max(RAW_EPS)));
    }
    for ch in [&f.intensity, &f.reflectivity, &f.drop] {
        for x in ch.iter() {
            v.push(logit(x.clamp(RAW_EPS, 1.0 - RAW_EPS)));
        }
    }
    v
}

fn unpack_field(raw: &[f64], template: &VoxelField) -> VoxelField {
    let n = template.cell_count();
    let mut f = template.clone();
    for (i, s) in f.density.iter_mut().enumerate() {
        *s = softplus(raw[i]);
    }
    for (k, ch) in [&mut f.intensity, &mut f.reflectivity, &mut f.drop].into_iter().enumerate() {
        for (i, x) in ch.iter_mut().enumerate() {
            *x = sigmoid(raw[(k + 1) * n + i]);
        }
    }
    f
}

fn field_grad_to_raw(g: &FieldGrads, raw: &[f64], out: &mut [f64]) {
    let n = g.density.len();
    for i in 0..n {
        out[i] = g.density[i] * sigmoid(raw[i]);
    }
    for (k, ch) in [&g.intensity, &g.reflectivity, &g.drop].into_iter().enumerate() {
        for i in 0..n {
            let s = sigmoid(raw[(k + 1) * n + i]);
            out[(k + 1) * n + i] = ch[i] * s * (1.0 - s);
        }
    }
}

/// Minimizes the combined loss over the selected parameter groups with
/// adaptive-moment descent and best-iterate reporting. Gradients are
/// analytic through rendering, the intensity chain and the pose offsets;
/// the incidence cosines, the chain's distance input and the median pixel
/// choice are treated as constants of each iteration.
pub fn fit(
    observations: &[Observation],
    intr: &SensorIntrinsics,
    init_field: &VoxelField,
    init_params: &IntensityParams,
    masks: &MaskSet,
    init_offsets: Option<&PoseOffsets>,
    free: &FreeParams,
    cfg: &FitConfig,
) -> Result<FitResult, FitError> {
    if observations.is_empty() {
        return Err(FitError::NoObservations);
    }
    if !free.any() {
        return Err(FitError::NoFreeParameters);
    }
    let n_px = intr.width * intr.height;
    if observations.iter().any(|o| o.image.width != intr.width || o.image.height != intr.height)
        || masks.drop_mask.len() != n_px
        || init_params.laser_powers.len() != intr.height
    {
        return Err(FitError::SizeMismatch);
    }
    let n_frames = observations.len();
    let mut offsets = match init_offsets {
        Some(o) => o.clone(),
        None => PoseOffsets::identity(n_frames),
    };

    let mut field_raw = pack_field(init_field);
    let mut sensor_raw = pack_sensor(init_params);
    let sensor_mask: Vec<bool> = {
        let h = intr.height;
        let mut m = vec![false; sensor_raw.len()];
        for b in &mut m[..SENSOR_HEAD] {
            *b = free.distance;
        }
        for b in &mut m[SENSOR_HEAD..SENSOR_HEAD + h] {
            *b = free.laser;
        }
        m[SENSOR_HEAD + h] = free.incidence;
        m[SENSOR_HEAD + h + 1] = free.incidence;
        m
    };

    let opt_for = |lr: f64, dim: usize| {
        Adam::new(
            dim,
            &OptimizerConfig {
                learning_rate: lr,
                lr_decay: cfg.lr_decay,
                ..OptimizerConfig::default()
            },
        )
    };
    let mut adam_field = free.field.then(|| opt_for(cfg.lr_field, field_raw.len()));
    let sensor_free = free.distance || free.laser || free.incidence;
    let mut adam_sensor = sensor_free.then(|| opt_for(cfg.lr_sensor, sensor_raw.len()));
    let mut adam_pose = free.pose_offsets.then(|| opt_for(cfg.lr_pose, 6 * n_frames));

    let fast = !free.field && !free.pose_offsets;
    let mut cached: Vec<FrameRender> = Vec::new();
    let mut field = unpack_field(&field_raw, init_field);
    if fast {
        for (f, obs) in observations.iter().enumerate() {
            cached.push(render_frame(&field, intr, obs, &offsets.pose(f), cfg, false)?);
        }
    }

    let mut best_loss = f64::INFINITY;
    let mut best_field_raw = field_raw.clone();
    let mut best_sensor_raw = sensor_raw.clone();
    let mut best_offsets = offsets.clone();
    let mut best_terms = LossTerms::default();
    let mut history = Vec::with_capacity(cfg.iterations);
    let step = cfg.step.unwrap_or(init_field.cell_size * 0.5);

    for _iter in 0..cfg.iterations.max(1) {
        let params = unpack_sensor(&sensor_raw, init_params);
        let mut sg = SensorGrads { laser: vec![0.0; intr.height], ..SensorGrads::default() };
        // scratch even when the field is frozen: the backward pass also
        // produces the ray input gradients for the pose offsets
        let mut field_grads = (!fast).then(|| FieldGrads::zeros(&field));
        let mut pose_grads = vec![[0.0f64; 6]; n_frames];
        let mut terms = LossTerms::default();
        let ft = n_frames as f64;
        for (fidx, obs) in observations.iter().enumerate() {
            let scratch;
            let fr = if fast {
                &cached[fidx]
            } else {
                scratch = render_frame(&field, intr, obs, &offsets.pose(fidx), cfg, true)?;
                &scratch
            };
            let fl = frame_loss(
                fr,
                obs,
                intr,
                &params,
                masks,
                &cfg.weights,
                ft,
                sensor_free.then_some(&mut sg),
            );
            terms.depth += fl.terms.depth / ft;
            terms.intensity += fl.terms.intensity / ft;
            terms.mask += fl.terms.mask / ft;
            terms.reflectivity += fl.terms.reflectivity / ft;
            if !fast {
                let rays = fr.rays.as_ref().expect("rays kept in full mode");
                for idx in 0..n_px {
                    let adj = fl.adjoints[idx];
                    if adj.is_zero() {
                        continue;
                    }
                    let (o, d, a, b) = rays[idx];
                    let mut ig = RayInputGrad::default();
                    let grads = field_grads.as_mut().expect("allocated in full mode");
                    render_ray_backward(
                        &field,
                        o,
                        d,
                        step,
                        cfg.max_range,
                        &adj,
                        grads,
                        free.pose_offsets.then_some(&mut ig),
                    );
                    if free.pose_offsets {
                        let (_, jo) = rotate_with_jacobian(offsets.rotation[fidx], a);
                        let (_, jd) = rotate_with_jacobian(offsets.rotation[fidx], b);
                        let g = &mut pose_grads[fidx];
                        for k in 0..3 {
                            g[k] += jo[k].dot(ig.origin) + jd[k].dot(ig.direction);
                        }
                        g[3] += ig.origin.x;
                        g[4] += ig.origin.y;
                        g[5] += ig.origin.z;
                    }
                }
            }
        }
        terms.laser = loss_laser(&params.laser_powers);
        let loss = loss_total(&terms, &cfg.weights);
        if !loss.is_finite() {
            let last = FitResult {
                field: unpack_field(&best_field_raw, init_field),
                params: unpack_sensor(&best_sensor_raw, init_params),
                offsets: best_offsets,
                history,
                final_terms: best_terms,
            };
            return Err(FitError::NonFinite(Box::new(last)));
        }
        if loss < best_loss {
            best_loss = loss;
            best_field_raw.copy_from_slice(&field_raw);
            best_sensor_raw.copy_from_slice(&sensor_raw);
            best_offsets = offsets.clone();
            best_terms = terms;
        }
        history.push(best_loss);

        if let Some(adam) = adam_sensor.as_mut() {
            let h = intr.height;
            let mut laser_grad = vec![0.0; h];
            for (i, l) in params.laser_powers.iter().enumerate() {
                if *l > 1.0 {
                    laser_grad[i] = cfg.weights.l / h as f64;
                }
            }
            let mut raw_grad = vec![0.0; sensor_raw.len()];
            sensor_grad_to_raw(&sg, &laser_grad, &sensor_raw, &mut raw_grad);
            for (g, m) in raw_grad.iter_mut().zip(&sensor_mask) {
                if !*m {
                    *g = 0.0;
                }
            }
            adam.step(&mut sensor_raw, &raw_grad);
        }
        if let (Some(adam), Some(fg)) = (adam_field.as_mut(), field_grads.as_ref().filter(|_| free.field)) {
            let mut raw_grad = vec![0.0; field_raw.len()];
            field_grad_to_raw(fg, &field_raw, &mut raw_grad);
            adam.step(&mut field_raw, &raw_grad);
            field = unpack_field(&field_raw, init_field);
        }
        if let Some(adam) = adam_pose.as_mut() {
            let mut flat = vec![0.0; 6 * n_frames];
            let mut grad = vec![0.0; 6 * n_frames];
            for f in 0..n_frames {
                let r = offsets.rotation[f];
                let t = offsets.translation[f];
                flat[6 * f..6 * f + 6].copy_from_slice(&[r.x, r.y, r.z, t.x, t.y, t.z]);
                grad[6 * f..6 * f + 6].copy_from_slice(&pose_grads[f]);
            }
            adam.step(&mut flat, &grad);
            for f in 0..n_frames {
                offsets.rotation[f] = Vec3::new(flat[6 * f], flat[6 * f + 1], flat[6 * f + 2]);
                offsets.translation[f] =
                    Vec3::new(flat[6 * f + 3], flat[6 * f + 4], flat[6 * f + 5]);
            }
        }
    }
    Ok(FitResult {
        field: unpack_field(&best_field_raw, init_field),
        params: unpack_sensor(&best_sensor_raw, init_params),
        offsets: best_offsets,
        history,
        final_terms: best_terms,
    })
}

// --- gradient audit ----------------------------------------------------

/// Differentiable pipeline segment checked by [`grad_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    /// `render_ray` with respect to per-cell density and channel values.
    RenderRay,
    /// Distance falloff `N_d` with respect to its parameters.
    NDistance,
    /// Incidence factor `N_R` with respect to `a`, `b`, inputs.
    NIncidence,
    /// Full chain `apply_model` with respect to every parameter.
    ApplyModel,
    /// Calibration residual channels with respect to the intrinsics.
    Reprojection,
    /// Fully masked loss: both gradients identically zero.
    MaskedZero,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

fn rel_err(analytic: f64, numeric: f64) -> Option<f64> {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-7 {
        return None; // both negligible
    }
    Some((analytic - numeric).abs() / denom)
}

fn record(report: &mut GradReport, analytic: f64, numeric: f64) {
    report.checked += 1;
    if let Some(e) = rel_err(analytic, numeric) {
        if e > report.max_rel_err {
            report.max_rel_err = e;
        }
    }
}

/// Compares analytic gradients of the selected segment against central
/// finite differences at `count` random evaluation points.
pub fn grad_check(target: GradTarget, count: usize, h: f64, seed: u64) -> GradReport {
    use crate::sensor::{n_distance, n_distance_eval, n_incidence, n_incidence_eval, DistanceParams};
    let mut rng = SplitMix64::new(seed);
    let mut report = GradReport::default();
    match target {
        GradTarget::NDistance => {
            while report.checked < count {
                let p = DistanceParams {
                    s: rng.uniform(0.02, 0.3),
                    q: rng.uniform(0.6, 3.0),
                    d_near: rng.uniform(0.5, 5.0),
                    s_eta: rng.uniform(0.1, 1.0),
                    q_eta: rng.uniform(0.6, 3.0),
                    k_steep: rng.uniform(0.5, 3.0),
                    ..DistanceParams::default()
                };
                let d = rng.uniform(0.3, 40.0);
                let eval = n_distance_eval(d, &p);
                if eval.clamped || eval.value < 1e-3 {
                    continue;
                }
                let fd = (n_distance(d + h, &p) - n_distance(d - h, &p)) / (2.0 * h);
                record(&mut report, eval.d_dist, fd);
                let fields: [(&dyn Fn(&mut DistanceParams) -> &mut f64, f64); 6] = [
                    (&|p| &mut p.s, eval.grad.s),
                    (&|p| &mut p.q, eval.grad.q),
                    (&|p| &mut p.d_near, eval.grad.d_near),
                    (&|p| &mut p.s_eta, eval.grad.s_eta),
                    (&|p| &mut p.q_eta, eval.grad.q_eta),
                    (&|p| &mut p.k_steep, eval.grad.k_steep),
                ];
                for (get, an) in fields {
                    let mut up = p;
                    *get(&mut up) += h;
                    let mut dn = p;
                    *get(&mut dn) -= h;
                    record(&mut report, an, (n_distance(d, &up) - n_distance(d, &dn)) / (2.0 * h));
                }
            }
        }
        GradTarget::NIncidence => {
            while report.checked < count {
                let mut p = IntensityParams::identity(1);
                p.incidence_a = rng.uniform(1.0, 10.0);
                p.incidence_b = rng.uniform(0.5, 3.0);
                p.reflect_scale = rng.uniform(0.5, 2.0);
                let cos = rng.uniform(0.2, 0.95);
                let r = rng.uniform(0.1, 0.9);
                let eval = n_incidence_eval(cos, r, &p);
                let fd_cos = (n_incidence(cos + h, r, &p) - n_incidence(cos - h, r, &p)) / (2.0 * h);
                record(&mut report, eval.d_cos, fd_cos);
                let fd_r = (n_incidence(cos, r + h, &p) - n_incidence(cos, r - h, &p)) / (2.0 * h);
                record(&mut report, eval.d_r_hat, fd_r);
                let mut up = p.clone();
                up.incidence_a += h;
                let mut dn = p.clone();
                dn.incidence_a -= h;
                record(
                    &mut report,
                    eval.d_a,
                    (n_incidence(cos, r, &up) - n_incidence(cos, r, &dn)) / (2.0 * h),
                );
                let mut up = p.clone();
                up.incidence_b += h;
                let mut dn = p.clone();
                dn.incidence_b -= h;
                record(
                    &mut report,
                    eval.d_b,
                    (n_incidence(cos, r, &up) - n_incidence(cos, r, &dn)) / (2.0 * h),
                );
            }
        }
        GradTarget::ApplyModel => {
            while report.checked < count {
                let mut p = IntensityParams::identity(4);
                p.distance = DistanceParams {
                    s: rng.uniform(0.02, 0.2),
                    q: rng.uniform(0.8, 2.5),
                    d_near: rng.uniform(0.5, 4.0),
                    s_eta: rng.uniform(0.1, 0.8),
                    q_eta: rng.uniform(0.8, 2.5),
                    k_steep: rng.uniform(0.5, 2.0),
                    ..DistanceParams::default()
                };
                p.incidence_a = rng.uniform(2.0, 8.0);
                p.incidence_b = rng.uniform(0.8, 2.0);
                for l in &mut p.laser_powers {
                    *l = rng.uniform(0.7, 1.3);
                }
                let base = rng.uniform(0.2, 0.9);
                let d = rng.uniform(1.0, 25.0);
                let cos = rng.uniform(0.3, 0.95);
                let r = rng.uniform(0.1, 0.8);
                let ring = (rng.next_u64() % 4) as usize;
                let eval = apply_model_eval(base, d, cos, r, ring, &p);
                if n_distance_eval(d, &p.distance).clamped || eval.value < 1e-3 {
                    continue;
                }
                let f = |p: &IntensityParams, base: f64, d: f64, cos: f64, r: f64| {
                    crate::sensor::apply_model(base, d, cos, r, ring, p)
                };
                record(&mut report, eval.d_base, (f(&p, base + h, d, cos, r) - f(&p, base - h, d, cos, r)) / (2.0 * h));
                record(&mut report, eval.d_dist, (f(&p, base, d + h, cos, r) - f(&p, base, d - h, cos, r)) / (2.0 * h));
                record(&mut report, eval.d_cos, (f(&p, base, d, cos + h, r) - f(&p, base, d, cos - h, r)) / (2.0 * h));
                record(&mut report, eval.d_r_hat, (f(&p, base, d, cos, r + h) - f(&p, base, d, cos, r - h)) / (2.0 * h));
                let mut up = p.clone();
                up.laser_powers[ring] += h;
                let mut dn = p.clone();
                dn.laser_powers[ring] -= h;
                record(&mut report, eval.d_laser, (f(&up, base, d, cos, r) - f(&dn, base, d, cos, r)) / (2.0 * h));
                let param_cases: [(&dyn Fn(&mut IntensityParams) -> &mut f64, f64); 8] = [
                    (&|p| &mut p.distance.s, eval.distance_grad.s),
                    (&|p| &mut p.distance.q, eval.distance_grad.q),
                    (&|p| &mut p.distance.d_near, eval.distance_grad.d_near),
                    (&|p| &mut p.distance.s_eta, eval.distance_grad.s_eta),
                    (&|p| &mut p.distance.q_eta, eval.distance_grad.q_eta),
                    (&|p| &mut p.distance.k_steep, eval.distance_grad.k_steep),
                    (&|p| &mut p.incidence_a, eval.d_a),
                    (&|p| &mut p.incidence_b, eval.d_b),
                ];
                for (get, an) in param_cases {
                    let mut up = p.clone();
                    *get(&mut up) += h;
                    let mut dn = p.clone();
                    *get(&mut dn) -= h;
                    record(&mut report, an, (f(&up, base, d, cos, r) - f(&dn, base, d, cos, r)) / (2.0 * h));
                }
            }
        }
        GradTarget::RenderRay => {
            let mut f = VoxelField::new([4, 4, 4], 0.5, Vec3::new(0.5, -1.0, -1.0));
            while report.checked < count {
                for c in 0..f.cell_count() {
                    f.density[c] = rng.uniform(0.1, 2.0);
                    f.intensity[c] = rng.next_f64();
                    f.reflectivity[c] = rng.next_f64();
                    f.drop[c] = rng.next_f64();
                }
                let o = Vec3::new(0.0, rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
                let d = Vec3::new(1.0, rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)).normalized();
                let adj = RayAdjoint {
                    depth: rng.uniform(0.1, 1.0),
                    intensity: rng.uniform(0.1, 1.0),
                    reflectivity: rng.uniform(0.1, 1.0),
                    drop: rng.uniform(0.1, 1.0),
                };
                let step = 0.2;
                let mut grads = FieldGrads::zeros(&f);
                render_ray_backward(&f, o, d, step, 20.0, &adj, &mut grads, None);
                let project = |s: &crate::field::RayShade| {
                    adj.depth * s.depth
                        + adj.intensity * s.intensity
                        + adj.reflectivity * s.reflectivity
                        + adj.drop * s.drop
                };
                for c in (0..f.cell_count()).step_by(9) {
                    let keep = f.density[c];
                    f.density[c] = keep + h;
                    let up = project(&render_ray(&f, o, d, step, 20.0));
                    f.density[c] = keep - h;
                    let dn = project(&render_ray(&f, o, d, step, 20.0));
                    f.density[c] = keep;
                    record(&mut report, grads.density[c], (up - dn) / (2.0 * h));
                    let keep = f.intensity[c];
                    f.intensity[c] = keep + h;
                    let up = project(&render_ray(&f, o, d, step, 20.0));
                    f.intensity[c] = keep - h;
                    let dn = project(&render_ray(&f, o, d, step, 20.0));
                    f.intensity[c] = keep;
                    record(&mut report, grads.intensity[c], (up - dn) / (2.0 * h));
                }
            }
        }
        GradTarget::Reprojection => {
            use crate::geometry::UnitIntrinsics;
            use crate::image::Point;
            let units = vec![
                UnitIntrinsics { fov: 0.12, fov_offset: 0.02, z_offset: 0.1, row_start: 0, row_end: 8 },
                UnitIntrinsics { fov: 0.21, fov_offset: 0.16, z_offset: -0.1, row_start: 8, row_end: 16 },
            ];
            let diode: Vec<f64> = (0..16).map(|i| ((i * 7 % 13) as f64 - 6.0) * 1e-4).collect();
            let intr = SensorIntrinsics::new(64, 16, units, diode).unwrap();
            while report.checked < count {
                let row = (rng.next_u64() % 16) as usize;
                let col = (rng.next_u64() % 64) as usize;
                let (o, dir) = ray_from_pixel(row, col, &intr);
                let dist = rng.uniform(3.0, 30.0);
                let mut p = Point::new(o + dir * dist, 0.5);
                p.ring = Some(row as u32);
                p.col = Some(col as u32);
                p.range = Some(dist * rng.uniform(0.95, 1.05));
                // evaluate at perturbed intrinsics
                let mut at = intr.clone();
                let k = at.unit_of_row(row);
                at.units[k].fov *= 1.0 + rng.uniform(-0.05, 0.05);
                at.units[k].fov_offset += rng.uniform(-3e-3, 3e-3);
                at.units[k].z_offset += rng.uniform(-0.02, 0.02);
                let base = point_residuals(&p, &at).unwrap();
                let cases: [(&dyn Fn(&mut SensorIntrinsics, f64), f64, f64); 4] = [
                    (&|i, e| i.units[k].fov += e, base.row_grad.fov, base.d_grad.fov),
                    (&|i, e| i.units[k].fov_offset += e, base.row_grad.fov_offset, base.d_grad.fov_offset),
                    (&|i, e| i.units[k].z_offset += e, base.row_grad.z_offset, base.d_grad.z_offset),
                    (&|i, e| i.diode_offsets[row] += e, base.row_grad.diode, base.d_grad.diode),
                ];
                for (mutate, an_row, an_d) in cases {
                    let mut up = at.clone();
                    mutate(&mut up, h);
                    let mut dn = at.clone();
                    mutate(&mut dn, -h);
                    let ru = point_residuals(&p, &up).unwrap();
                    let rd = point_residuals(&p, &dn).unwrap();
                    record(&mut report, an_row, (ru.row - rd.row) / (2.0 * h));
                    record(&mut report, an_d, (ru.d.unwrap() - rd.d.unwrap()) / (2.0 * h));
                }
            }
        }
        GradTarget::MaskedZero => {
            // every pixel masked: the loss is constant zero, so both the
            // analytic gradient and any finite difference vanish
            use crate::sensor::loss_intensity;
            let mut masks = MaskSet::empty(4, 4);
            for m in &mut masks.drop_mask {
                *m = true;
            }
            for _ in 0..count {
                let pred: Vec<f64> = (0..16).map(|_| rng.next_f64()).collect();
                let gt: Vec<f64> = (0..16).map(|_| rng.next_f64()).collect();
                let valid = vec![true; 16];
                let (l0, n) = loss_intensity(&pred, &gt, &valid, &masks, None);
                assert_eq!(n, 0);
                let shifted: Vec<f64> = pred.iter().map(|p| p + h).collect();
                let (l1, _) = loss_intensity(&shifted, &gt, &valid, &masks, None);
                record(&mut report, 0.0, (l1 - l0) / h);
            }
        }
    }
    report
}
