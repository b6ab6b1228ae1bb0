//! Intrinsics recovery from raw clouds: ring detection from scan order,
//! per-point reprojection residuals with analytic gradients, and an
//! adaptive-moment descent loop with best-iterate reporting.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::SensorIntrinsics;
use crate::image::{Point, PointCloud};
#[cfg(not(feature = "std"))]
use crate::math::FloatMath;
use crate::math::{wrap_angle, TAU};
use crate::optim::{Adam, OptimizerConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum CalibError {
    EmptyInput,
    /// More azimuth wrap-arounds than the sensor has rows.
    RingOverflow,
    /// A frame is missing ring or column indices.
    UncalibratedFrame,
    BadWeights,
    /// Loss went non-finite; carries the last finite intrinsics.
    Diverged(Box<SensorIntrinsics>),
}

impl core::fmt::Display for CalibError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CalibError::EmptyInput => write!(f, "empty point sequence"),
            CalibError::RingOverflow => write!(f, "ring overflow"),
            CalibError::UncalibratedFrame => write!(f, "uncalibrated frame: run recover_rings"),
            CalibError::BadWeights => write!(f, "channel weights must be non-negative, not all zero"),
            CalibError::Diverged(_) => write!(f, "non-finite loss"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CalibError {}

/// Weights of the (d, I, i, j) residual channels. Intensity defaults to 0
/// because it carries no information about the intrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelWeights {
    pub d: f64,
    pub intensity: f64,
    pub row: f64,
    pub col: f64,
}

impl Default for ChannelWeights {
    fn default() -> Self {
        ChannelWeights { d: 1.0, intensity: 0.0, row: 1.0, col: 1.0 }
    }
}

impl ChannelWeights {
    fn validate(&self) -> Result<(), CalibError> {
        let all = [self.d, self.intensity, self.row, self.col];
        if all.iter().any(|w| !(*w >= 0.0)) || all.iter().all(|w| *w == 0.0) {
            return Err(CalibError::BadWeights);
        }
        Ok(())
    }
}

/// Which parameter classes the optimizer may move.
#[derive(Clone, Copy, Debug)]
pub struct FreeMask {
    pub fov: bool,
    pub fov_offset: bool,
    pub z_offset: bool,
    pub diode: bool,
}

impl FreeMask {
    pub const ALL: FreeMask = FreeMask { fov: true, fov_offset: true, z_offset: true, diode: true };
    pub const NONE: FreeMask =
        FreeMask { fov: false, fov_offset: false, z_offset: false, diode: false };

    pub fn any(&self) -> bool {
        self.fov || self.fov_offset || self.z_offset || self.diode
    }
}

pub struct CalibProblem {
    pub frames: Vec<PointCloud>,
    pub initial: SensorIntrinsics,
    pub free_mask: FreeMask,
    pub loss_weights: ChannelWeights,
}

pub struct CalibReport {
    pub final_intrinsics: SensorIntrinsics,
    /// Best loss seen up to each iteration; non-increasing.
    pub loss_history: Vec<f64>,
    /// Final RMS residual per channel (d, I, i, j).
    pub per_channel_residuals: [f64; 4],
}

/// Assigns ring and column indices to points stored in scan order. The
/// ring increments each time the accumulated azimuth passes a full
/// revolution; the column comes from the azimuth directly.
pub fn recover_rings(raw: &[Point], width: usize, height: usize) -> Result<PointCloud, CalibError> {
    if raw.is_empty() {
        return Err(CalibError::EmptyInput);
    }
    let tol = core::f64::consts::PI / width as f64;
    let mut out = Vec::with_capacity(raw.len());
    let mut prev_phi: Option<f64> = None;
    let mut unwrapped = 0.0f64;
    let mut ring = 0usize;
    for p in raw {
        let phi = p.position.y.atan2(p.position.x);
        if let Some(prev) = prev_phi {
            unwrapped += wrap_angle(phi - prev);
        }
        prev_phi = Some(phi);
        // completed revolutions, robust to jitter at the boundary
        let revs = ((unwrapped.abs() + tol) / TAU) as usize;
        if revs > ring {
            ring = revs;
            if ring >= height {
                return Err(CalibError::RingOverflow);
            }
        }
        let j = ((0.5 - wrap_angle(phi) / TAU) * width as f64).rem_euclid(width as f64);
        let mut q = *p;
        q.ring = Some(ring as u32);
        q.col = Some((j as usize).min(width - 1) as u32);
        out.push(q);
    }
    Ok(PointCloud::new(out))
}

/// Partial derivatives of one residual channel with respect to the owning
/// unit's parameters and the point's diode offset.
#[derive(Clone, Copy, Debug, Default)]
pub struct ParamGrad {
    pub fov: f64,
    pub fov_offset: f64,
    pub z_offset: f64,
    pub diode: f64,
}

/// Residuals of one calibrated point under candidate intrinsics.
#[derive(Clone, Copy, Debug)]
pub struct ResidualEval {
    pub unit: usize,
    pub ring: usize,
    /// Range residual, present when the point stores a measured range.
    pub d: Option<f64>,
    pub d_grad: ParamGrad,
    /// Continuous row residual `i_hat - (ring + 0.5)`.
    pub row: f64,
    pub row_grad: ParamGrad,
    /// Column residual, wrapped into half a revolution; constant in the
    /// intrinsics.
    pub col: f64,
}

/// Evaluates the smooth reprojection residuals of one point. The row
/// channel uses the continuous pre-floor coordinate so it stays
/// differentiable; the column channel carries no parameter gradient.
pub fn point_residuals(p: &Point, intr: &SensorIntrinsics) -> Result<ResidualEval, CalibError> {
    let (Some(ring), Some(col)) = (p.ring, p.col) else {
        return Err(CalibError::UncalibratedFrame);
    };
    let ring = ring as usize;
    let col = col as usize;
    if ring >= intr.height {
        return Err(CalibError::RingOverflow);
    }
    let k = intr.unit_of_row(ring);
    let u = &intr.units[k];
    let h = u.rows() as f64;
    let dz = p.position.z - u.z_offset;
    let rho = (p.position.x * p.position.x + p.position.y * p.position.y).sqrt();
    let r_sq = dz * dz + rho * rho;
    let elevation = dz.atan2(rho);
    let theta = elevation + u.fov_offset + intr.diode_offsets[ring];
    let i_hat = u.row_start as f64 + (1.0 - theta / u.fov) * h;
    let row = i_hat - (ring as f64 + 0.5);
    // d(i_hat)/d(theta) = -h/f; d(elevation)/d(z_k) = -rho / r^2
    let di_dtheta = -h / u.fov;
    let row_grad = ParamGrad {
        fov: h * theta / (u.fov * u.fov),
        fov_offset: di_dtheta,
        z_offset: di_dtheta * (-rho / r_sq),
        diode: di_dtheta,
    };
    let (d, d_grad) = match p.range {
        Some(range) => {
            let d_hat = r_sq.sqrt();
            (
                Some(d_hat - range),
                ParamGrad { z_offset: -dz / d_hat, ..ParamGrad::default() },
            )
        }
        None => (None, ParamGrad::default()),
    };
    let phi = p.position.y.atan2(p.position.x);
    let j_hat = ((0.5 - wrap_angle(phi) / TAU) * intr.width as f64).rem_euclid(intr.width as f64);
    let mut col_res = j_hat - (col as f64 + 0.5);
    let w = intr.width as f64;
    col_res -= w * (col_res / w).round();
    Ok(ResidualEval { unit: k, ring, d, d_grad, row, row_grad, col: col_res })
}

struct LossEval {
    loss: f64,
    /// Layout: per unit (f, f0, z), then per-row diode offsets.
    grad: Vec<f64>,
    channel_sq: [f64; 4],
    channel_n: [usize; 4],
}

fn param_count(intr: &SensorIntrinsics) -> usize {
    intr.units.len() * 3 + intr.height
}

fn pack(intr: &SensorIntrinsics) -> Vec<f64> {
    let mut v = Vec::with_capacity(param_count(intr));
    for u in &intr.units {
        v.push(u.fov);
        v.push(u.fov_offset);
        v.push(u.z_offset);
    }
    v.extend_from_slice(&intr.diode_offsets);
    v
}

fn unpack(params: &[f64], template: &SensorIntrinsics) -> SensorIntrinsics {
    let mut intr = template.clone();
    for (k, u) in intr.units.iter_mut().enumerate() {
        u.fov = params[3 * k].max(1e-4);
        u.fov_offset = params[3 * k + 1];
        u.z_offset = params[3 * k + 2];
    }
    let base = intr.units.len() * 3;
    intr.diode_offsets.copy_from_slice(&params[base..]);
    intr
}

fn eval_loss(
    frames: &[PointCloud],
    intr: &SensorIntrinsics,
    weights: &ChannelWeights,
) -> Result<LossEval, CalibError> {
    let n_params = param_count(intr);
    let base = intr.units.len() * 3;
    let mut grad_d = vec![0.0; n_params];
    let mut grad_row = vec![0.0; n_params];
    let mut channel_sq = [0.0f64; 4];
    let mut channel_n = [0usize; 4];
    for frame in frames {
        for p in &frame.points {
            let r = point_residuals(p, intr)?;
            let k = r.unit;
            if let Some(d) = r.d {
                channel_sq[0] += d * d;
                channel_n[0] += 1;
                let g = 2.0 * d;
                grad_d[3 * k] += g * r.d_grad.fov;
                grad_d[3 * k + 1] += g * r.d_grad.fov_offset;
                grad_d[3 * k + 2] += g * r.d_grad.z_offset;
                grad_d[base + r.ring] += g * r.d_grad.diode;
            }
            // intensity channel: constant under intrinsics-only calibration
            channel_n[1] += 1;
            channel_sq[2] += r.row * r.row;
            channel_n[2] += 1;
            let g = 2.0 * r.row;
            grad_row[3 * k] += g * r.row_grad.fov;
            grad_row[3 * k + 1] += g * r.row_grad.fov_offset;
            grad_row[3 * k + 2] += g * r.row_grad.z_offset;
            grad_row[base + r.ring] += g * r.row_grad.diode;
            channel_sq[3] += r.col * r.col;
            channel_n[3] += 1;
        }
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n_params];
    let weights_arr = [weights.d, weights.intensity, weights.row, weights.col];
    for ch in 0..4 {
        if channel_n[ch] == 0 || weights_arr[ch] == 0.0 {
            continue;
        }
        let n = channel_n[ch] as f64;
        loss += weights_arr[ch] * channel_sq[ch] / n;
        let source = match ch {
            0 => &grad_d,
            2 => &grad_row,
            _ => continue,
        };
        for (gi, s) in grad.iter_mut().zip(source) {
            *gi += weights_arr[ch] * s / n;
        }
    }
    Ok(LossEval { loss, grad, channel_sq, channel_n })
}

fn channel_rms(sq: &[f64; 4], n: &[usize; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for ch in 0..4 {
        if n[ch] > 0 {
            out[ch] = (sq[ch] / n[ch] as f64).sqrt();
        }
    }
    out
}

/// Mean-reduced weighted reprojection loss over all calibrated points.
pub fn reprojection_loss(
    intr: &SensorIntrinsics,
    frames: &[PointCloud],
    weights: &ChannelWeights,
) -> Result<f64, CalibError> {
    weights.validate()?;
    if frames.is_empty() {
        return Err(CalibError::EmptyInput);
    }
    Ok(eval_loss(frames, intr, weights)?.loss)
}

/// Removes the two per-unit directions the loss cannot distinguish: a
/// shared shift between `f0_k` and the mean of the diode corrections,
/// and a linear-in-row diode trend that mimics a FOV change (predictions
/// are preserved by `f += b H_k`, `f0 += b H_k / 2`).
fn fix_gauge(params: &mut [f64], template: &SensorIntrinsics, trend: bool) {
    let base = template.units.len() * 3;
    for (k, u) in template.units.iter().enumerate() {
        let h = u.rows();
        let n = h as f64;
        let slice = base + u.row_start..base + u.row_end;
        let mean: f64 = params[slice.clone()].iter().sum::<f64>() / n;
        for d in &mut params[slice.clone()] {
            *d -= mean;
        }
        params[3 * k + 1] += mean;
        if !trend || h < 2 {
            continue;
        }
        let centered = |r: usize| r as f64 - (n - 1.0) / 2.0;
        let mut num = 0.0;
        let mut den = 0.0;
        for (r, d) in params[slice.clone()].iter().enumerate() {
            let x = centered(r);
            num += x * d;
            den += x * x;
        }
        let b = num / den;
        for (r, d) in params[slice].iter_mut().enumerate() {
            *d -= b * centered(r);
        }
        params[3 * k] += b * n;
        params[3 * k + 1] += 0.5 * b * n;
    }
}

/// Gradient descent on the free intrinsics with per-unit gauge fixing.
/// The report carries the best iterate; a non-finite loss aborts with the
/// last finite intrinsics.
pub fn calibrate(problem: &CalibProblem, opt: &OptimizerConfig) -> Result<CalibReport, CalibError> {
    problem.loss_weights.validate()?;
    if problem.frames.is_empty() {
        return Err(CalibError::EmptyInput);
    }
    let first = eval_loss(&problem.frames, &problem.initial, &problem.loss_weights)?;
    if !first.loss.is_finite() {
        return Err(CalibError::Diverged(Box::new(problem.initial.clone())));
    }
    if !problem.free_mask.any() || opt.iterations == 0 {
        return Ok(CalibReport {
            final_intrinsics: problem.initial.clone(),
            loss_history: vec![first.loss],
            per_channel_residuals: channel_rms(&first.channel_sq, &first.channel_n),
        });
    }

    let template = &problem.initial;
    let mut params = pack(template);
    let n_units = template.units.len();
    let mask = {
        let mut m = vec![false; params.len()];
        for k in 0..n_units {
            m[3 * k] = problem.free_mask.fov;
            m[3 * k + 1] = problem.free_mask.fov_offset;
            m[3 * k + 2] = problem.free_mask.z_offset;
        }
        for d in &mut m[3 * n_units..] {
            *d = problem.free_mask.diode;
        }
        m
    };

    let mut adam = Adam::new(params.len(), opt);
    let mut best_loss = first.loss;
    let mut best_params = params.clone();
    let mut best_eval = (first.channel_sq, first.channel_n);
    let mut history = Vec::with_capacity(opt.iterations + 1);
    history.push(best_loss);
    for _ in 0..opt.iterations {
        let mut eval = eval_loss(&problem.frames, &unpack(&params, template), &problem.loss_weights)?;
        if !eval.loss.is_finite() {
            return Err(CalibError::Diverged(Box::new(unpack(&best_params, template))));
        }
        if eval.loss < best_loss {
            best_loss = eval.loss;
            best_params.copy_from_slice(&params);
            best_eval = (eval.channel_sq, eval.channel_n);
        }
        history.push(best_loss);
        for (g, free) in eval.grad.iter_mut().zip(&mask) {
            if !*free {
                *g = 0.0;
            }
        }
        adam.step(&mut params, &eval.grad);
        if problem.free_mask.fov_offset && problem.free_mask.diode {
            fix_gauge(&mut params, template, problem.free_mask.fov);
        }
    }
    if problem.free_mask.fov_offset && problem.free_mask.diode {
        fix_gauge(&mut best_params, template, problem.free_mask.fov);
    }
    Ok(CalibReport {
        final_intrinsics: unpack(&best_params, template),
        loss_history: history,
        per_channel_residuals: channel_rms(&best_eval.0, &best_eval.1),
    })
}
