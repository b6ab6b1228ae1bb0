//! Physically based intensity chain `I* = I * N_d * N_R * l_i`, its
//! component factors with analytic parameter gradients, the losses built
//! on it, mask construction and the binned intensity statistics.

use alloc::vec;
use alloc::vec::Vec;

use crate::image::RangeImage;
#[cfg(not(feature = "std"))]
use crate::math::FloatMath;
use crate::math::sigmoid;

/// Base clamp for `delta_d`; below this the far falloff base would turn
/// non-positive.
const DELTA_EPS: f64 = 1e-6;
const COS_EPS: f64 = 1e-12;

/// Near-range branch of the distance falloff.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NearModel {
    /// `eta(d) = s_eta * d^(1/q_eta)`; keeps intensity near zero distance.
    FractionalPower,
    /// `eta(d) = 1 - exp(-s_eta * (d + delta)^2)`, the lens defocus form.
    LensDefocus,
}

/// Parameters of the blended near/far distance falloff `N_d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceParams {
    /// Far falloff scale, 1/m.
    pub s: f64,
    /// Far falloff exponent divisor, > 0.
    pub q: f64,
    /// Near/far boundary, m.
    pub d_near: f64,
    /// Near-range scale.
    pub s_eta: f64,
    /// Near-range exponent, > 0 (fractional power model).
    pub q_eta: f64,
    /// Sigmoid steepness, 1/m.
    pub k_steep: f64,
    pub near_model: NearModel,
    /// Distance offset of the lens defocus model.
    pub lens_delta: f64,
}

impl Default for DistanceParams {
    fn default() -> Self {
        DistanceParams {
            s: 0.05,
            q: 1.0,
            d_near: 3.0,
            s_eta: 0.3,
            q_eta: 2.0,
            k_steep: 1.0,
            near_model: NearModel::FractionalPower,
            lens_delta: 0.0,
        }
    }
}

impl DistanceParams {
    /// A configuration with `N_d == 1` for every distance.
    pub fn identity() -> Self {
        DistanceParams {
            s: 0.0,
            q: 1.0,
            d_near: 0.0,
            s_eta: 1.0,
            q_eta: 1.0,
            // steep sigmoid so the far branch (constant 1 with s = 0)
            // takes over immediately
            k_steep: 1e4,
            near_model: NearModel::FractionalPower,
            lens_delta: 0.0,
        }
    }
}

/// Gradient of a distance-chain value with respect to [`DistanceParams`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DistanceGrad {
    pub s: f64,
    pub q: f64,
    pub d_near: f64,
    pub s_eta: f64,
    pub q_eta: f64,
    pub k_steep: f64,
    pub lens_delta: f64,
}

impl DistanceGrad {
    fn scaled(self, f: f64) -> Self {
        DistanceGrad {
            s: self.s * f,
            q: self.q * f,
            d_near: self.d_near * f,
            s_eta: self.s_eta * f,
            q_eta: self.q_eta * f,
            k_steep: self.k_steep * f,
            lens_delta: self.lens_delta * f,
        }
    }

    fn add(self, o: Self) -> Self {
        DistanceGrad {
            s: self.s + o.s,
            q: self.q + o.q,
            d_near: self.d_near + o.d_near,
            s_eta: self.s_eta + o.s_eta,
            q_eta: self.q_eta + o.q_eta,
            k_steep: self.k_steep + o.k_steep,
            lens_delta: self.lens_delta + o.lens_delta,
        }
    }
}

/// Value plus derivatives of one distance-chain factor.
#[derive(Clone, Copy, Debug, Default)]
pub struct DistanceEval {
    pub value: f64,
    /// Derivative with respect to the distance argument.
    pub d_dist: f64,
    pub grad: DistanceGrad,
    /// The output or base clamp was hit; gradients are zeroed there.
    pub clamped: bool,
}

/// Far-range falloff `D_far = delta^(-2/q) * q - q + 1` with
/// `delta = s (d - d_near) + 1`, clamped at zero.
pub fn dist_far(d: f64, p: &DistanceParams) -> f64 {
    dist_far_eval(d, p).value
}

pub fn dist_far_eval(d: f64, p: &DistanceParams) -> DistanceEval {
    let mut clamped = false;
    let mut delta = p.s * (d - p.d_near) + 1.0;
    if delta <= DELTA_EPS {
        delta = DELTA_EPS;
        clamped = true;
    }
    let pow = delta.powf(-2.0 / p.q);
    let value = pow * p.q - p.q + 1.0;
    if value <= 0.0 {
        // negative tail of the closed form: clamp and cut gradient flow
        return DistanceEval { value: 0.0, d_dist: 0.0, grad: DistanceGrad::default(), clamped: true };
    }
    if clamped {
        return DistanceEval { value, d_dist: 0.0, grad: DistanceGrad::default(), clamped };
    }
    let d_delta = -2.0 * delta.powf(-2.0 / p.q - 1.0);
    let grad = DistanceGrad {
        s: d_delta * (d - p.d_near),
        q: pow * (1.0 + 2.0 * delta.ln() / p.q) - 1.0,
        d_near: d_delta * (-p.s),
        ..DistanceGrad::default()
    };
    DistanceEval { value, d_dist: d_delta * p.s, grad, clamped: false }
}

/// Near-range factor `eta(d)`.
pub fn dist_near(d: f64, p: &DistanceParams) -> f64 {
    dist_near_eval(d, p).value
}

pub fn dist_near_eval(d: f64, p: &DistanceParams) -> DistanceEval {
    match p.near_model {
        NearModel::FractionalPower => {
            if d <= 0.0 {
                return DistanceEval::default();
            }
            let pow = d.powf(1.0 / p.q_eta);
            let value = p.s_eta * pow;
            let grad = DistanceGrad {
                s_eta: pow,
                q_eta: -p.s_eta * pow * d.ln() / (p.q_eta * p.q_eta),
                ..DistanceGrad::default()
            };
            DistanceEval {
                value,
                d_dist: p.s_eta * pow / (p.q_eta * d),
                grad,
                clamped: false,
            }
        }
        NearModel::LensDefocus => {
            let u = d + p.lens_delta;
            let e = (-p.s_eta * u * u).exp();
            let value = 1.0 - e;
            let d_u = 2.0 * p.s_eta * u * e;
            let grad = DistanceGrad {
                s_eta: u * u * e,
                lens_delta: d_u,
                ..DistanceGrad::default()
            };
            DistanceEval { value, d_dist: d_u, grad, clamped: false }
        }
    }
}

/// Near/far blend weight `sigma(d) = 1 / (1 + exp(-k (d - d_near)))`.
pub fn sigmoid_blend(d: f64, p: &DistanceParams) -> f64 {
    sigmoid(p.k_steep * (d - p.d_near))
}

/// Blended distance factor `N_d = sigma * D_far + (1 - sigma) * eta`.
pub fn n_distance(d: f64, p: &DistanceParams) -> f64 {
    n_distance_eval(d, p).value
}

pub fn n_distance_eval(d: f64, p: &DistanceParams) -> DistanceEval {
    let far = dist_far_eval(d, p);
    let near = dist_near_eval(d, p);
    let sig = sigmoid_blend(d, p);
    let dsig = sig * (1.0 - sig);
    let value = sig * far.value + (1.0 - sig) * near.value;
    let sig_grad = DistanceGrad {
        k_steep: dsig * (d - p.d_near),
        d_near: -p.k_steep * dsig,
        ..DistanceGrad::default()
    };
    let grad = far
        .grad
        .scaled(sig)
        .add(near.grad.scaled(1.0 - sig))
        .add(sig_grad.scaled(far.value - near.value));
    let d_dist = sig * far.d_dist
        + (1.0 - sig) * near.d_dist
        + p.k_steep * dsig * (far.value - near.value);
    DistanceEval { value, d_dist, grad, clamped: far.clamped || near.clamped }
}

/// All optimizable parameters of the intensity chain.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityParams {
    pub distance: DistanceParams,
    /// Per-diode gain `l_i`, length `H`.
    pub laser_powers: Vec<f64>,
    /// Reflectivity exponent mapping `s(R) = (a R)^b`.
    pub incidence_a: f64,
    pub incidence_b: f64,
    /// Target median reflectivity `r_t`.
    pub reflect_target: f64,
    /// Resimulation-time exponent rescaler `a_r`.
    pub reflect_scale: f64,
}

impl IntensityParams {
    pub fn identity(height: usize) -> Self {
        IntensityParams {
            distance: DistanceParams::identity(),
            laser_powers: vec![1.0; height],
            incidence_a: 0.0,
            incidence_b: 2.0,
            reflect_target: 0.0,
            reflect_scale: 1.0,
        }
    }

    pub fn with_defaults(height: usize) -> Self {
        IntensityParams {
            distance: DistanceParams::default(),
            laser_powers: vec![1.0; height],
            incidence_a: 10.0,
            incidence_b: 2.0,
            reflect_target: 0.0,
            reflect_scale: 1.0,
        }
    }
}

/// Value and partials of `N_R = cos(phi_n)^(a_r * s(R))`.
#[derive(Clone, Copy, Debug, Default)]
pub struct IncidenceEval {
    pub value: f64,
    pub d_cos: f64,
    pub d_r_hat: f64,
    pub d_a: f64,
    pub d_b: f64,
}

/// Incidence factor. `0^0` is defined as 1: a zero exponent means the
/// surface is treated as fully unconstrained.
pub fn n_incidence(cos_phi_n: f64, r_hat: f64, p: &IntensityParams) -> f64 {
    n_incidence_eval(cos_phi_n, r_hat, p).value
}

pub fn n_incidence_eval(cos_phi_n: f64, r_hat: f64, p: &IntensityParams) -> IncidenceEval {
    let cos = cos_phi_n.clamp(0.0, 1.0);
    let ar = p.incidence_a * r_hat;
    let s = if ar <= 0.0 { 0.0 } else { ar.powf(p.incidence_b) };
    let expo = p.reflect_scale * s;
    if expo == 0.0 {
        return IncidenceEval { value: 1.0, ..IncidenceEval::default() };
    }
    if cos < COS_EPS {
        return IncidenceEval::default();
    }
    let value = cos.powf(expo);
    let ds_da = if ar <= 0.0 { 0.0 } else { p.incidence_b * s / p.incidence_a };
    let ds_dr = if ar <= 0.0 { 0.0 } else { p.incidence_b * s / r_hat };
    let ds_db = if ar <= 0.0 { 0.0 } else { s * ar.ln() };
    let ln_cos = cos.ln();
    IncidenceEval {
        value,
        d_cos: expo * cos.powf(expo - 1.0),
        d_r_hat: value * ln_cos * p.reflect_scale * ds_dr,
        d_a: value * ln_cos * p.reflect_scale * ds_da,
        d_b: value * ln_cos * p.reflect_scale * ds_db,
    }
}

/// Partials of the full chain output with respect to its inputs and
/// parameters.
#[derive(Clone, Copy, Debug, Default)]
pub struct ApplyEval {
    pub value: f64,
    pub d_base: f64,
    pub d_dist: f64,
    pub d_cos: f64,
    pub d_r_hat: f64,
    pub d_laser: f64,
    pub d_a: f64,
    pub d_b: f64,
    pub distance_grad: DistanceGrad,
}

/// The full chain `I* = I * N_d(d) * N_R(cos, R) * l_ring`, unclamped.
/// Callers exporting images clamp to `[0, 1]`; losses use the raw value.
pub fn apply_model(
    base: f64,
    d: f64,
    cos_phi_n: f64,
    r_hat: f64,
    ring: usize,
    p: &IntensityParams,
) -> f64 {
    apply_model_eval(base, d, cos_phi_n, r_hat, ring, p).value
}

pub fn apply_model_eval(
    base: f64,
    d: f64,
    cos_phi_n: f64,
    r_hat: f64,
    ring: usize,
    p: &IntensityParams,
) -> ApplyEval {
    let nd = n_distance_eval(d, &p.distance);
    let nr = n_incidence_eval(cos_phi_n, r_hat, p);
    let l = p.laser_powers[ring];
    let value = base * nd.value * nr.value * l;
    ApplyEval {
        value,
        d_base: nd.value * nr.value * l,
        d_dist: base * nd.d_dist * nr.value * l,
        d_cos: base * nd.value * nr.d_cos * l,
        d_r_hat: base * nd.value * nr.d_r_hat * l,
        d_laser: base * nd.value * nr.value,
        d_a: base * nd.value * nr.d_a * l,
        d_b: base * nd.value * nr.d_b * l,
        distance_grad: nd.grad.scaled(base * nr.value * l),
    }
}

/// Statistically derived loss masks.
#[derive(Clone, Debug)]
pub struct MaskSet {
    pub width: usize,
    pub height: usize,
    /// Chronic raydrop (self occlusion) pixels.
    pub drop_mask: Vec<bool>,
    /// Sensor artifact region with valid depth but zero intensity.
    pub intensity_mask: Vec<bool>,
    /// Shallow incidence cutoff, radians; pixels with a larger incidence
    /// angle are excluded from the intensity loss.
    pub incidence_threshold: f64,
}

impl MaskSet {
    pub fn empty(width: usize, height: usize) -> Self {
        MaskSet {
            width,
            height,
            drop_mask: vec![false; width * height],
            intensity_mask: vec![false; width * height],
            incidence_threshold: core::f64::consts::FRAC_PI_2,
        }
    }
}

/// Masked mean squared intensity error. Returns the loss and the number
/// of contributing pixels (0 means "no valid pixels" and a zero loss).
pub fn loss_intensity(
    pred: &[f64],
    gt: &[f64],
    valid: &[bool],
    masks: &MaskSet,
    cos_incidence: Option<&[f64]>,
) -> (f64, usize) {
    debug_assert_eq!(pred.len(), gt.len());
    let cos_min = masks.incidence_threshold.cos();
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if !valid[i] || masks.drop_mask[i] || masks.intensity_mask[i] {
            continue;
        }
        if let Some(cos) = cos_incidence {
            if cos[i] < cos_min {
                continue;
            }
        }
        let e = pred[i] - gt[i];
        sum += e * e;
        n += 1;
    }
    if n == 0 {
        (0.0, 0)
    } else {
        (sum / n as f64, n)
    }
}

/// `mean(relu(l_i - 1))`: only gain above one is penalized.
pub fn loss_laser(laser_powers: &[f64]) -> f64 {
    if laser_powers.is_empty() {
        return 0.0;
    }
    laser_powers.iter().map(|l| (l - 1.0).max(0.0)).sum::<f64>() / laser_powers.len() as f64
}

/// Lower median of the valid reflectivity pixels, with the pixel index,
/// deterministic under ties.
pub fn median_reflectivity(r_hat: &[f64], valid: &[bool]) -> Option<(usize, f64)> {
    let mut entries: Vec<(f64, usize)> = r_hat
        .iter()
        .zip(valid)
        .enumerate()
        .filter(|(_, (_, v))| **v)
        .map(|(i, (r, _))| (*r, i))
        .collect();
    if entries.is_empty() {
        return None;
    }
    entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let (value, index) = entries[(entries.len() - 1) / 2];
    Some((index, value))
}

/// `relu(r_t - median(R))`.
pub fn loss_reflectivity(r_hat: &[f64], valid: &[bool], r_t: f64) -> f64 {
    match median_reflectivity(r_hat, valid) {
        Some((_, m)) => (r_t - m).max(0.0),
        None => 0.0,
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub depth: f64,
    pub intensity: f64,
    pub mask: f64,
    pub reflectivity: f64,
    pub laser: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub r: f64,
    pub l: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 1.0, gamma: 0.1, r: 0.01, l: 0.01 }
    }
}

/// Weighted sum of the loss components; zero-weight terms do not
/// contribute (and need not have been evaluated).
pub fn loss_total(terms: &LossTerms, w: &LossWeights) -> f64 {
    let mut total = 0.0;
    for (weight, value) in [
        (w.alpha, terms.depth),
        (w.beta, terms.intensity),
        (w.gamma, terms.mask),
        (w.r, terms.reflectivity),
        (w.l, terms.laser),
    ] {
        if weight != 0.0 {
            total += weight * value;
        }
    }
    total
}

/// Pixel is masked when it is invalid in at least `threshold` of the frames.
pub fn build_drop_mask(frames: &[RangeImage], threshold: f64) -> Vec<bool> {
    let n = frames[0].valid.len();
    let mut invalid = vec![0usize; n];
    for f in frames {
        debug_assert_eq!(f.valid.len(), n);
        for (c, v) in invalid.iter_mut().zip(&f.valid) {
            if !*v {
                *c += 1;
            }
        }
    }
    invalid.iter().map(|c| *c as f64 >= threshold * frames.len() as f64).collect()
}

/// Pixel is masked when it shows valid depth with zero intensity in at
/// least `threshold` of the frames.
pub fn build_intensity_mask(frames: &[RangeImage], threshold: f64) -> Vec<bool> {
    let n = frames[0].valid.len();
    let mut affected = vec![0usize; n];
    for f in frames {
        for i in 0..n {
            if f.valid[i] && f.intensity[i] == 0.0 {
                affected[i] += 1;
            }
        }
    }
    affected.iter().map(|c| *c as f64 >= threshold * frames.len() as f64).collect()
}

/// One cell of the binned intensity statistics.
#[derive(Clone, Copy, Debug, Default)]
pub struct StatBin {
    pub d_lo: f64,
    pub d_hi: f64,
    pub angle_lo: f64,
    pub angle_hi: f64,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

/// Mean intensity grouped by (distance bin x incidence bin); empty bins
/// report a zero count.
pub fn analyze_statistics(
    frames: &[(&RangeImage, &[f64])],
    d_edges: &[f64],
    angle_edges: &[f64],
) -> Vec<StatBin> {
    let nd = d_edges.len() - 1;
    let na = angle_edges.len() - 1;
    let mut sums = vec![0.0; nd * na];
    let mut sq = vec![0.0; nd * na];
    let mut counts = vec![0usize; nd * na];
    for (img, cos) in frames {
        for i in 0..img.depth.len() {
            if !img.valid[i] {
                continue;
            }
            let angle = cos[i].clamp(-1.0, 1.0).acos();
            let Some(bd) = bin_of(img.depth[i], d_edges) else { continue };
            let Some(ba) = bin_of(angle, angle_edges) else { continue };
            let cell = bd * na + ba;
            sums[cell] += img.intensity[i];
            sq[cell] += img.intensity[i] * img.intensity[i];
            counts[cell] += 1;
        }
    }
    let mut out = Vec::with_capacity(nd * na);
    for bd in 0..nd {
        for ba in 0..na {
            let cell = bd * na + ba;
            let count = counts[cell];
            let mean = if count > 0 { sums[cell] / count as f64 } else { 0.0 };
            let var = if count > 1 {
                ((sq[cell] - sums[cell] * sums[cell] / count as f64) / (count as f64 - 1.0))
                    .max(0.0)
            } else {
                0.0
            };
            out.push(StatBin {
                d_lo: d_edges[bd],
                d_hi: d_edges[bd + 1],
                angle_lo: angle_edges[ba],
                angle_hi: angle_edges[ba + 1],
                count,
                mean,
                std: var.sqrt(),
            });
        }
    }
    out
}

fn bin_of(x: f64, edges: &[f64]) -> Option<usize> {
    if x < edges[0] {
        return None;
    }
    for b in 0..edges.len() - 1 {
        if x < edges[b + 1] {
            return Some(b);
        }
    }
    // the top edge is inclusive
    if x == edges[edges.len() - 1] {
        Some(edges.len() - 2)
    } else {
        None
    }
}
