//! Rigid transforms and the per-column pose interpolation used to model
//! the rolling shutter of spinning sensors.

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use crate::math::FloatMath;
use crate::math::{Quat, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PoseError {
    /// Quaternions 90 degrees apart in S3: the interpolation arc is not
    /// uniquely defined.
    AmbiguousInterpolation,
}

impl core::fmt::Display for PoseError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PoseError::AmbiguousInterpolation => write!(f, "ambiguous interpolation"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for PoseError {}

/// Rigid transform: rotation then translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose { rotation: Quat::IDENTITY, translation: Vec3::ZERO };

    /// Normalizes the rotation on construction.
    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        Pose { rotation: rotation.normalized(), translation }
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn transform_direction(&self, d: Vec3) -> Vec3 {
        self.rotation.rotate(d)
    }

    pub fn inverse(&self) -> Pose {
        let inv_rot = self.rotation.conjugate();
        Pose { rotation: inv_rot, translation: -inv_rot.rotate(self.translation) }
    }

    /// `self` applied after `other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.mul(other.rotation).normalized(),
            translation: self.rotation.rotate(other.translation) + self.translation,
        }
    }
}

/// Column capture order over one revolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanDirection {
    /// Column 0 captured first; time grows with the column index.
    Forward,
    /// Column `W-1` captured first.
    Reverse,
}

/// Normalized linear quaternion interpolation with shortest-arc sign
/// alignment; translation is lerped componentwise.
pub fn interpolate_pose(p0: &Pose, p1: &Pose, t: f64) -> Result<Pose, PoseError> {
    let mut q1 = p1.rotation;
    let mut dot = p0.rotation.dot(q1);
    if dot < 0.0 {
        q1 = Quat::new(-q1.x, -q1.y, -q1.z, -q1.w);
        dot = -dot;
    }
    if dot < 1e-6 {
        return Err(PoseError::AmbiguousInterpolation);
    }
    let q0 = p0.rotation;
    let q = Quat::new(
        q0.x + (q1.x - q0.x) * t,
        q0.y + (q1.y - q0.y) * t,
        q0.z + (q1.z - q0.z) * t,
        q0.w + (q1.w - q0.w) * t,
    )
    .normalized();
    let tr = p0.translation + (p1.translation - p0.translation) * t;
    Ok(Pose { rotation: q, translation: tr })
}

/// Spherical interpolation. Kept next to the linear variant for callers
/// that want the higher accuracy arc.
pub fn interpolate_pose_spherical(p0: &Pose, p1: &Pose, t: f64) -> Result<Pose, PoseError> {
    let mut q1 = p1.rotation;
    let mut dot = p0.rotation.dot(q1);
    if dot < 0.0 {
        q1 = Quat::new(-q1.x, -q1.y, -q1.z, -q1.w);
        dot = -dot;
    }
    if dot < 1e-6 {
        return Err(PoseError::AmbiguousInterpolation);
    }
    let q0 = p0.rotation;
    let q = if dot > 1.0 - 1e-12 {
        // arc too small for the sine ratio form
        return interpolate_pose(p0, p1, t);
    } else {
        let omega = dot.clamp(-1.0, 1.0).acos();
        let so = omega.sin();
        let a = ((1.0 - t) * omega).sin() / so;
        let b = (t * omega).sin() / so;
        Quat::new(
            a * q0.x + b * q1.x,
            a * q0.y + b * q1.y,
            a * q0.z + b * q1.z,
            a * q0.w + b * q1.w,
        )
        .normalized()
    };
    let tr = p0.translation + (p1.translation - p0.translation) * t;
    Ok(Pose { rotation: q, translation: tr })
}

/// One pose per column: column `j` gets `t = j / W` (reversed for
/// [`ScanDirection::Reverse`]).
pub fn shutter_poses(
    p0: &Pose,
    p1: &Pose,
    width: usize,
    direction: ScanDirection,
) -> Result<Vec<Pose>, PoseError> {
    let mut out = Vec::with_capacity(width);
    for j in 0..width {
        let t = match direction {
            ScanDirection::Forward => j as f64 / width as f64,
            ScanDirection::Reverse => (width - 1 - j) as f64 / width as f64,
        };
        out.push(interpolate_pose(p0, p1, t)?);
    }
    Ok(out)
}
