//! Trajectory text files: one line per frame, `frame_id` followed by the
//! 12 row-major values of a 3x4 rigid transform.

use std::path::Path;

use pbl_core::math::{Quat, Vec3};
use pbl_core::Pose;

use crate::{config_err, Result};

/// Rotation matrix (row major) to quaternion, picking the numerically
/// largest component first (Shepperd's branch selection).
pub fn quat_from_matrix(m: &[f64; 9]) -> Quat {
    let (r00, r01, r02) = (m[0], m[1], m[2]);
    let (r10, r11, r12) = (m[3], m[4], m[5]);
    let (r20, r21, r22) = (m[6], m[7], m[8]);
    let trace = r00 + r11 + r22;
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        Quat::new((r21 - r12) / s, (r02 - r20) / s, (r10 - r01) / s, 0.25 * s)
    } else if r00 > r11 && r00 > r22 {
        let s = (1.0 + r00 - r11 - r22).sqrt() * 2.0;
        Quat::new(0.25 * s, (r01 + r10) / s, (r02 + r20) / s, (r21 - r12) / s)
    } else if r11 > r22 {
        let s = (1.0 + r11 - r00 - r22).sqrt() * 2.0;
        Quat::new((r01 + r10) / s, 0.25 * s, (r12 + r21) / s, (r02 - r20) / s)
    } else {
        let s = (1.0 + r22 - r00 - r11).sqrt() * 2.0;
        Quat::new((r02 + r20) / s, (r12 + r21) / s, 0.25 * s, (r10 - r01) / s)
    };
    q.normalized()
}

pub fn matrix_from_quat(q: &Quat) -> [f64; 9] {
    let (x, y, z, w) = (q.x, q.y, q.z, q.w);
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

fn orthonormality_defect(m: &[f64; 9]) -> f64 {
    // max abs entry of R R^T - I
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| m[3 * i + k] * m[3 * j + k]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

fn det3(m: &[f64; 9]) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
}

pub fn parse_poses(text: &str) -> Result<Vec<(u64, Pose)>> {
    let mut out: Vec<(u64, Pose)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| config_err(format!("poses line {}: {msg}", n + 1));
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 13 {
            return Err(bad(format!("expected frame id + 12 values, got {} tokens", toks.len())));
        }
        let id: u64 = toks[0].parse().map_err(|_| bad(format!("bad frame id {:?}", toks[0])))?;
        let mut v = [0.0f64; 12];
        for (i, t) in toks[1..].iter().enumerate() {
            v[i] = t.parse().map_err(|_| bad(format!("bad number {t:?}")))?;
        }
        let m = [v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]];
        let defect = orthonormality_defect(&m);
        if defect > 1e-4 {
            return Err(bad(format!("rotation not orthonormal (defect {defect:.2e})")));
        }
        if det3(&m) < 0.0 {
            return Err(bad("rotation has negative determinant".into()));
        }
        if out.iter().any(|(e, _)| *e == id) {
            return Err(bad(format!("duplicate frame id {id}")));
        }
        let t = Vec3::new(v[3], v[7], v[11]);
        out.push((id, Pose::new(quat_from_matrix(&m), t)));
    }
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}

pub fn read_poses(path: &Path) -> Result<Vec<(u64, Pose)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    parse_poses(&text)
}

pub fn format_poses(poses: &[(u64, Pose)]) -> String {
    let mut out = String::new();
    for (id, pose) in poses {
        let m = matrix_from_quat(&pose.rotation);
        let t = pose.translation;
        out.push_str(&format!(
            "{id} {} {} {} {} {} {} {} {} {} {} {} {}\n",
            m[0], m[1], m[2], t.x, m[3], m[4], m[5], t.y, m[6], m[7], m[8], t.z
        ));
    }
    out
}

pub fn write_poses(path: &Path, poses: &[(u64, Pose)]) -> Result<()> {
    std::fs::write(path, format_poses(poses))
        .map_err(|e| config_err(format!("{}: {e}", path.display())))
}
