//! Raw spinning-LiDAR binary clouds: little-endian f32 quadruples
//! `x y z intensity`, scan order preserved.

use std::path::Path;

use pbl_core::image::{Point, PointCloud};
use pbl_core::math::Vec3;

use crate::{config_err, Result};

/// Reads a `.bin` cloud. Returns the cloud plus the number of points with
/// non-finite coordinates (kept in place, not dropped).
pub fn read_kitti_bin(path: &Path) -> Result<(PointCloud, usize)> {
    let bytes = std::fs::read(path)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    if bytes.len() % 16 != 0 {
        return Err(config_err(format!(
            "{}: length not multiple of 16 (truncated record at byte {})",
            path.display(),
            bytes.len() - bytes.len() % 16
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut flagged = 0;
    for chunk in bytes.chunks_exact(16) {
        let f = |o: usize| f32::from_le_bytes(chunk[o..o + 4].try_into().unwrap()) as f64;
        let pos = Vec3::new(f(0), f(4), f(8));
        if !pos.is_finite() {
            flagged += 1;
        }
        points.push(Point::new(pos, f(12)));
    }
    Ok((PointCloud::new(points), flagged))
}

pub fn write_kitti_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.position.x, p.position.y, p.position.z, p.intensity] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let cloud = PointCloud::new(vec![
            Point::new(Vec3::new(1.5, -2.25, 0.125), 0.5),
            Point::new(Vec3::new(-10.0, 4.75, 3.5), 1.0),
        ]);
        write_kitti_bin(&path, &cloud).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 32);
        let (back, flagged) = read_kitti_bin(&path).unwrap();
        assert_eq!(flagged, 0);
        assert_eq!(back.len(), 2);
        for (a, b) in back.points.iter().zip(&cloud.points) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.intensity, b.intensity);
        }
    }

    #[test]
    fn empty_file_empty_cloud() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        std::fs::write(&path, []).unwrap();
        let (cloud, _) = read_kitti_bin(&path).unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        std::fs::write(&path, vec![0u8; 17]).unwrap();
        let err = read_kitti_bin(&path).unwrap_err();
        assert!(err.to_string().contains("length not multiple of 16"), "{err}");
        assert!(err.to_string().contains("byte 16"), "{err}");
    }

    #[test]
    fn nan_point_flagged_not_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.bin");
        let mut bytes = Vec::new();
        for v in [f32::NAN, 1.0, 2.0, 0.5, 3.0, 4.0, 5.0, 0.25] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let (cloud, flagged) = read_kitti_bin(&path).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(flagged, 1);
    }
}
