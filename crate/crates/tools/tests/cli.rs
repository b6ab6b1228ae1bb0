//! End-to-end tests of the `pbl` binary: the synth -> fit -> resim demo,
//! the projection roundtrip, resimulation knobs, determinism and exit
//! codes.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use pbl_core::field::{render_scan, RenderOptions};
use pbl_core::math::Vec3;
use pbl_core::{IntensityParams, Pose};
use pbl_tools::checkpoint::{load_checkpoint, save_checkpoint};
use pbl_tools::intrinsics_io::write_intrinsics;
use pbl_tools::kitti::read_kitti_bin;
use pbl_tools::manifest::sha256_file;
use pbl_tools::png_io::read_range_png;
use pbl_tools::scene::{load_scene, voxelize_scene};

const DEMO_SCENE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/demo_scene.json");

// the demo room is 10 x 10 x 4 m; the grid adds a 0.75 m wall shell
const GRID_ORIGIN: Vec3 = Vec3 { x: -5.75, y: -5.75, z: -2.75 };
const GRID_DIMS: [usize; 3] = [46, 46, 22];
const GRID_CELL: f64 = 0.25;

fn pbl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pbl"))
}

fn run_ok(cmd: &mut Command) {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth_demo(out: &Path) {
    run_ok(pbl().args(["synth", "--spec", DEMO_SCENE, "--out"]).arg(out));
}

#[test]
fn project_unproject_roundtrip_within_tenth_millimeter() {
    let dir = tempfile::tempdir().unwrap();
    let scan = dir.path().join("scan");
    synth_demo(&scan);

    // scale 8192 keeps the depth quantization at 1/16384 m; the demo room
    // fits inside the resulting 8 m ceiling
    let proj = dir.path().join("proj");
    run_ok(
        pbl()
            .args(["project", "--scale", "8192", "--cloud"])
            .arg(scan.join("cloud.bin"))
            .arg("--intrinsics")
            .arg(scan.join("intrinsics.txt"))
            .arg("--out")
            .arg(&proj),
    );
    let back = dir.path().join("back.bin");
    run_ok(
        pbl()
            .args(["unproject", "--scale", "8192", "--depth"])
            .arg(proj.join("depth.png"))
            .arg("--intensity")
            .arg(proj.join("intensity.png"))
            .arg("--intrinsics")
            .arg(scan.join("intrinsics.txt"))
            .arg("--out")
            .arg(&back),
    );

    let (original, _) = read_kitti_bin(&scan.join("cloud.bin")).unwrap();
    let (roundtrip, _) = read_kitti_bin(&back).unwrap();
    assert_eq!(original.len(), roundtrip.len());
    let mut worst = 0.0_f64;
    for (a, b) in original.points.iter().zip(&roundtrip.points) {
        worst = worst.max((a.position - b.position).norm());
    }
    assert!(worst < 1e-4, "max roundtrip position error {worst} m");
    assert!(proj.join("manifest.json").exists());
}

#[test]
fn demo_pipeline_recovers_planted_gains() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let scan = dir.path().join("scan");
    synth_demo(&scan);

    // warm-start field: the voxelized scene with neutral sensor parameters
    let spec = load_scene(Path::new(DEMO_SCENE)).unwrap();
    let field = voxelize_scene(&spec, GRID_ORIGIN, GRID_DIMS, GRID_CELL);
    let init_ckpt = dir.path().join("init.ckpt");
    save_checkpoint(&init_ckpt, &field, &IntensityParams::identity(spec.height)).unwrap();

    let fit_out = dir.path().join("fit");
    let config = serde_json::json!({
        "intrinsics": scan.join("intrinsics.txt"),
        "scans": [{"depth": scan.join("depth.png"), "intensity": scan.join("intensity.png")}],
        "grid": {"origin": [GRID_ORIGIN.x, GRID_ORIGIN.y, GRID_ORIGIN.z],
                 "dims": GRID_DIMS, "cell_size": GRID_CELL},
        "free": {"field": false, "distance": false, "laser": true,
                 "incidence": false, "pose_offsets": false},
        "init_checkpoint": init_ckpt,
        "iterations": 400,
        "lr_sensor": 2e-2,
        "lr_decay": 0.995,
        "shutter": false,
        "max_range": 20.0,
        // the >1 gain penalty would bias the planted gains above 1
        "weights": {"alpha": 1.0, "beta": 1.0, "gamma": 0.1, "r": 0.01, "l": 0.0}
    });
    let config_path = dir.path().join("fit.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    run_ok(pbl().args(["fit", "--config"]).arg(&config_path).arg("--out").arg(&fit_out));

    let (_, fitted) = load_checkpoint(&fit_out.join("checkpoint.ckpt")).unwrap();
    let planted = spec.params.laser_powers.clone();
    let mut worst = 0.0_f64;
    for (got, want) in fitted.laser_powers.iter().zip(&planted) {
        worst = worst.max((got - want).abs() / want);
    }
    assert!(worst < 0.02, "worst relative gain error {:.3}%", 100.0 * worst);

    let resim_out = dir.path().join("resim");
    run_ok(
        pbl()
            .args(["resim", "--no-shutter", "--max-range", "20", "--checkpoint"])
            .arg(fit_out.join("checkpoint.ckpt"))
            .arg("--intrinsics")
            .arg(scan.join("intrinsics.txt"))
            .arg("--out")
            .arg(&resim_out),
    );
    for name in ["depth.png", "intensity.png", "weight.png", "manifest.json"] {
        assert!(resim_out.join(name).exists(), "missing {name}");
    }
    assert!(start.elapsed().as_secs() < 600, "demo took {:?}", start.elapsed());
}

#[test]
fn resim_reflect_scale_darkens_oblique_surfaces() {
    let dir = tempfile::tempdir().unwrap();
    let spec = load_scene(Path::new(DEMO_SCENE)).unwrap();
    let intr = spec.intrinsics().unwrap();
    let field = voxelize_scene(&spec, GRID_ORIGIN, GRID_DIMS, GRID_CELL);
    let mut params = spec.params().unwrap();
    params.incidence_a = 10.0;
    params.incidence_b = 2.0;
    let ckpt = dir.path().join("scene.ckpt");
    save_checkpoint(&ckpt, &field, &params).unwrap();
    let intr_path = dir.path().join("intrinsics.txt");
    write_intrinsics(&intr_path, &intr).unwrap();

    let render = |scale: &str| -> PathBuf {
        let out = dir.path().join(format!("resim_{scale}"));
        run_ok(
            pbl()
                .args(["resim", "--no-shutter", "--max-range", "20"])
                .args(["--reflect-scale", scale, "--checkpoint"])
                .arg(&ckpt)
                .arg("--intrinsics")
                .arg(&intr_path)
                .arg("--out")
                .arg(&out),
        );
        out
    };
    let soft = render("2");
    let sharp = render("6");

    // incidence cosines of the same render, straight from the library
    let opts = RenderOptions { shutter: false, max_range: 20.0, ..RenderOptions::default() };
    let reference =
        render_scan(&field, &intr, &Pose::IDENTITY, &Pose::IDENTITY, &params, &opts).unwrap();

    let read = |out: &Path| read_range_png(&out.join("depth.png"), &out.join("intensity.png"), 256.0).unwrap();
    let (img_soft, img_sharp) = (read(&soft), read(&sharp));
    let mut sum_soft = 0.0;
    let mut sum_sharp = 0.0;
    let mut n = 0usize;
    for idx in 0..reference.cos_incidence.len() {
        if img_soft.valid[idx] && img_sharp.valid[idx] && reference.cos_incidence[idx] < 0.5 {
            sum_soft += img_soft.intensity[idx];
            sum_sharp += img_sharp.intensity[idx];
            n += 1;
        }
    }
    assert!(n > 50, "too few oblique pixels: {n}");
    let (mean_sharp, mean_soft) = (sum_sharp / n as f64, sum_soft / n as f64);
    assert!(
        mean_sharp < mean_soft,
        "sharper exponent must darken oblique pixels: {mean_sharp} vs {mean_soft}"
    );
}

#[test]
fn synth_is_deterministic_and_worker_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    synth_demo(&a);
    synth_demo(&b);
    run_ok(pbl().args(["--workers", "4", "synth", "--spec", DEMO_SCENE, "--out"]).arg(&c));
    for name in ["cloud.bin", "depth.png", "intensity.png", "truth_depth.png"] {
        let ha = sha256_file(&a.join(name)).unwrap();
        assert_eq!(ha, sha256_file(&b.join(name)).unwrap(), "{name} differs across runs");
        assert_eq!(ha, sha256_file(&c.join(name)).unwrap(), "{name} differs across workers");
    }
}

#[test]
fn config_errors_exit_with_code_two() {
    let out = pbl()
        .args(["synth", "--spec", "/nonexistent/scene.json", "--out", "/tmp/unused"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = pbl()
        .args(["--workers", "0", "synth", "--spec", DEMO_SCENE, "--out", "/tmp/unused"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
