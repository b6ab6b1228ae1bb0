//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS` line. Tolerances and time budgets are pinned in the
//! assertions; run with `--nocapture` to see the lines.

use std::time::Instant;

use pbl_core::calib::{calibrate, CalibProblem, ChannelWeights, FreeMask};
use pbl_core::field::{render_ray, render_scan, RenderOptions, VoxelField};
use pbl_core::fit::{fit, grad_check, FitConfig, FreeParams, GradTarget, Observation};
use pbl_core::geometry::{project, ray_from_pixel, unproject, unproject_image};
use pbl_core::image::Point;
use pbl_core::math::{Quat, SplitMix64, Vec3};
use pbl_core::normals::{estimate_normals, repair_edges, RepairConfig};
use pbl_core::optim::OptimizerConfig;
use pbl_core::sensor::{
    dist_far, loss_laser, loss_reflectivity, n_distance, n_incidence, sigmoid_blend,
    DistanceParams, LossWeights,
};
use pbl_core::{IntensityParams, MaskSet, Pose, RangeImage, SensorIntrinsics, UnitIntrinsics};

// --- shared fixtures ----------------------------------------------------

/// Two stacked units with jittered geometry and per-diode offsets.
fn random_two_unit(seed: u64, width: usize, rows_per_unit: usize) -> SensorIntrinsics {
    let mut rng = SplitMix64::new(seed);
    let h = 2 * rows_per_unit;
    let units = vec![
        UnitIntrinsics {
            fov: rng.uniform(0.10, 0.16),
            fov_offset: rng.uniform(0.00, 0.04),
            z_offset: rng.uniform(-0.12, 0.12),
            row_start: 0,
            row_end: rows_per_unit,
        },
        UnitIntrinsics {
            fov: rng.uniform(0.18, 0.24),
            fov_offset: rng.uniform(0.14, 0.18),
            z_offset: rng.uniform(-0.12, 0.12),
            row_start: rows_per_unit,
            row_end: h,
        },
    ];
    let diode: Vec<f64> = (0..h).map(|_| rng.uniform(-2e-3, 2e-3)).collect();
    SensorIntrinsics::new(width, h, units, diode).unwrap()
}

/// Removes the per-unit mean and linear-in-row trend from diode offsets;
/// both directions are unobservable against `fov_offset` and `fov`.
fn gauge_fix_diodes(intr: &mut SensorIntrinsics) {
    let spans: Vec<(usize, usize)> = intr.units.iter().map(|u| (u.row_start, u.row_end)).collect();
    for (lo, hi) in spans {
        let n = (hi - lo) as f64;
        let mean: f64 = intr.diode_offsets[lo..hi].iter().sum::<f64>() / n;
        for d in &mut intr.diode_offsets[lo..hi] {
            *d -= mean;
        }
        let centered = |r: usize| r as f64 - (n - 1.0) / 2.0;
        let mut num = 0.0;
        let mut den = 0.0;
        for (r, d) in intr.diode_offsets[lo..hi].iter().enumerate() {
            num += centered(r) * d;
            den += centered(r) * centered(r);
        }
        let slope = num / den;
        for (r, d) in intr.diode_offsets[lo..hi].iter_mut().enumerate() {
            *d -= slope * centered(r);
        }
    }
}

/// Points on exact pixel-center rays at random ranges, row/col tags kept
/// only when asked for.
fn pixel_center_cloud(
    intr: &SensorIntrinsics,
    seed: u64,
    tagged: bool,
) -> pbl_core::PointCloud {
    let mut rng = SplitMix64::new(seed);
    let mut points = Vec::new();
    for row in 0..intr.height {
        for col in 0..intr.width {
            let (o, d) = ray_from_pixel(row, col, intr);
            let r = rng.uniform(2.0, 50.0);
            let mut p = Point::new(o + d * r, 0.5);
            if tagged {
                p.ring = Some(row as u32);
                p.col = Some(col as u32);
                p.range = Some(r);
            }
            points.push(p);
        }
    }
    pbl_core::PointCloud::new(points)
}

/// 12 x 12 x 6 m room around the origin with textured opaque walls.
fn room_field() -> VoxelField {
    let mut f = VoxelField::new([24, 24, 12], 0.5, Vec3::new(-6.0, -6.0, -3.0));
    let [nx, ny, nz] = f.dims;
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let boundary =
                    ix == 0 || iy == 0 || iz == 0 || ix == nx - 1 || iy == ny - 1 || iz == nz - 1;
                if boundary {
                    let c = f.cell_index(ix, iy, iz);
                    f.density[c] = 40.0;
                    f.intensity[c] = 0.35 + 0.25 * ((ix + 2 * iy + 3 * iz) % 7) as f64 / 7.0;
                    f.reflectivity[c] = 0.3 + 0.2 * ((ix + iy) % 5) as f64 / 5.0;
                }
            }
        }
    }
    f
}

/// Flat ground slab far below the sensor; down-looking rays span roughly
/// 1.2 to 50 m of range.
fn ground_field() -> (VoxelField, SensorIntrinsics) {
    let mut f = VoxelField::new([124, 124, 3], 1.0, Vec3::new(-62.0, -62.0, -4.0));
    let [nx, ny, _] = f.dims;
    for iy in 0..ny {
        for ix in 0..nx {
            let c = f.cell_index(ix, iy, 2);
            f.density[c] = 40.0;
            f.intensity[c] = 0.8;
            f.reflectivity[c] = 0.4;
        }
    }
    (f, SensorIntrinsics::single_unit(64, 32, 1.5, 1.5))
}

fn observe(
    field: &VoxelField,
    intr: &SensorIntrinsics,
    params: &IntensityParams,
    pose: Pose,
    cfg: &FitConfig,
) -> Observation {
    let opts = RenderOptions {
        shutter: cfg.shutter,
        max_range: cfg.max_range,
        ..RenderOptions::default()
    };
    let out = render_scan(field, intr, &pose, &pose, params, &opts).unwrap();
    Observation { image: out.image, p0: pose, p1: pose }
}

/// Range image of the plane `dot(n, x) = offset`.
fn plane_scan(intr: &SensorIntrinsics, plane_n: Vec3, plane_offset: f64) -> RangeImage {
    let mut img = RangeImage::new(intr.width, intr.height);
    for row in 0..intr.height {
        for col in 0..intr.width {
            let (o, d) = ray_from_pixel(row, col, intr);
            let denom = plane_n.dot(d);
            if denom.abs() < 1e-9 {
                continue;
            }
            let t = (plane_offset - plane_n.dot(o)) / denom;
            if t > 0.1 && t < 500.0 {
                img.set(row, col, t, 0.5);
            }
        }
    }
    img
}

// --- criteria -----------------------------------------------------------

/// Dataset-scale benchmark metrics are out of scope; the README must say
/// so and point at the substitute oracle-based criteria below.
#[test]
fn criterion_01_scope_note_documented() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md"))
        .expect("README.md at the workspace root");
    assert!(readme.contains("## Scope"), "README must carry a Scope section");
    assert!(
        readme.contains("out of scope"),
        "Scope section must state that benchmark-scale metrics are out of scope"
    );
    assert!(
        readme.contains("acceptance suite"),
        "Scope section must point at the substitute acceptance criteria"
    );
    println!("criterion 1: PASS (benchmark-scale metrics declared out of scope in README)");
}

/// Ten random two-unit sensors; clouds on pixel-center rays survive
/// project -> unproject with max position error below 1e-4 m, under 5 s.
#[test]
fn criterion_02_projection_roundtrip() {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    for trial in 0..10u64 {
        let intr = random_two_unit(1000 + trial, 256, 16);
        // untagged points exercise the full row/unit assignment path
        let cloud = pixel_center_cloud(&intr, 2000 + trial, false);
        let (img, stats) = project(&cloud, &intr);
        assert_eq!(stats.dropped, 0, "trial {trial}: dropped points");
        assert_eq!(stats.collisions, 0, "trial {trial}: pixel collisions");
        let back = unproject(&img, &intr, None);
        assert_eq!(back.len(), cloud.len());
        for (a, b) in cloud.points.iter().zip(&back.points) {
            worst = worst.max((a.position - b.position).norm());
        }
    }
    let elapsed = start.elapsed();
    assert!(worst < 1e-4, "max roundtrip error {worst} m");
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    println!(
        "criterion 2: PASS (10 sensors, max roundtrip error {worst:.2e} m in {:.2} s)",
        elapsed.as_secs_f64()
    );
}

/// Full-resolution two-unit sensor (H = 64, W = 1024): calibration from a
/// 10% perturbed initialization recovers fov and fov_offset within 1e-4
/// rad, z offsets within 1e-3 m, diode offsets within 0.2 mrad, in under
/// two minutes.
#[test]
fn criterion_03_intrinsics_recovery() {
    let start = Instant::now();
    let mut truth = random_two_unit(31, 1024, 32);
    gauge_fix_diodes(&mut truth);
    let frames = vec![pixel_center_cloud(&truth, 32, true)];
    let mut init = truth.clone();
    for u in &mut init.units {
        u.fov *= 1.10;
        u.fov_offset *= 0.90;
        u.z_offset *= 1.10;
        u.z_offset += 0.01;
    }
    for d in &mut init.diode_offsets {
        *d = 0.0;
    }
    let problem = CalibProblem {
        frames,
        initial: init,
        free_mask: FreeMask::ALL,
        loss_weights: ChannelWeights::default(),
    };
    let opt = OptimizerConfig {
        learning_rate: 5e-3,
        iterations: 6000,
        lr_decay: 0.9988,
        ..OptimizerConfig::default()
    };
    let report = calibrate(&problem, &opt).unwrap();
    let elapsed = start.elapsed();
    let got = &report.final_intrinsics;
    for (g, t) in got.units.iter().zip(&truth.units) {
        assert!((g.fov - t.fov).abs() < 1e-4, "fov {} vs {}", g.fov, t.fov);
        assert!(
            (g.fov_offset - t.fov_offset).abs() < 1e-4,
            "fov_offset {} vs {}",
            g.fov_offset,
            t.fov_offset
        );
        assert!((g.z_offset - t.z_offset).abs() < 1e-3, "z {} vs {}", g.z_offset, t.z_offset);
    }
    let mut worst_diode = 0.0_f64;
    for (g, t) in got.diode_offsets.iter().zip(&truth.diode_offsets) {
        worst_diode = worst_diode.max((g - t).abs());
    }
    assert!(worst_diode < 0.2e-3, "worst diode error {worst_diode} rad");
    assert!(elapsed.as_secs_f64() < 120.0, "took {elapsed:?}");
    println!(
        "criterion 3: PASS (64x1024 intrinsics recovered, worst diode {worst_diode:.2e} rad in {:.1} s)",
        elapsed.as_secs_f64()
    );
}

/// Planted per-ring gains in U(0.7, 1.3) recovered within 2% from a single
/// room scan, in under five minutes.
#[test]
fn criterion_04_laser_power_recovery() {
    let start = Instant::now();
    let field = room_field();
    let intr = SensorIntrinsics::single_unit(64, 16, 0.8, 0.4);
    let cfg = FitConfig {
        shutter: false,
        iterations: 600,
        lr_sensor: 2e-2,
        lr_decay: 0.995,
        // the >1 gain penalty would bias planted gains above 1
        weights: LossWeights { l: 0.0, ..LossWeights::default() },
        ..FitConfig::default()
    };
    let mut truth = IntensityParams::identity(intr.height);
    let mut rng = SplitMix64::new(404);
    for l in &mut truth.laser_powers {
        *l = rng.uniform(0.7, 1.3);
    }
    let obs = vec![observe(&field, &intr, &truth, Pose::IDENTITY, &cfg)];
    let masks = MaskSet::empty(intr.width, intr.height);
    let init = IntensityParams::identity(intr.height);
    let free = FreeParams { laser: true, ..FreeParams::default() };
    let out = fit(&obs, &intr, &field, &init, &masks, None, &free, &cfg).unwrap();
    let elapsed = start.elapsed();
    let mut worst = 0.0_f64;
    for (got, want) in out.params.laser_powers.iter().zip(&truth.laser_powers) {
        worst = worst.max((got - want).abs() / want);
    }
    assert!(worst < 0.02, "worst relative gain error {worst}");
    assert!(elapsed.as_secs_f64() < 300.0, "took {elapsed:?}");
    println!(
        "criterion 4: PASS (16 ring gains within {:.2}% in {:.1} s)",
        100.0 * worst,
        elapsed.as_secs_f64()
    );
}

/// Planted distance falloff recovered to within 3% pointwise on [1, 60] m.
#[test]
fn criterion_05_distance_curve_recovery() {
    let (field, intr) = ground_field();
    let cfg = FitConfig {
        shutter: false,
        iterations: 2500,
        lr_sensor: 1e-2,
        lr_decay: 0.9985,
        max_range: 80.0,
        ..FitConfig::default()
    };
    let mut truth = IntensityParams::identity(intr.height);
    truth.distance = DistanceParams {
        s: 0.05,
        q: 1.5,
        d_near: 3.0,
        s_eta: 0.4,
        q_eta: 2.0,
        k_steep: 2.0,
        ..DistanceParams::default()
    };
    // extra vantage heights fill in the mid and far range bins that the
    // ground-level scan barely samples
    let obs: Vec<Observation> = [0.0, 5.0, 18.0]
        .iter()
        .map(|&h| {
            observe(&field, &intr, &truth, Pose::new(Quat::IDENTITY, Vec3::new(0.0, 0.0, h)), &cfg)
        })
        .collect();
    let masks = MaskSet::empty(intr.width, intr.height);
    let mut init = IntensityParams::identity(intr.height);
    init.distance = DistanceParams {
        s: 0.1,
        q: 1.0,
        d_near: 1.5,
        s_eta: 0.6,
        q_eta: 1.5,
        k_steep: 1.0,
        ..DistanceParams::default()
    };
    let free = FreeParams { distance: true, ..FreeParams::default() };
    let out = fit(&obs, &intr, &field, &init, &masks, None, &free, &cfg).unwrap();
    let mut worst = 0.0_f64;
    for k in 0..=118 {
        let d = 1.0 + 0.5 * k as f64;
        let got = n_distance(d, &out.params.distance);
        let want = n_distance(d, &truth.distance);
        worst = worst.max((got - want).abs());
    }
    assert!(worst < 0.03, "max curve deviation {worst}");
    println!("criterion 5: PASS (distance curve within {worst:.4} on [1, 60] m)");
}

/// Closed-form identities of the intensity chain, all in under a second.
#[test]
fn criterion_06_closed_form_identities() {
    let start = Instant::now();
    let mut rng = SplitMix64::new(606);
    for _ in 0..50 {
        let p = DistanceParams {
            s: rng.uniform(0.01, 0.3),
            q: rng.uniform(0.5, 3.0),
            d_near: rng.uniform(0.5, 6.0),
            s_eta: rng.uniform(0.1, 1.0),
            q_eta: rng.uniform(0.5, 3.0),
            k_steep: rng.uniform(0.5, 3.0),
            ..DistanceParams::default()
        };
        // the far branch equals one exactly at the near/far boundary
        assert_eq!(dist_far(p.d_near, &p), 1.0);
        // the blend weight is exactly one half there
        assert_eq!(sigmoid_blend(p.d_near, &p), 0.5);
        // q = 1 collapses the far branch to an inverse square law
        let inv_sq = DistanceParams { q: 1.0, ..p };
        for _ in 0..10 {
            let d = rng.uniform(inv_sq.d_near, 80.0);
            let delta = inv_sq.s * (d - inv_sq.d_near) + 1.0;
            assert!(
                (dist_far(d, &inv_sq) - delta.powi(-2)).abs() < 1e-12,
                "inverse square mismatch at d = {d}"
            );
        }
        // a zero incidence coefficient means cos^0 = 1 for any geometry
        let mut flat = IntensityParams::identity(4);
        flat.incidence_a = 0.0;
        let cos = rng.uniform(0.0, 1.0);
        let r = rng.uniform(0.0, 1.0);
        assert_eq!(n_incidence(cos, r, &flat), 1.0);
    }
    // gains at or below one carry no penalty
    assert_eq!(loss_laser(&[0.2, 1.0, 0.7, 0.99]), 0.0);
    // reflectivity penalty vanishes once the median meets the target
    let r_hat = [0.5, 0.6, 0.7, 0.8];
    let valid = [true; 4];
    assert_eq!(loss_reflectivity(&r_hat, &valid, 0.5), 0.0);
    // the lower-middle element 0.6 is the median of four samples
    assert_eq!(loss_reflectivity(&r_hat, &valid, 0.6), 0.0);
    assert!(loss_reflectivity(&r_hat, &valid, 0.65) > 0.0);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!("criterion 6: PASS (closed-form identities in {:.3} s)", elapsed.as_secs_f64());
}

/// Analytic gradients of every differentiable segment match central
/// finite differences to a relative error below 1e-4 at 100+ points each.
#[test]
fn criterion_07_gradient_audit() {
    for target in [
        GradTarget::RenderRay,
        GradTarget::NDistance,
        GradTarget::NIncidence,
        GradTarget::ApplyModel,
        GradTarget::Reprojection,
    ] {
        let report = grad_check(target, 120, 1e-5, 7777);
        assert!(report.checked >= 100, "{target:?}: only {} points", report.checked);
        assert!(report.max_rel_err < 1e-4, "{target:?}: max rel err {}", report.max_rel_err);
    }
    println!("criterion 7: PASS (5 gradient targets, 100+ points each, rel err < 1e-4)");
}

/// Transmittance conservation: accumulated weight plus the leftover
/// residual equals one to 1e-6 over ten thousand random rays.
#[test]
fn criterion_08_transmittance_conservation() {
    let mut rng = SplitMix64::new(808);
    let mut field = VoxelField::new([16, 16, 16], 0.5, Vec3::new(-4.0, -4.0, -4.0));
    for c in 0..field.cell_count() {
        field.density[c] = rng.uniform(0.0, 12.0);
        field.intensity[c] = rng.uniform(0.0, 1.0);
    }
    let mut worst = 0.0_f64;
    for _ in 0..10_000 {
        let o = Vec3::new(rng.uniform(-8.0, 8.0), rng.uniform(-8.0, 8.0), rng.uniform(-8.0, 8.0));
        let d = Vec3::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
        if d.norm() < 1e-3 {
            continue;
        }
        let shade = render_ray(&field, o, d.normalized(), 0.25, 40.0);
        worst = worst.max((shade.weight + shade.residual - 1.0).abs());
    }
    assert!(worst < 1e-6, "worst conservation defect {worst}");
    println!("criterion 8: PASS (10^4 rays, worst |weight + residual - 1| = {worst:.2e})");
}

/// Normal estimation on an analytic ground plane stays within one degree;
/// repairing a diode-biased row brings its neighbors within two degrees.
#[test]
fn criterion_09_normals_and_repair() {
    // ground plane
    let intr = SensorIntrinsics::single_unit(256, 32, 0.4, 0.45);
    let img = plane_scan(&intr, Vec3::new(0.0, 0.0, 1.0), -2.0);
    let xyz = unproject_image(&img, &intr);
    let nimg = estimate_normals(&xyz, &intr);
    let mut worst_plane = 0.0_f64;
    let mut checked = 0;
    for row in 2..intr.height - 2 {
        for col in 0..intr.width {
            let idx = nimg.idx(row, col);
            if nimg.valid[idx] {
                let ang = nimg.normal[idx].dot(Vec3::new(0.0, 0.0, 1.0)).clamp(-1.0, 1.0).acos();
                worst_plane = worst_plane.max(ang);
                checked += 1;
            }
        }
    }
    assert!(checked > 1000);
    assert!(worst_plane < 1.0_f64.to_radians(), "plane normal error {worst_plane} rad");

    // frontal wall with one row pushed out by a biased diode: the rows
    // above and below pick up the bias through their vertical tangent
    let intr = SensorIntrinsics::single_unit(256, 64, 0.2, 0.1);
    let truth = Vec3::new(-1.0, 0.0, 0.0);
    let mut img = plane_scan(&intr, Vec3::new(1.0, 0.0, 0.0), 10.0);
    let bias_row = 31usize;
    for col in 0..intr.width {
        let idx = img.idx(bias_row, col);
        if img.valid[idx] {
            img.depth[idx] += 0.02;
        }
    }
    let xyz = unproject_image(&img, &intr);
    let nimg = estimate_normals(&xyz, &intr);
    let cfg = RepairConfig { artifact_threshold: 15.0_f64.to_radians(), ..RepairConfig::default() };
    let repaired = repair_edges(&nimg, &img.depth, &img.valid, &intr, &cfg);
    let mut worst_raw = 0.0_f64;
    let mut worst_fixed = 0.0_f64;
    for row in [bias_row - 1, bias_row + 1] {
        for col in 0..intr.width {
            let idx = nimg.idx(row, col);
            if !nimg.valid[idx] {
                continue;
            }
            let (_, d) = ray_from_pixel(row, col, &intr);
            if d.x < 0.9 {
                continue;
            }
            worst_raw = worst_raw.max(nimg.normal[idx].dot(truth).clamp(-1.0, 1.0).acos());
            worst_fixed = worst_fixed.max(repaired.normal[idx].dot(truth).clamp(-1.0, 1.0).acos());
        }
    }
    assert!(worst_raw > 10.0_f64.to_radians(), "bias must corrupt raw normals: {worst_raw}");
    assert!(worst_fixed < 2.0_f64.to_radians(), "repaired normal error {worst_fixed} rad");
    println!(
        "criterion 9: PASS (plane normals within {:.2} deg, repaired rows within {:.2} deg)",
        worst_plane.to_degrees(),
        worst_fixed.to_degrees()
    );
}

/// A scan generated with all three intensity factors active is fitted
/// strictly better by the full model than by any single-factor ablation.
#[test]
fn criterion_10_full_model_beats_ablations() {
    let field = room_field();
    let intr = SensorIntrinsics::single_unit(64, 16, 0.8, 0.4);
    let cfg = FitConfig {
        shutter: false,
        iterations: 600,
        lr_sensor: 1e-2,
        lr_decay: 0.995,
        weights: LossWeights { l: 0.0, ..LossWeights::default() },
        ..FitConfig::default()
    };
    let mut truth = IntensityParams::identity(intr.height);
    truth.distance = DistanceParams {
        s: 0.05,
        q: 1.5,
        d_near: 3.0,
        s_eta: 0.4,
        q_eta: 2.0,
        k_steep: 2.0,
        ..DistanceParams::default()
    };
    truth.incidence_a = 10.0;
    truth.incidence_b = 2.0;
    let mut rng = SplitMix64::new(1010);
    for l in &mut truth.laser_powers {
        *l = rng.uniform(0.85, 1.15);
    }
    let obs = vec![observe(&field, &intr, &truth, Pose::IDENTITY, &cfg)];
    let masks = MaskSet::empty(intr.width, intr.height);
    // a shared neutral init; incidence_a starts at 1 rather than 0 because
    // the zero exponent is a stationary point of the incidence factor
    let mut init = IntensityParams::identity(intr.height);
    init.distance = DistanceParams {
        s: 0.1,
        q: 1.0,
        d_near: 1.5,
        s_eta: 0.6,
        q_eta: 1.5,
        k_steep: 1.0,
        ..DistanceParams::default()
    };
    init.incidence_a = 1.0;

    let rmse = |params: &IntensityParams| -> f64 {
        let opts = RenderOptions { shutter: false, ..RenderOptions::default() };
        let render = render_scan(&field, &intr, &Pose::IDENTITY, &Pose::IDENTITY, params, &opts)
            .unwrap();
        let gt = &obs[0].image;
        let mut sum = 0.0;
        let mut n = 0usize;
        for idx in 0..gt.depth.len() {
            if gt.valid[idx] && render.image.valid[idx] {
                let e = gt.intensity[idx] - render.image.intensity[idx];
                sum += e * e;
                n += 1;
            }
        }
        (sum / n as f64).sqrt()
    };

    let variants: [(&str, FreeParams); 4] = [
        (
            "full",
            FreeParams { distance: true, laser: true, incidence: true, ..FreeParams::default() },
        ),
        ("laser only", FreeParams { laser: true, ..FreeParams::default() }),
        ("distance only", FreeParams { distance: true, ..FreeParams::default() }),
        ("incidence only", FreeParams { incidence: true, ..FreeParams::default() }),
    ];
    let mut errs = Vec::new();
    for (name, free) in &variants {
        let out = fit(&obs, &intr, &field, &init, &masks, None, free, &cfg).unwrap();
        errs.push((*name, rmse(&out.params)));
    }
    let full = errs[0].1;
    for (name, e) in &errs[1..] {
        assert!(full < *e, "full RMSE {full} not below {name} RMSE {e}");
    }
    println!(
        "criterion 10: PASS (intensity RMSE full {:.4} < laser {:.4}, distance {:.4}, incidence {:.4})",
        errs[0].1, errs[1].1, errs[2].1, errs[3].1
    );
}
