//! The `pbl` command line: batch jobs wiring the formats, the synthesizer
//! and the core solvers together. Every job writes a manifest next to its
//! outputs; identical config + seed produce byte-identical results.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pbl_core::calib::{CalibError, CalibProblem, ChannelWeights, FreeMask};
use pbl_core::field::{render_camera, render_scan, Pinhole, RenderOptions, VoxelField};
use pbl_core::fit::{fit, FitConfig, FitError, FreeParams, Observation};
use pbl_core::geometry::{project, unproject, unproject_image};
use pbl_core::math::Vec3;
use pbl_core::normals::{estimate_normals, repair_edges, EdgeFlag, RepairConfig};
use pbl_core::optim::OptimizerConfig;
use pbl_core::pose::ScanDirection;
use pbl_core::sensor::{build_drop_mask, build_intensity_mask, analyze_statistics, MaskSet};
use pbl_core::{IntensityParams, Pose, RangeImage};
use serde::Deserialize;
use serde_json::json;

use crate::checkpoint::{load_checkpoint, save_checkpoint, ParamsDoc};
use crate::intrinsics_io::{read_intrinsics, write_intrinsics};
use crate::kitti::{read_kitti_bin, write_kitti_bin};
use crate::manifest::write_manifest;
use crate::plot::{bar_plot, line_plot};
use crate::png_io::{read_range_png, write_range_png, write_unit_channel_png, DEPTH_SCALE};
use crate::poses_io::read_poses;
use crate::report::{write_history_csv, write_stats_csv};
use crate::scene::{load_scene, synthesize_scan};
use crate::{config_err, Result, ToolError};

#[derive(Parser)]
#[command(name = "pbl", version, about = "Physically based LiDAR resimulation jobs")]
pub struct Cli {
    /// Worker count hint; results are identical for any value.
    #[arg(long, global = true, env = "PBL_WORKERS", default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Synthesize a scan (truth + noisy observation) from a scene spec.
    Synth(SynthArgs),
    /// Project a point cloud into a range image.
    Project(ProjectArgs),
    /// Lift a range image back to a point cloud.
    Unproject(UnprojectArgs),
    /// Recover sensor intrinsics from raw scans.
    Calibrate(CalibrateArgs),
    /// Estimate and repair surface normals of a range image.
    Normals(NormalsArgs),
    /// Intensity statistics over distance and incidence bins.
    Analyze(AnalyzeArgs),
    /// Optimize a voxel field and sensor parameters against observations.
    Fit(FitArgs),
    /// Re-render scans from a checkpoint under altered parameters.
    Resim(ResimArgs),
    /// Render a pinhole-camera view of a checkpoint.
    RenderCamera(RenderCameraArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEPTH_SCALE)]
    pub scale: f64,
    /// Recover ring/column indices from scan order before projecting.
    #[arg(long)]
    pub recover_rings: bool,
}

#[derive(Args)]
pub struct UnprojectArgs {
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long)]
    pub intensity: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEPTH_SCALE)]
    pub scale: f64,
}

#[derive(Args)]
pub struct CalibrateArgs {
    /// Raw scan-order clouds (.bin).
    #[arg(required = true)]
    pub frames: Vec<PathBuf>,
    /// Initial intrinsics estimate.
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 5e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.999)]
    pub lr_decay: f64,
    /// Comma separated subset of fov,fov_offset,z_offset,diode.
    #[arg(long, default_value = "fov,fov_offset,z_offset,diode")]
    pub free: String,
}

#[derive(Args)]
pub struct NormalsArgs {
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long)]
    pub intensity: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEPTH_SCALE)]
    pub scale: f64,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Scan directories, each holding depth.png + intensity.png.
    #[arg(required = true)]
    pub scans: Vec<PathBuf>,
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEPTH_SCALE)]
    pub scale: f64,
}

#[derive(Args)]
pub struct FitArgs {
    /// Fit job description (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ResimArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    /// Trajectory file; identity pose when omitted.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub frame: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Disable the rolling shutter (single pose for all columns).
    #[arg(long)]
    pub no_shutter: bool,
    /// Scale the reflectivity exponent at resimulation time.
    #[arg(long)]
    pub reflect_scale: Option<f64>,
    /// Drop the distance falloff factor.
    #[arg(long)]
    pub disable_distance: bool,
    /// Drop the per-diode laser power factor.
    #[arg(long)]
    pub disable_laser: bool,
    /// Drop the incidence-angle factor.
    #[arg(long)]
    pub disable_incidence: bool,
    #[arg(long, default_value_t = 120.0)]
    pub max_range: f64,
    #[arg(long, default_value_t = DEPTH_SCALE)]
    pub scale: f64,
}

#[derive(Args)]
pub struct RenderCameraArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub poses: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub frame: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 300.0)]
    pub fx: f64,
    #[arg(long, default_value_t = 300.0)]
    pub fy: f64,
    #[arg(long)]
    pub cx: Option<f64>,
    #[arg(long)]
    pub cy: Option<f64>,
    #[arg(long, default_value_t = 640)]
    pub width: usize,
    #[arg(long, default_value_t = 480)]
    pub height: usize,
    #[arg(long, default_value_t = 120.0)]
    pub max_range: f64,
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.workers == 0 {
        return Err(config_err("workers must be at least 1"));
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Project(a) => cmd_project(a),
        Command::Unproject(a) => cmd_unproject(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Normals(a) => cmd_normals(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Resim(a) => cmd_resim(a),
        Command::RenderCamera(a) => cmd_render_camera(a),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn lookup_pose(poses: &[(u64, Pose)], frame: u64) -> Result<Pose> {
    poses
        .iter()
        .find(|(id, _)| *id == frame)
        .map(|(_, p)| *p)
        .ok_or_else(|| config_err(format!("frame {frame} not in trajectory")))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = load_scene(&a.spec)?;
    let intr = spec.intrinsics()?;
    ensure_dir(&a.out)?;
    let scan = synthesize_scan(&spec, a.frame)?;
    let out = |name: &str| a.out.join(name);
    write_range_png(&scan.truth, &out("truth_depth.png"), &out("truth_intensity.png"), DEPTH_SCALE)?;
    write_range_png(&scan.noisy, &out("depth.png"), &out("intensity.png"), DEPTH_SCALE)?;
    write_unit_channel_png(&out("incidence.png"), intr.width, intr.height, &scan.cos_incidence)?;
    write_kitti_bin(&out("cloud.bin"), &scan.cloud)?;
    write_intrinsics(&out("intrinsics.txt"), &intr)?;
    let outputs: Vec<PathBuf> = [
        "truth_depth.png",
        "truth_intensity.png",
        "depth.png",
        "intensity.png",
        "incidence.png",
        "cloud.bin",
        "intrinsics.txt",
    ]
    .iter()
    .map(|n| out(n))
    .collect();
    write_manifest(
        &a.out,
        "synth",
        json!({"spec": a.spec.display().to_string(), "frame": a.frame}),
        &[a.spec.clone()],
        &outputs,
    )
}

fn cmd_project(a: ProjectArgs) -> Result<()> {
    let intr = read_intrinsics(&a.intrinsics)?;
    let (cloud, flagged) = read_kitti_bin(&a.cloud)?;
    if flagged > 0 {
        eprintln!("warning: {flagged} points with non-finite coordinates");
    }
    let cloud = if a.recover_rings {
        pbl_core::calib::recover_rings(&cloud.points, intr.width, intr.height)
            .map_err(|e| config_err(format!("{e}")))?
    } else {
        cloud
    };
    ensure_dir(&a.out)?;
    let (img, stats) = project(&cloud, &intr);
    let (d, i) = (a.out.join("depth.png"), a.out.join("intensity.png"));
    write_range_png(&img, &d, &i, a.scale)?;
    println!(
        "projected {} points: {} pixels, {} dropped, {} collisions",
        cloud.len(),
        img.valid_count(),
        stats.dropped,
        stats.collisions
    );
    write_manifest(
        &a.out,
        "project",
        json!({"cloud": a.cloud.display().to_string(), "scale": a.scale, "recover_rings": a.recover_rings}),
        &[a.cloud.clone(), a.intrinsics.clone()],
        &[d, i],
    )
}

fn cmd_unproject(a: UnprojectArgs) -> Result<()> {
    let intr = read_intrinsics(&a.intrinsics)?;
    let img = read_range_png(&a.depth, &a.intensity, a.scale)?;
    if img.width != intr.width || img.height != intr.height {
        return Err(config_err(format!(
            "image {}x{} does not match intrinsics {}x{}",
            img.width, img.height, intr.width, intr.height
        )));
    }
    let cloud = unproject(&img, &intr, None);
    write_kitti_bin(&a.out, &cloud)?;
    println!("unprojected {} points", cloud.len());
    let out_dir = a.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    write_manifest(
        &out_dir,
        "unproject",
        json!({"depth": a.depth.display().to_string(), "scale": a.scale}),
        &[a.depth.clone(), a.intensity.clone(), a.intrinsics.clone()],
        &[a.out.clone()],
    )
}

fn parse_free_mask(spec: &str) -> Result<FreeMask> {
    let mut mask = FreeMask::NONE;
    for tok in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match tok {
            "fov" => mask.fov = true,
            "fov_offset" => mask.fov_offset = true,
            "z_offset" => mask.z_offset = true,
            "diode" => mask.diode = true,
            other => return Err(config_err(format!("unknown free parameter {other:?}"))),
        }
    }
    Ok(mask)
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let initial = read_intrinsics(&a.init)?;
    let mut frames = Vec::new();
    for path in &a.frames {
        let (raw, _) = read_kitti_bin(path)?;
        let cloud = pbl_core::calib::recover_rings(&raw.points, initial.width, initial.height)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        frames.push(cloud);
    }
    ensure_dir(&a.out)?;
    let problem = CalibProblem {
        frames,
        initial,
        free_mask: parse_free_mask(&a.free)?,
        loss_weights: ChannelWeights::default(),
    };
    let opt = OptimizerConfig {
        learning_rate: a.learning_rate,
        iterations: a.iterations,
        lr_decay: a.lr_decay,
        ..Default::default()
    };
    let report = pbl_core::calib::calibrate(&problem, &opt).map_err(|e| match e {
        CalibError::Diverged(_) => ToolError::Numeric("calibration diverged".into()),
        other => config_err(format!("{other}")),
    })?;
    let intr_path = a.out.join("intrinsics.txt");
    write_intrinsics(&intr_path, &report.final_intrinsics)?;
    let hist_path = a.out.join("history.csv");
    write_history_csv(&hist_path, &report.loss_history)?;
    let report_path = a.out.join("report.json");
    let doc = json!({
        "residual_rms": {
            "d": report.per_channel_residuals[0],
            "intensity": report.per_channel_residuals[1],
            "row": report.per_channel_residuals[2],
            "col": report.per_channel_residuals[3],
        },
        "final_loss": report.loss_history.last(),
    });
    std::fs::write(&report_path, serde_json::to_string_pretty(&doc).unwrap())
        .map_err(|e| config_err(format!("{}: {e}", report_path.display())))?;
    let mut inputs = a.frames.clone();
    inputs.push(a.init.clone());
    write_manifest(
        &a.out,
        "calibrate",
        json!({"iterations": a.iterations, "learning_rate": a.learning_rate, "lr_decay": a.lr_decay, "free": a.free}),
        &inputs,
        &[intr_path, hist_path, report_path],
    )
}

fn cmd_normals(a: NormalsArgs) -> Result<()> {
    let intr = read_intrinsics(&a.intrinsics)?;
    let img = read_range_png(&a.depth, &a.intensity, a.scale)?;
    ensure_dir(&a.out)?;
    let xyz = unproject_image(&img, &intr);
    let raw = estimate_normals(&xyz, &intr);
    let repaired = repair_edges(&raw, &img.depth, &img.valid, &intr, &RepairConfig::default());
    // normals as RGB (n * 0.5 + 0.5), edge flags as gray levels
    let mut rgb = image::RgbImage::new(intr.width as u32, intr.height as u32);
    let mut edges = vec![0.0; intr.width * intr.height];
    for row in 0..intr.height {
        for col in 0..intr.width {
            let idx = repaired.idx(row, col);
            if repaired.valid[idx] {
                let n = repaired.normal[idx];
                rgb.put_pixel(
                    col as u32,
                    row as u32,
                    image::Rgb([
                        ((n.x * 0.5 + 0.5) * 255.0) as u8,
                        ((n.y * 0.5 + 0.5) * 255.0) as u8,
                        ((n.z * 0.5 + 0.5) * 255.0) as u8,
                    ]),
                );
            }
            edges[idx] = match repaired.edge_flags[idx] {
                EdgeFlag::None => 0.0,
                EdgeFlag::HorizontalArtifact => 0.5,
                EdgeFlag::StrongEdge => 1.0,
            };
        }
    }
    let n_path = a.out.join("normals.png");
    rgb.save(&n_path).map_err(|e| config_err(format!("{}: {e}", n_path.display())))?;
    let cos_path = a.out.join("incidence.png");
    write_unit_channel_png(&cos_path, intr.width, intr.height, &repaired.cos_incidence)?;
    let edge_path = a.out.join("edges.png");
    write_unit_channel_png(&edge_path, intr.width, intr.height, &edges)?;
    write_manifest(
        &a.out,
        "normals",
        json!({"depth": a.depth.display().to_string(), "scale": a.scale}),
        &[a.depth.clone(), a.intensity.clone(), a.intrinsics.clone()],
        &[n_path, cos_path, edge_path],
    )
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let intr = read_intrinsics(&a.intrinsics)?;
    let mut images = Vec::new();
    for dir in &a.scans {
        let img = read_range_png(&dir.join("depth.png"), &dir.join("intensity.png"), a.scale)?;
        let xyz = unproject_image(&img, &intr);
        let normals = estimate_normals(&xyz, &intr);
        let cos: Vec<f64> = normals
            .valid
            .iter()
            .zip(&normals.cos_incidence)
            .map(|(v, c)| if *v { *c } else { 1.0 })
            .collect();
        images.push((img, cos));
    }
    ensure_dir(&a.out)?;
    let frames: Vec<(&RangeImage, &[f64])> =
        images.iter().map(|(img, cos)| (img, cos.as_slice())).collect();
    let d_edges: Vec<f64> = (0..=16).map(|i| i as f64 * 5.0).collect();
    let angle_edges: Vec<f64> = (0..=9).map(|i| i as f64 * 10.0_f64.to_radians()).collect();
    let bins = analyze_statistics(&frames, &d_edges, &angle_edges);
    let stats_path = a.out.join("stats.csv");
    write_stats_csv(&stats_path, &bins)?;

    // per-row mean intensity (inter-row brightness variance)
    let mut row_sum = vec![0.0; intr.height];
    let mut row_count = vec![0usize; intr.height];
    for (img, _) in &images {
        for row in 0..intr.height {
            for col in 0..intr.width {
                let idx = img.idx(row, col);
                if img.valid[idx] {
                    row_sum[row] += img.intensity[idx];
                    row_count[row] += 1;
                }
            }
        }
    }
    let row_mean: Vec<f64> = row_sum
        .iter()
        .zip(&row_count)
        .map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 })
        .collect();
    let rows_path = a.out.join("rows.png");
    bar_plot(&rows_path, &row_mean, 640, 320)?;

    // mean intensity per distance bin (marginal over angle)
    let na = angle_edges.len() - 1;
    let mut curve = Vec::new();
    for bd in 0..d_edges.len() - 1 {
        let mut s = 0.0;
        let mut c = 0usize;
        for ba in 0..na {
            let b = &bins[bd * na + ba];
            s += b.mean * b.count as f64;
            c += b.count;
        }
        if c > 0 {
            curve.push((0.5 * (d_edges[bd] + d_edges[bd + 1]), s / c as f64));
        }
    }
    let dist_path = a.out.join("distance.png");
    if curve.len() >= 2 {
        line_plot(&dist_path, &curve, 640, 320)?;
    }
    let mut outputs = vec![stats_path, rows_path];
    if curve.len() >= 2 {
        outputs.push(dist_path);
    }
    let inputs: Vec<PathBuf> = a
        .scans
        .iter()
        .flat_map(|d| [d.join("depth.png"), d.join("intensity.png")])
        .chain([a.intrinsics.clone()])
        .collect();
    write_manifest(&a.out, "analyze", json!({"scans": a.scans.len(), "scale": a.scale}), &inputs, &outputs)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FitScanDoc {
    depth: PathBuf,
    intensity: PathBuf,
    #[serde(default)]
    frame: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridDoc {
    origin: [f64; 3],
    dims: [usize; 3],
    cell_size: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FreeDoc {
    field: bool,
    distance: bool,
    laser: bool,
    incidence: bool,
    pose_offsets: bool,
}

impl Default for FreeDoc {
    fn default() -> Self {
        FreeDoc { field: true, distance: true, laser: true, incidence: true, pose_offsets: false }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FitDoc {
    intrinsics: PathBuf,
    scans: Vec<FitScanDoc>,
    #[serde(default)]
    poses: Option<PathBuf>,
    grid: GridDoc,
    #[serde(default)]
    free: FreeDoc,
    #[serde(default)]
    init_params: Option<ParamsDoc>,
    /// Warm start: field (and, unless `init_params` overrides them,
    /// sensor parameters) loaded from an earlier checkpoint.
    #[serde(default)]
    init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    weights: Option<WeightsDoc>,
    #[serde(default = "default_iterations")]
    iterations: usize,
    #[serde(default = "default_lr_field")]
    lr_field: f64,
    #[serde(default = "default_lr_sensor")]
    lr_sensor: f64,
    #[serde(default = "default_lr_pose")]
    lr_pose: f64,
    #[serde(default = "default_one")]
    lr_decay: f64,
    #[serde(default = "default_true")]
    shutter: bool,
    #[serde(default = "default_max_range")]
    max_range: f64,
    #[serde(default = "default_scale")]
    scale: f64,
    /// Initial density painted uniformly into the grid.
    #[serde(default)]
    init_density: f64,
    /// Chronic-raydrop mask threshold; no mask when omitted.
    #[serde(default)]
    drop_mask_threshold: Option<f64>,
}

/// Loss-term weights, mirroring [`pbl_core::sensor::LossWeights`].
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsDoc {
    alpha: f64,
    beta: f64,
    gamma: f64,
    r: f64,
    l: f64,
}

fn default_iterations() -> usize {
    500
}
fn default_lr_field() -> f64 {
    1e-2
}
fn default_lr_sensor() -> f64 {
    1e-3
}
fn default_lr_pose() -> f64 {
    1e-2
}
fn default_one() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_max_range() -> f64 {
    120.0
}
fn default_scale() -> f64 {
    DEPTH_SCALE
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config)
        .map_err(|e| config_err(format!("{}: {e}", a.config.display())))?;
    let doc: FitDoc = serde_json::from_str(&text)
        .map_err(|e| config_err(format!("{}: {e}", a.config.display())))?;
    let intr = read_intrinsics(&doc.intrinsics)?;
    let poses = match &doc.poses {
        Some(p) => read_poses(p)?,
        None => Vec::new(),
    };
    let pose_of = |frame: u64| -> Pose {
        poses.iter().find(|(id, _)| *id == frame).map(|(_, p)| *p).unwrap_or(Pose::IDENTITY)
    };
    let mut observations = Vec::new();
    let mut frame_images = Vec::new();
    for scan in &doc.scans {
        let image = read_range_png(&scan.depth, &scan.intensity, doc.scale)?;
        if image.width != intr.width || image.height != intr.height {
            return Err(config_err(format!(
                "{}: image size does not match intrinsics",
                scan.depth.display()
            )));
        }
        frame_images.push(image.clone());
        observations.push(Observation {
            image,
            p0: pose_of(scan.frame),
            p1: pose_of(scan.frame + 1),
        });
    }
    let mut masks = MaskSet::empty(intr.width, intr.height);
    if let Some(threshold) = doc.drop_mask_threshold {
        masks.drop_mask = build_drop_mask(&frame_images, threshold);
        masks.intensity_mask = build_intensity_mask(&frame_images, threshold);
    }
    let (mut field, warm_params) = match &doc.init_checkpoint {
        Some(path) => {
            let (f, p) = load_checkpoint(path)?;
            if f.dims != doc.grid.dims || f.cell_size != doc.grid.cell_size {
                return Err(config_err(format!(
                    "{}: checkpoint grid does not match the configured grid",
                    path.display()
                )));
            }
            (f, Some(p))
        }
        None => {
            let f = VoxelField::new(
                doc.grid.dims,
                doc.grid.cell_size,
                Vec3::new(doc.grid.origin[0], doc.grid.origin[1], doc.grid.origin[2]),
            );
            (f, None)
        }
    };
    if doc.init_checkpoint.is_none() {
        for d in &mut field.density {
            *d = doc.init_density;
        }
    }
    let init_params = match (&doc.init_params, warm_params) {
        (Some(p), _) => p.to_params()?,
        (None, Some(p)) => p,
        (None, None) => IntensityParams::identity(intr.height),
    };
    let free = FreeParams {
        field: doc.free.field,
        distance: doc.free.distance,
        laser: doc.free.laser,
        incidence: doc.free.incidence,
        pose_offsets: doc.free.pose_offsets,
    };
    let weights = match &doc.weights {
        Some(w) => pbl_core::sensor::LossWeights {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            r: w.r,
            l: w.l,
        },
        None => Default::default(),
    };
    let cfg = FitConfig {
        iterations: doc.iterations,
        lr_field: doc.lr_field,
        lr_sensor: doc.lr_sensor,
        lr_pose: doc.lr_pose,
        lr_decay: doc.lr_decay,
        weights,
        shutter: doc.shutter,
        direction: ScanDirection::Forward,
        max_range: doc.max_range,
        ..Default::default()
    };
    ensure_dir(&a.out)?;
    let result = fit(&observations, &intr, &field, &init_params, &masks, None, &free, &cfg)
        .map_err(|e| match e {
            FitError::NonFinite(_) => ToolError::Numeric("fit loss went non-finite".into()),
            other => config_err(format!("{other}")),
        })?;
    let ckpt_path = a.out.join("checkpoint.ckpt");
    save_checkpoint(&ckpt_path, &result.field, &result.params)?;
    let hist_path = a.out.join("history.csv");
    write_history_csv(&hist_path, &result.history)?;
    let mut inputs = vec![a.config.clone(), doc.intrinsics.clone()];
    if let Some(p) = &doc.init_checkpoint {
        inputs.push(p.clone());
    }
    for s in &doc.scans {
        inputs.push(s.depth.clone());
        inputs.push(s.intensity.clone());
    }
    write_manifest(
        &a.out,
        "fit",
        serde_json::from_str(&text).expect("config parsed above"),
        &inputs,
        &[ckpt_path, hist_path],
    )
}

fn cmd_resim(a: ResimArgs) -> Result<()> {
    let (field, mut params) = load_checkpoint(&a.checkpoint)?;
    let intr = read_intrinsics(&a.intrinsics)?;
    if params.laser_powers.len() != intr.height {
        return Err(config_err(format!(
            "checkpoint has {} laser powers, intrinsics height {}",
            params.laser_powers.len(),
            intr.height
        )));
    }
    if let Some(scale) = a.reflect_scale {
        params.reflect_scale = scale;
    }
    let (p0, p1) = match &a.poses {
        Some(path) => {
            let poses = read_poses(path)?;
            let p0 = lookup_pose(&poses, a.frame)?;
            let p1 = lookup_pose(&poses, a.frame + 1).unwrap_or(p0);
            (p0, p1)
        }
        None => (Pose::IDENTITY, Pose::IDENTITY),
    };
    let opts = RenderOptions {
        shutter: !a.no_shutter,
        max_range: a.max_range,
        apply_distance: !a.disable_distance,
        apply_laser: !a.disable_laser,
        apply_incidence: !a.disable_incidence,
        ..Default::default()
    };
    ensure_dir(&a.out)?;
    let render = render_scan(&field, &intr, &p0, &p1, &params, &opts)
        .map_err(|e| config_err(format!("{e}")))?;
    let (d, i) = (a.out.join("depth.png"), a.out.join("intensity.png"));
    write_range_png(&render.image, &d, &i, a.scale)?;
    let w = a.out.join("weight.png");
    write_unit_channel_png(&w, intr.width, intr.height, &render.result.weight)?;
    let mut inputs = vec![a.checkpoint.clone(), a.intrinsics.clone()];
    if let Some(p) = &a.poses {
        inputs.push(p.clone());
    }
    write_manifest(
        &a.out,
        "resim",
        json!({
            "frame": a.frame,
            "no_shutter": a.no_shutter,
            "reflect_scale": a.reflect_scale,
            "disable_distance": a.disable_distance,
            "disable_laser": a.disable_laser,
            "disable_incidence": a.disable_incidence,
            "max_range": a.max_range,
        }),
        &inputs,
        &[d, i, w],
    )
}

fn cmd_render_camera(a: RenderCameraArgs) -> Result<()> {
    let (field, params) = load_checkpoint(&a.checkpoint)?;
    let pose = match &a.poses {
        Some(path) => lookup_pose(&read_poses(path)?, a.frame)?,
        None => Pose::IDENTITY,
    };
    let pin = Pinhole {
        fx: a.fx,
        fy: a.fy,
        cx: a.cx.unwrap_or(a.width as f64 * 0.5),
        cy: a.cy.unwrap_or(a.height as f64 * 0.5),
        width: a.width,
        height: a.height,
    };
    let opts = RenderOptions { shutter: false, max_range: a.max_range, ..Default::default() };
    ensure_dir(&a.out)?;
    let render = render_camera(&field, &pin, &pose, &params, &opts);
    let i_path = a.out.join("camera_intensity.png");
    write_unit_channel_png(&i_path, pin.width, pin.height, &render.final_intensity)?;
    let depth_norm: Vec<f64> =
        render.result.depth.iter().map(|d| (d / a.max_range).clamp(0.0, 1.0)).collect();
    let d_path = a.out.join("camera_depth.png");
    write_unit_channel_png(&d_path, pin.width, pin.height, &depth_norm)?;
    let mut inputs = vec![a.checkpoint.clone()];
    if let Some(p) = &a.poses {
        inputs.push(p.clone());
    }
    write_manifest(
        &a.out,
        "render-camera",
        json!({"fx": a.fx, "fy": a.fy, "width": a.width, "height": a.height, "frame": a.frame}),
        &inputs,
        &[i_path, d_path],
    )
}
