//! The `simulate` flow: calibrate, sample, depth, composite, post-process,
//! export. Frames run in parallel on a bounded pool; each frame is staged in
//! a private directory and moved into `frames/` on success or `failed/` on
//! error.

use crate::config::{Config, ConfigError, PlacementCount};
use crate::seeds::derive_seed;
use crate::CliError;
use log::{info, warn};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use roadsim_core::dataset::{
    self, list_frames, load_asset_library, load_asset_manifest, load_keypoints, load_scene, project_pointcloud, save_scene,
    to_json_bytes, write_atomic, AssetManifest, LabelRecord, SceneFrame,
};
use roadsim_core::depth::{estimate_foreground_depth, ForegroundDepth, ForegroundDepthConfig};
use roadsim_core::extrinsics::optimize;
use roadsim_core::geometry::{project, Camera, CameraRig};
use roadsim_core::placement::{sample_placements, CatalogAsset, Placement, PlacementGrid, RejectionCounts, StopReason};
use roadsim_core::postproc::{apply_chain, PostContext, PostStage, Registry};
use roadsim_core::render::{render_scene, AssetLibrary, CameraView};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const REPORT_FILE: &str = "run_report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Calibrate,
    Sample,
    Depth,
    Composite,
    Postproc,
    Export,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).expect("unit enum");
        f.write_str(s.as_str().expect("string tag"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub camera_id: String,
    pub initial_rmse: Option<f64>,
    pub final_rmse: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    /// Why the camera kept its stored calibration.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthEntry {
    pub camera_id: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub rms: Option<f64>,
    pub inliers: usize,
    pub selected_masks: usize,
    pub convention_warning: bool,
    pub clamped: usize,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame_id: String,
    pub status: FrameStatus,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    pub requested: usize,
    pub accepted: usize,
    pub stop_reason: Option<StopReason>,
    pub rejections: RejectionCounts,
    pub calibration: Vec<CalibrationEntry>,
    pub depth: Vec<DepthEntry>,
}

impl FrameReport {
    fn new(frame_id: &str) -> Self {
        Self {
            frame_id: frame_id.to_string(),
            status: FrameStatus::Ok,
            failed_stage: None,
            error: None,
            requested: 0,
            accepted: 0,
            stop_reason: None,
            rejections: RejectionCounts::default(),
            calibration: vec![],
            depth: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub frames_ok: usize,
    pub frames_failed: usize,
    pub requested: usize,
    pub accepted: usize,
    /// Rejections summed over frames.
    pub rejections: RejectionCounts,
    /// Frames by stop reason.
    pub stop_reasons: BTreeMap<String, usize>,
    /// Sorted by frame id.
    pub frames: Vec<FrameReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameTimings {
    pub frame_id: String,
    /// Seconds per stage.
    pub stages: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DryRunPlan {
    pub frames: Vec<String>,
    pub requested: BTreeMap<String, usize>,
    pub post_stages: Vec<String>,
}

/// Which frames to process, as indices into the sorted frame list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSelection(pub Vec<Range<usize>>);

impl std::str::FromStr for FrameSelection {
    type Err = String;

    /// Accepts `a`, `a..b`, `a..=b` and comma-separated lists of those.
    fn from_str(s: &str) -> Result<Self, String> {
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad frame index {t:?}"));
        let mut out = Vec::new();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let r = if let Some((a, b)) = part.split_once("..=") {
                num(a)?..num(b)? + 1
            } else if let Some((a, b)) = part.split_once("..") {
                num(a)?..num(b)?
            } else {
                let a = num(part)?;
                a..a + 1
            };
            if r.is_empty() {
                return Err(format!("empty frame range {part:?}"));
            }
            out.push(r);
        }
        if out.is_empty() {
            return Err("no frames selected".into());
        }
        Ok(Self(out))
    }
}

impl FrameSelection {
    pub fn apply(&self, frames: &[String]) -> Vec<String> {
        frames.iter().enumerate().filter(|(i, _)| self.0.iter().any(|r| r.contains(i))).map(|(_, f)| f.clone()).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub frames: Option<FrameSelection>,
    pub dry_run: bool,
}

pub enum RunOutcome {
    Completed(RunReport),
    DryRun(DryRunPlan),
}

struct RunContext<'a> {
    cfg: &'a Config,
    grid: PlacementGrid,
    manifest: AssetManifest,
    library: AssetLibrary,
    catalog: Vec<CatalogAsset>,
    post: Vec<Box<dyn PostStage>>,
}

struct FrameFailure {
    stage: Stage,
    message: String,
}

fn fail<E: std::fmt::Display>(stage: Stage) -> impl Fn(E) -> FrameFailure {
    move |e| FrameFailure { stage, message: e.to_string() }
}

pub fn requested_count(cfg: &Config, frame_id: &str) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["count", frame_id]));
    match cfg.placements {
        PlacementCount::Fixed { count } => count,
        PlacementCount::Uniform { min, max } => rng.random_range(min..=max),
        PlacementCount::Poisson { mean, max } => {
            if mean <= 0.0 {
                0
            } else {
                let draw: f64 = Poisson::new(mean).expect("positive mean").sample(&mut rng);
                (draw as usize).min(max)
            }
        }
    }
}

/// Ground ellipse under a placement, projected into the camera.
fn footprint_outline(p: &Placement, cam: &Camera) -> Option<Vec<[f64; 2]>> {
    let b = &p.bbox;
    let (s, c) = b.yaw.sin_cos();
    let z = b.center.z - b.dims.height / 2.0;
    (0..24)
        .map(|i| {
            let t = i as f64 / 24.0 * std::f64::consts::TAU;
            let (lx, ly) = (b.dims.length / 2.0 * t.cos(), b.dims.width / 2.0 * t.sin());
            let w = Vector3::new(b.center.x + c * lx - s * ly, b.center.y + s * lx + c * ly, z);
            project(&w, &cam.extrinsics, &cam.intrinsics).pixel().map(|px| [px.u, px.v])
        })
        .collect()
}

fn process_frame(ctx: &RunContext<'_>, frame_id: &str, report: &mut FrameReport, timings: &mut FrameTimings) -> Result<SceneFrame, FrameFailure> {
    let cfg = ctx.cfg;
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut FrameTimings| {
        timings.stages.insert(name.to_string(), clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };

    let mut scene = load_scene(&cfg.scene_root, frame_id).map_err(fail(Stage::Load))?;
    lap("load", timings);

    if cfg.stages.calibrate {
        let kp_path = dataset::keypoints_path(&cfg.scene_root, frame_id);
        if kp_path.exists() {
            let file = load_keypoints(&kp_path).map_err(fail(Stage::Calibrate))?;
            let boxes = scene.boxes();
            for cam in scene.cameras.iter_mut() {
                let Some(set) = file.cameras.iter().find(|s| s.camera_id == cam.id) else { continue };
                let entry = match optimize(&cam.extrinsics, &cam.intrinsics, set, &boxes, &cfg.optimizer) {
                    Ok(r) => {
                        cam.extrinsics = r.optimized;
                        CalibrationEntry {
                            camera_id: cam.id.clone(),
                            initial_rmse: Some(r.initial_rmse),
                            final_rmse: Some(r.final_rmse),
                            iterations: Some(r.iterations),
                            converged: Some(r.converged),
                            skipped: None,
                        }
                    }
                    Err(e) => {
                        warn!("frame {frame_id} {}: keeping stored calibration: {e}", cam.id);
                        CalibrationEntry {
                            camera_id: cam.id.clone(),
                            initial_rmse: None,
                            final_rmse: None,
                            iterations: None,
                            converged: None,
                            skipped: Some(e.to_string()),
                        }
                    }
                };
                report.calibration.push(entry);
            }
        }
        lap("calibrate", timings);
    }

    let rig = scene.rig();
    let real: Vec<Placement> = scene.labels.iter().map(|l| l.placement.clone()).collect();
    let mut simulated = Vec::new();
    if cfg.stages.sample {
        report.requested = requested_count(cfg, frame_id);
        let seed = derive_seed(cfg.seed, &["sample", frame_id]);
        let res = sample_placements(&ctx.grid, &rig, &real, report.requested, &ctx.catalog, seed, &cfg.sampler).map_err(fail(Stage::Sample))?;
        report.accepted = res.placements.len();
        report.rejections = res.rejections;
        report.stop_reason = Some(res.stop);
        simulated = res.placements;
        lap("sample", timings);
    }

    let mut occlusion: Vec<Option<ForegroundDepth>> = vec![None; scene.cameras.len()];
    if cfg.stages.depth {
        let dcfg = ForegroundDepthConfig { fit_region: cfg.depth.fit_region };
        for (k, cam) in scene.cameras.iter().enumerate() {
            let mut entry = DepthEntry {
                camera_id: cam.id.clone(),
                a: None,
                b: None,
                rms: None,
                inliers: 0,
                selected_masks: 0,
                convention_warning: false,
                clamped: 0,
                note: None,
            };
            match (&cam.relative_depth, &cam.masks) {
                (Some(rel), Some(masks)) => {
                    let sparse = project_pointcloud(&scene.cloud, &cam.extrinsics, &cam.intrinsics);
                    let centers: Vec<Vector2<f64>> = real
                        .iter()
                        .filter_map(|p| project(&p.bbox.center, &cam.extrinsics, &cam.intrinsics).pixel())
                        .map(|px| px.uv())
                        .collect();
                    let res = estimate_foreground_depth(rel, &sparse, masks, &centers, &dcfg)
                        .map_err(|e| FrameFailure { stage: Stage::Depth, message: format!("camera {}: {e}", cam.id) })?;
                    entry.selected_masks = res.selected_masks;
                    entry.clamped = res.depth.clamped;
                    if let Some(c) = res.calibration {
                        entry.a = Some(c.a);
                        entry.b = Some(c.b);
                        entry.rms = Some(c.rms_error);
                        entry.inliers = c.inlier_count;
                        entry.convention_warning = c.convention_warning;
                    } else {
                        entry.note = Some("no foreground mask selected".into());
                    }
                    occlusion[k] = Some(res.depth);
                }
                _ => entry.note = Some("relative depth or masks missing; no occlusion".into()),
            }
            report.depth.push(entry);
        }
        lap("depth", timings);
    }

    let class_name = |p: &Placement| ctx.manifest.get(&p.asset_id).map_or_else(|| "Unknown".to_string(), |a| a.class_name.clone());
    let mut labels = scene.labels.clone();
    let mut composites: Vec<Option<roadsim_core::render::Composite>> = vec![None; scene.cameras.len()];
    if cfg.stages.composite {
        let cams: Vec<Camera> = scene.cameras.iter().map(|c| c.camera()).collect();
        let views: Vec<CameraView<'_>> = scene
            .cameras
            .iter()
            .zip(&cams)
            .zip(&occlusion)
            .map(|((c, cam), occ)| CameraView { camera: cam, background: &c.image, occlusion: occ.as_ref() })
            .collect();
        let out = render_scene(&views, &real, &simulated, &ctx.library, &cfg.render);
        for (k, c) in out.composites.into_iter().enumerate() {
            let comp = c.result.map_err(|e| FrameFailure { stage: Stage::Composite, message: format!("camera {}: {e}", c.camera_id) })?;
            composites[k] = Some(comp);
        }
        for l in out.labels.into_iter().skip(real.len()) {
            labels.push(LabelRecord { class_name: class_name(&l.placement), placement: l.placement, visibility: l.visibility });
        }
        for (cam, comp) in scene.cameras.iter_mut().zip(&composites) {
            cam.image = comp.as_ref().expect("filled above").image.clone();
        }
        lap("composite", timings);
    } else {
        labels.extend(simulated.iter().map(|p| LabelRecord { class_name: class_name(p), placement: p.clone(), visibility: vec![] }));
    }

    if cfg.stages.postproc && !ctx.post.is_empty() {
        for (k, cam) in scene.cameras.iter_mut().enumerate() {
            let camera = cam.camera();
            let pctx = PostContext {
                seed: derive_seed(cfg.seed, &["post", frame_id, &cam.id]),
                coverage: composites[k].as_ref().map(|c| c.coverage.clone()),
                footprints: simulated.iter().filter_map(|p| footprint_outline(p, &camera)).collect(),
            };
            cam.image = apply_chain(&cam.image, &ctx.post, &pctx)
                .map_err(|e| FrameFailure { stage: Stage::Postproc, message: format!("camera {}: {e}", cam.id) })?;
        }
        lap("postproc", timings);
    }

    for cam in scene.cameras.iter_mut() {
        cam.relative_depth = None;
        cam.masks = None;
    }
    scene.labels = labels;
    Ok(scene)
}

fn remove_if_exists(p: &Path) -> std::io::Result<()> {
    match fs::remove_dir_all(p) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e),
        _ => Ok(()),
    }
}

/// Stages, processes and files one frame. Never panics on data errors.
fn run_frame(ctx: &RunContext<'_>, frame_id: &str) -> (FrameReport, FrameTimings) {
    let out = &ctx.cfg.output_root;
    let mut report = FrameReport::new(frame_id);
    let mut timings = FrameTimings { frame_id: frame_id.to_string(), ..Default::default() };
    let staging = out.join(".staging").join(frame_id);
    let final_dir = dataset::frame_dir(out, frame_id);
    let failed_dir = out.join("failed").join(frame_id);

    let result = remove_if_exists(&staging)
        .and_then(|_| remove_if_exists(&final_dir))
        .and_then(|_| remove_if_exists(&failed_dir))
        .map_err(fail(Stage::Export))
        .and_then(|_| process_frame(ctx, frame_id, &mut report, &mut timings))
        .and_then(|scene| {
            let t = Instant::now();
            save_scene(&scene, &staging).map_err(fail(Stage::Export))?;
            fs::create_dir_all(dataset::frames_dir(out)).map_err(fail(Stage::Export))?;
            fs::rename(dataset::frame_dir(&staging, frame_id), &final_dir).map_err(fail(Stage::Export))?;
            timings.stages.insert("export".into(), t.elapsed().as_secs_f64());
            Ok(())
        });

    if let Err(f) = result {
        warn!("frame {frame_id}: stage {}: {}", f.stage, f.message);
        report.status = FrameStatus::Failed;
        report.failed_stage = Some(f.stage);
        report.error = Some(f.message.clone());
        let _ = fs::create_dir_all(&failed_dir);
        let partial = dataset::frame_dir(&staging, frame_id);
        if partial.is_dir() {
            let _ = fs::rename(&partial, failed_dir.join("partial"));
        }
        let body = serde_json::json!({ "frame_id": frame_id, "stage": f.stage, "error": f.message });
        let _ = fs::write(failed_dir.join("error.json"), to_json_bytes(&body));
    }
    let _ = remove_if_exists(&staging);
    (report, timings)
}

fn build_context(cfg: &Config) -> Result<RunContext<'_>, CliError> {
    let grid = cfg.grid.build()?;
    let post = Registry::builtin().resolve(&cfg.post).map_err(|e| CliError::Config(ConfigError::Invalid(format!("post chain: {e}"))))?;
    let manifest = load_asset_manifest(cfg.assets_root()).map_err(|e| CliError::Data(format!("assets: {e}")))?;
    let library = load_asset_library(cfg.assets_root(), &manifest).map_err(|e| CliError::Data(format!("assets: {e}")))?;
    let catalog = manifest
        .assets
        .iter()
        .map(|a| CatalogAsset { asset_id: a.asset_id.clone(), dims: a.dims, class_id: a.class_id })
        .collect();
    Ok(RunContext { cfg, grid, manifest, library, catalog, post })
}

pub fn selected_frames(cfg: &Config, selection: Option<&FrameSelection>) -> Result<Vec<String>, CliError> {
    let all = list_frames(&cfg.scene_root).map_err(|e| CliError::Data(format!("scene: {e}")))?;
    Ok(match selection {
        Some(s) => s.apply(&all),
        None => all,
    })
}

pub fn simulate(cfg: &Config, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let ctx = build_context(cfg)?;
    let frames = selected_frames(cfg, opts.frames.as_ref())?;

    if opts.dry_run {
        for f in &frames {
            load_scene(&cfg.scene_root, f).map_err(|e| CliError::Data(format!("frame {f}: {e}")))?;
        }
        let requested = frames.iter().map(|f| (f.clone(), if cfg.stages.sample { requested_count(cfg, f) } else { 0 })).collect();
        let post_stages = if cfg.stages.postproc { cfg.post.iter().filter(|s| s.enabled).map(|s| s.name.clone()).collect() } else { vec![] };
        return Ok(RunOutcome::DryRun(DryRunPlan { frames, requested, post_stages }));
    }

    fs::create_dir_all(&cfg.output_root).map_err(|e| CliError::Data(format!("output root {}: {e}", cfg.output_root.display())))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Internal(format!("worker pool: {e}")))?;
    let started = Instant::now();
    let mut results: Vec<(FrameReport, FrameTimings)> = pool.install(|| frames.par_iter().map(|f| run_frame(&ctx, f)).collect());
    results.sort_by(|a, b| a.0.frame_id.cmp(&b.0.frame_id));
    let _ = remove_if_exists(&cfg.output_root.join(".staging"));

    let mut report = RunReport {
        seed: cfg.seed,
        frames_ok: 0,
        frames_failed: 0,
        requested: 0,
        accepted: 0,
        rejections: RejectionCounts::default(),
        stop_reasons: BTreeMap::new(),
        frames: Vec::with_capacity(results.len()),
    };
    let mut timings = Vec::with_capacity(results.len());
    for (fr, t) in results {
        match fr.status {
            FrameStatus::Ok => report.frames_ok += 1,
            FrameStatus::Failed => report.frames_failed += 1,
        }
        report.requested += fr.requested;
        report.accepted += fr.accepted;
        report.rejections.overlap += fr.rejections.overlap;
        report.rejections.invisible += fr.rejections.invisible;
        if let Some(s) = fr.stop_reason {
            let key = serde_json::to_value(s).expect("unit enum").as_str().expect("string tag").to_string();
            *report.stop_reasons.entry(key).or_default() += 1;
        }
        report.frames.push(fr);
        timings.push(t);
    }
    let report_path = cfg.output_root.join(REPORT_FILE);
    write_atomic(&report_path, &to_json_bytes(&report)).map_err(|e| CliError::Data(e.to_string()))?;
    info!(
        "{} frames ok, {} failed, {} of {} placements accepted in {:.2}s",
        report.frames_ok,
        report.frames_failed,
        report.accepted,
        report.requested,
        started.elapsed().as_secs_f64()
    );
    if let Some(p) = &cfg.timings_path {
        let body = serde_json::json!({ "total_seconds": started.elapsed().as_secs_f64(), "frames": timings });
        dataset::write_file(p, &to_json_bytes(&body)).map_err(|e| CliError::Data(e.to_string()))?;
    }
    Ok(RunOutcome::Completed(report))
}

/// Re-exported for the subcommands that need a rig without running the
/// whole pipeline.
pub fn scene_rig(cfg: &Config, frame_id: &str) -> Result<(SceneFrame, CameraRig), CliError> {
    let scene = load_scene(&cfg.scene_root, frame_id).map_err(|e| CliError::Data(e.to_string()))?;
    let rig = scene.rig();
    Ok((scene, rig))
}

/// Output root paths touched by a run, for tests and tooling.
pub fn output_paths(cfg: &Config) -> (PathBuf, PathBuf) {
    (dataset::frames_dir(&cfg.output_root), cfg.output_root.join("failed"))
}
