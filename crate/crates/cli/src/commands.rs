//! The single-purpose subcommands: `calibrate`, `score-grid`, `depth`.

use crate::pipeline::CalibrationEntry;
use crate::{CliError, Config};
use nalgebra::Vector2;
use roadsim_core::dataset::{
    calib_path, encode_relative_depth, keypoints_path, load_keypoints, load_scene, project_pointcloud, to_json_bytes, write_atomic,
    write_file, CalibFile,
};
use roadsim_core::depth::{estimate_foreground_depth, ForegroundDepthConfig};
use roadsim_core::extrinsics::{optimize, OptimizerConfig};
use roadsim_core::geometry::project;
use roadsim_core::placement::score_cells;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

/// Refines every camera of `frame_id` that has keypoints. With `write`, the
/// refined poses replace the stored `calib.json` files atomically.
pub fn calibrate(
    scene_root: &Path,
    frame_id: &str,
    keypoints: Option<&Path>,
    cfg: &OptimizerConfig,
    write: bool,
) -> Result<Vec<CalibrationEntry>, CliError> {
    let scene = load_scene(scene_root, frame_id).map_err(data)?;
    let kp_path = keypoints.map(Path::to_path_buf).unwrap_or_else(|| keypoints_path(scene_root, frame_id));
    let file = load_keypoints(&kp_path).map_err(data)?;
    let boxes = scene.boxes();
    let mut out = Vec::new();
    for cam in &scene.cameras {
        let Some(set) = file.cameras.iter().find(|s| s.camera_id == cam.id) else { continue };
        match optimize(&cam.extrinsics, &cam.intrinsics, set, &boxes, cfg) {
            Ok(r) => {
                if write {
                    let calib = CalibFile::new(cam.id.clone(), cam.intrinsics, &r.optimized);
                    write_atomic(&calib_path(scene_root, frame_id, &cam.id), &to_json_bytes(&calib)).map_err(data)?;
                }
                out.push(CalibrationEntry {
                    camera_id: cam.id.clone(),
                    initial_rmse: Some(r.initial_rmse),
                    final_rmse: Some(r.final_rmse),
                    iterations: Some(r.iterations),
                    converged: Some(r.converged),
                    skipped: None,
                });
            }
            Err(e) => out.push(CalibrationEntry {
                camera_id: cam.id.clone(),
                initial_rmse: None,
                final_rmse: None,
                iterations: None,
                converged: None,
                skipped: Some(e.to_string()),
            }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell_index: usize,
    pub ix: usize,
    pub iy: usize,
    pub center: [f64; 2],
    pub visible_cameras: usize,
    pub visibility_term: f64,
    pub dispersion_term: f64,
    /// `None` for cells gated out by the seed points.
    pub total: Option<f64>,
}

/// Scores every grid cell against the frame's real boxes.
pub fn score_grid(cfg: &Config, frame_id: &str) -> Result<Vec<CellReport>, CliError> {
    let grid = cfg.grid.build()?;
    let scene = load_scene(&cfg.scene_root, frame_id).map_err(data)?;
    let existing: Vec<_> = scene.labels.iter().map(|l| l.placement.clone()).collect();
    let scores = score_cells(&grid, &scene.rig(), &existing, &cfg.sampler).map_err(data)?;
    Ok(scores
        .into_iter()
        .map(|s| {
            let c = grid.cell_center(s.cell_index);
            CellReport {
                cell_index: s.cell_index,
                ix: s.cell_index % grid.nx,
                iy: s.cell_index / grid.nx,
                center: [c.x, c.y],
                visible_cameras: s.visible_cameras,
                visibility_term: s.visibility_term,
                dispersion_term: s.dispersion_term,
                total: s.total.is_finite().then_some(s.total),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    pub camera_id: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub rms: Option<f64>,
    pub selected_masks: usize,
    /// Written foreground depth raster, if an output directory was given.
    pub output: Option<PathBuf>,
}

/// Runs only the depth stage. With `out`, writes each camera's metric
/// foreground depth as `<out>/<frame>/<cam>/depth.png` plus its sidecar.
pub fn depth(cfg: &Config, frame_id: &str, out: Option<&Path>) -> Result<Vec<DepthReport>, CliError> {
    let scene = load_scene(&cfg.scene_root, frame_id).map_err(data)?;
    let dcfg = ForegroundDepthConfig { fit_region: cfg.depth.fit_region };
    let mut reports = Vec::new();
    for cam in &scene.cameras {
        let (Some(rel), Some(masks)) = (&cam.relative_depth, &cam.masks) else {
            reports.push(DepthReport { camera_id: cam.id.clone(), a: None, b: None, rms: None, selected_masks: 0, output: None });
            continue;
        };
        let sparse = project_pointcloud(&scene.cloud, &cam.extrinsics, &cam.intrinsics);
        let centers: Vec<Vector2<f64>> = scene
            .labels
            .iter()
            .filter_map(|l| project(&l.bbox().center, &cam.extrinsics, &cam.intrinsics).pixel())
            .map(|p| p.uv())
            .collect();
        let res = estimate_foreground_depth(rel, &sparse, masks, &centers, &dcfg)
            .map_err(|e| CliError::Data(format!("camera {}: {e}", cam.id)))?;
        let output = match out {
            Some(dir) => {
                let base = dir.join(frame_id).join(&cam.id);
                let finite = res.depth.values.map(|&z| if z.is_finite() { z } else { 0.0 });
                let (png, enc) = encode_relative_depth(&finite);
                write_file(&base.join("depth.png"), &png).map_err(data)?;
                write_file(&base.join("depth.json"), &to_json_bytes(&enc)).map_err(data)?;
                Some(base.join("depth.png"))
            }
            None => None,
        };
        let c = res.calibration;
        reports.push(DepthReport {
            camera_id: cam.id.clone(),
            a: c.map(|c| c.a),
            b: c.map(|c| c.b),
            rms: c.map(|c| c.rms_error),
            selected_masks: res.selected_masks,
            output,
        });
    }
    Ok(reports)
}
