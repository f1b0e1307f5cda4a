//! Synthetic scenes with known ground truth.
//!
//! Cameras sit on a ring around an intersection and look at its center.
//! Real vehicles are rendered onto a procedural ground/sky background. The
//! relative depth raster is an exact affine image of the true depth:
//! `Z = a0 * D + b0` with integer `D`, and LiDAR points are back-projected
//! from a pixel subgrid at that depth, so a noiseless single-camera fixture
//! calibrates exactly. Stored calibration can be perturbed away from the
//! truth, and `keypoints.json` holds the true corner projections.

use crate::dataset::{
    self, mesh_to_obj, save_scene, to_json_bytes, write_file, AssetEntry, AssetManifest,
    CalibFile, CameraFrame, DatasetError, KeypointFile, LabelRecord, SceneFrame,
};
use crate::depth::{ForegroundDepth, InstanceMaskSet, RelativeDepthRaster};
use crate::extrinsics::{ExtrinsicDelta, Keypoint, KeypointSet};
use crate::geometry::{back_project, in_view, project, Box3D, BoxDims, Camera, CameraExtrinsics, CameraIntrinsics, Pixel};
use crate::mesh::AssetMesh;
use crate::placement::{boxes_overlap, Placement};
use crate::raster::Raster;
use crate::render::{AssetLibrary, Composite, Lighting};
use image::RgbImage;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub cameras: usize,
    pub boxes: usize,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub ring_radius: f64,
    pub camera_height: f64,
    /// Half side of the square, centered on the origin, that holds boxes.
    pub box_area: f64,
    /// `a0` in `Z = a0 * D + b0`.
    pub depth_scale: f64,
    /// `b0` in `Z = a0 * D + b0`.
    pub depth_offset: f64,
    /// Depth assigned to sky pixels.
    pub far_depth: f64,
    /// LiDAR samples every `lidar_stride`-th pixel in both directions.
    pub lidar_stride: u32,
    /// Standard deviation of isotropic LiDAR point noise, meters.
    pub lidar_noise: f64,
    /// Standard deviation of keypoint pixel noise.
    pub keypoint_noise: f64,
    /// Upper bound of the stored-calibration rotation error, degrees.
    pub perturb_rotation_deg: f64,
    /// Upper bound of the stored-calibration translation error, meters.
    pub perturb_translation: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            cameras: 2,
            boxes: 3,
            frames: 1,
            width: 640,
            height: 360,
            focal: 600.0,
            ring_radius: 26.0,
            camera_height: 7.0,
            box_area: 7.0,
            depth_scale: 0.01,
            depth_offset: 0.5,
            far_depth: 150.0,
            lidar_stride: 3,
            lidar_noise: 0.0,
            keypoint_noise: 0.0,
            perturb_rotation_deg: 0.0,
            perturb_translation: 0.0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("invalid fixture config: {0}")]
    Config(String),
    #[error("could not place {0} non-overlapping boxes visible in every camera")]
    Placement(usize),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Built-in vehicle catalog shared by fixtures and the example config.
pub fn builtin_assets() -> Vec<(AssetEntry, AssetMesh)> {
    let specs = [
        ("sedan", "Car", 0, BoxDims::new(4.5, 1.8, 1.5), [176, 32, 40], [40, 44, 52]),
        ("suv", "Car", 0, BoxDims::new(4.8, 1.95, 1.75), [30, 90, 160], [36, 40, 48]),
        ("van", "Van", 1, BoxDims::new(5.2, 2.0, 2.1), [220, 220, 210], [60, 64, 70]),
    ];
    specs
        .into_iter()
        .map(|(id, class_name, class_id, dims, body, cabin)| {
            let entry = AssetEntry {
                asset_id: id.to_string(),
                mesh: format!("{id}.obj"),
                dims,
                class_id,
                class_name: class_name.to_string(),
                color: body,
            };
            (entry, AssetMesh::vehicle(id, dims, body, cabin))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureFrame {
    /// Scene as written to disk; camera extrinsics are the perturbed ones.
    pub scene: SceneFrame,
    pub keypoints: Vec<KeypointSet>,
    /// Per camera, the depth that `a0 * D + b0` reproduces exactly.
    pub true_depth: Vec<Raster<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GroundTruth {
    pub seed: u64,
    pub config: FixtureConfig,
    pub cameras: Vec<Camera>,
    pub frames: Vec<GroundTruthFrame>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GroundTruthFrame {
    pub frame_id: String,
    pub boxes: Vec<Box3D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub truth: GroundTruth,
    pub frames: Vec<FixtureFrame>,
}

impl Fixture {
    pub fn true_camera(&self, id: &str) -> Option<&Camera> {
        self.truth.cameras.iter().find(|c| c.id == id)
    }
}

fn validate(cfg: &FixtureConfig) -> Result<(), FixtureError> {
    let bad = |m: &str| Err(FixtureError::Config(m.to_string()));
    if cfg.cameras == 0 || cfg.frames == 0 {
        return bad("cameras and frames must be positive");
    }
    if cfg.width < 16 || cfg.height < 16 || !(cfg.focal > 0.0) {
        return bad("image must be at least 16x16 with positive focal length");
    }
    if !(cfg.depth_scale > 0.0) || !cfg.depth_offset.is_finite() {
        return bad("depth_scale must be positive and depth_offset finite");
    }
    if (cfg.far_depth - cfg.depth_offset) / cfg.depth_scale > 65535.0 {
        return bad("far_depth does not fit 16-bit relative depth");
    }
    if cfg.lidar_stride == 0 {
        return bad("lidar_stride must be positive");
    }
    if [cfg.lidar_noise, cfg.keypoint_noise, cfg.perturb_rotation_deg, cfg.perturb_translation].iter().any(|v| !(*v >= 0.0)) {
        return bad("noise and perturbation levels must be non-negative");
    }
    if !(cfg.ring_radius > cfg.box_area * 1.5) || !(cfg.camera_height > 0.0) {
        return bad("cameras must stand well outside the box area");
    }
    Ok(())
}

fn rig(cfg: &FixtureConfig, rng: &mut ChaCha8Rng) -> Vec<Camera> {
    let intr = CameraIntrinsics::new(cfg.focal, cfg.focal, cfg.width as f64 / 2.0, cfg.height as f64 / 2.0, cfg.width, cfg.height)
        .expect("validated");
    (0..cfg.cameras)
        .map(|k| {
            let angle = 2.0 * PI * k as f64 / cfg.cameras as f64 + rng.random_range(-0.2..0.2);
            let radius = cfg.ring_radius * rng.random_range(0.9..1.1);
            let eye = Vector3::new(radius * angle.cos(), radius * angle.sin(), cfg.camera_height * rng.random_range(0.85..1.15));
            let target = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), 0.0);
            Camera { id: format!("cam{k}"), intrinsics: intr, extrinsics: CameraExtrinsics::look_at(eye, target) }
        })
        .collect()
}

fn sample_boxes(cfg: &FixtureConfig, cams: &[Camera], assets: &[(AssetEntry, AssetMesh)], rng: &mut ChaCha8Rng) -> Result<Vec<(Box3D, usize)>, FixtureError> {
    let mut out: Vec<(Box3D, usize)> = Vec::new();
    let mut attempts = 0;
    while out.len() < cfg.boxes {
        attempts += 1;
        if attempts > 2000 {
            return Err(FixtureError::Placement(cfg.boxes));
        }
        let a = rng.random_range(0..assets.len());
        let dims = assets[a].0.dims;
        let center = Vector3::new(
            rng.random_range(-cfg.box_area..cfg.box_area),
            rng.random_range(-cfg.box_area..cfg.box_area),
            dims.height / 2.0,
        );
        let mut b = Box3D::new(center, dims, rng.random_range(-PI..PI), assets[a].0.class_id);
        b.track_id = Some(out.len() as i64);
        let corners_visible = cams.iter().all(|c| {
            in_view(&b, &c.extrinsics, &c.intrinsics)
                && b.corners().iter().all(|p| project(p, &c.extrinsics, &c.intrinsics).pixel().is_some_and(|px| c.intrinsics.contains(px.u, px.v)))
        });
        if corners_visible && !out.iter().any(|(o, _)| boxes_overlap(o, &b)) {
            out.push((b, a));
        }
    }
    Ok(out)
}

fn perturb(extr: &CameraExtrinsics, cfg: &FixtureConfig, rng: &mut ChaCha8Rng) -> CameraExtrinsics {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = rng.random_range(0.0..=1.0) * cfg.perturb_rotation_deg.to_radians();
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let shift = rng.random_range(0.0..=1.0) * cfg.perturb_translation;
    let delta = ExtrinsicDelta { rot: Vector3::from(axis) * angle, trans: Vector3::from(dir) * shift };
    delta.compose(extr)
}

struct Background {
    image: RgbImage,
    depth: Raster<f64>,
    ground: Raster<bool>,
}

/// Textured ground plane at z = 0 under a sky gradient.
fn background(cam: &Camera, far: f64) -> Background {
    let intr = &cam.intrinsics;
    let center = cam.extrinsics.center();
    let r_inv = cam.extrinsics.rotation.inverse();
    let (w, h) = (intr.width, intr.height);
    let mut image = RgbImage::new(w, h);
    let mut depth = Raster::filled(w, h, far);
    let mut ground = Raster::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            // Ray with unit camera-frame z, so the hit parameter is the depth.
            let ray = Vector3::new((x as f64 - intr.cx) / intr.fx, (y as f64 - intr.cy) / intr.fy, 1.0);
            let dir = r_inv * ray;
            let t = if dir.z < -1e-9 { -center.z / dir.z } else { f64::INFINITY };
            if t < far {
                let p = center + dir * t;
                let checker = ((p.x / 3.0).floor() + (p.y / 3.0).floor()) as i64 & 1;
                let lane = (p.x.abs() < 0.15 || p.y.abs() < 0.15) as u8;
                let g = 92 + 18 * checker as u8;
                let px = if lane == 1 { [235, 225, 120] } else { [g, g, g + 6] };
                image.put_pixel(x, y, image::Rgb(px));
                depth.set(x, y, t);
                ground.set(x, y, true);
            } else {
                let k = (y as f64 / h as f64 * 60.0) as u8;
                image.put_pixel(x, y, image::Rgb([150 + k, 190 + k / 2, 235]));
            }
        }
    }
    Background { image, depth, ground }
}

/// Builds the fixture in memory. Same config and seed give identical output.
pub fn build_fixture(cfg: &FixtureConfig, seed: u64) -> Result<Fixture, FixtureError> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assets = builtin_assets();
    let library: AssetLibrary = assets.iter().map(|(e, m)| (e.asset_id.clone(), m.clone())).collect();
    let cams = rig(cfg, &mut rng);
    let stored: Vec<CameraExtrinsics> = cams.iter().map(|c| perturb(&c.extrinsics, cfg, &mut rng)).collect();
    let lidar_noise = Normal::new(0.0, cfg.lidar_noise).expect("non-negative sigma");
    let kp_noise = Normal::new(0.0, cfg.keypoint_noise).expect("non-negative sigma");
    let backgrounds: Vec<Background> = cams.iter().map(|c| background(c, cfg.far_depth)).collect();

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut truth_frames = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let frame_id = format!("{f:06}");
        let boxes = sample_boxes(cfg, &cams, &assets, &mut rng)?;
        let labels: Vec<LabelRecord> = boxes.iter().map(|(b, a)| LabelRecord::real(&assets[*a].0.class_name, *b)).collect();

        let mut cloud = Vec::new();
        let mut cameras = Vec::with_capacity(cams.len());
        let mut keypoints = Vec::with_capacity(cams.len());
        let mut true_depth = Vec::with_capacity(cams.len());
        for (k, cam) in cams.iter().enumerate() {
            let bg = &backgrounds[k];
            let (w, h) = (cfg.width, cfg.height);
            let mut comp = Composite::new(bg.image.clone());
            let free = ForegroundDepth::unoccluded(w, h);
            for (i, (b, a)) in boxes.iter().enumerate() {
                let placement = Placement::real(*b);
                comp.draw(&library[&assets[*a].0.asset_id], &placement, i as u32 + 1, &cam.extrinsics, &cam.intrinsics, &free, &Lighting::default())
                    .map_err(|e| FixtureError::Config(e.to_string()))?;
            }
            let surface = Raster::from_fn(w, h, |x, y| comp.depth.get(x, y).min(*bg.depth.get(x, y)));
            let rel = surface.map(|&z| ((z - cfg.depth_offset) / cfg.depth_scale).round().clamp(0.0, 65535.0));
            let z_true = rel.map(|&d| cfg.depth_scale * d + cfg.depth_offset);

            for y in (0..h).step_by(cfg.lidar_stride as usize) {
                for x in (0..w).step_by(cfg.lidar_stride as usize) {
                    let sky = *comp.instances.get(x, y) == 0 && !*bg.ground.get(x, y);
                    if sky {
                        continue;
                    }
                    let px = Pixel { u: x as f64, v: y as f64, depth: *z_true.get(x, y) };
                    let mut p = back_project(&px, &cam.extrinsics, &cam.intrinsics);
                    if cfg.lidar_noise > 0.0 {
                        p += Vector3::new(lidar_noise.sample(&mut rng), lidar_noise.sample(&mut rng), lidar_noise.sample(&mut rng));
                    }
                    // Stored as float32 on disk; keep memory identical.
                    cloud.push(p.map(|c| c as f32 as f64));
                }
            }

            let mut masks: Vec<_> = (1..=boxes.len() as u32).map(|i| comp.instance_mask(i)).filter(|m| m.any()).collect();
            masks.push(Raster::from_fn(w, h, |x, y| *bg.ground.get(x, y) && *comp.instances.get(x, y) == 0));

            let mut set = KeypointSet::new(&cam.id);
            for (bi, (b, _)) in boxes.iter().enumerate() {
                for (ci, corner) in b.corners().iter().enumerate() {
                    if let Some(px) = project(corner, &cam.extrinsics, &cam.intrinsics).pixel() {
                        let mut t = [px.u, px.v];
                        if cfg.keypoint_noise > 0.0 {
                            t[0] += kp_noise.sample(&mut rng);
                            t[1] += kp_noise.sample(&mut rng);
                        }
                        set.upsert(Keypoint { box_ref: bi, corner_index: ci, target: t });
                    }
                }
            }
            keypoints.push(set);

            cameras.push(CameraFrame {
                id: cam.id.clone(),
                image_path: Path::new("frames").join(&frame_id).join(&cam.id).join("image.png"),
                image: comp.image,
                intrinsics: cam.intrinsics,
                extrinsics: stored[k],
                relative_depth: Some(RelativeDepthRaster { camera_id: cam.id.clone(), values: rel }),
                masks: Some(InstanceMaskSet { camera_id: cam.id.clone(), masks }),
            });
            true_depth.push(z_true);
        }
        truth_frames.push(GroundTruthFrame { frame_id: frame_id.clone(), boxes: boxes.iter().map(|(b, _)| *b).collect() });
        frames.push(FixtureFrame { scene: SceneFrame { frame_id, cameras, labels, cloud }, keypoints, true_depth });
    }
    Ok(Fixture { truth: GroundTruth { seed, config: cfg.clone(), cameras: cams, frames: truth_frames }, frames })
}

/// Writes the asset catalog (`assets/manifest.json` plus OBJ files).
pub fn write_assets(root: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let dir = dataset::assets_dir(root);
    let mut written = Vec::new();
    let mut manifest = AssetManifest::default();
    for (entry, mesh) in builtin_assets() {
        let path = dir.join(&entry.mesh);
        write_file(&path, mesh_to_obj(&mesh).as_bytes())?;
        written.push(path);
        manifest.assets.push(entry);
    }
    let path = dir.join("manifest.json");
    write_file(&path, &to_json_bytes(&manifest))?;
    written.push(path);
    Ok(written)
}

pub fn write_fixture(fixture: &Fixture, root: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut written = write_assets(root)?;
    for frame in &fixture.frames {
        let manifest = save_scene(&frame.scene, root)?;
        written.extend(manifest.all().into_iter().map(|p| root.join(p)));
        let kp = dataset::keypoints_path(root, &frame.scene.frame_id);
        write_file(&kp, &to_json_bytes(&KeypointFile { cameras: frame.keypoints.clone() }))?;
        written.push(kp);
    }
    let gt = root.join("ground_truth.json");
    write_file(&gt, &to_json_bytes(&fixture.truth))?;
    written.push(gt);
    written.sort();
    Ok(written)
}

/// Builds and writes a fixture; returns it for callers that also want the
/// in-memory truth.
pub fn generate_fixture(cfg: &FixtureConfig, seed: u64, root: &Path) -> Result<Fixture, FixtureError> {
    let fixture = build_fixture(cfg, seed)?;
    write_fixture(&fixture, root)?;
    Ok(fixture)
}

pub fn load_ground_truth(root: &Path) -> Result<GroundTruth, DatasetError> {
    let path = root.join("ground_truth.json");
    let text = std::fs::read_to_string(&path).map_err(|_| DatasetError::MissingFile(path.clone()))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Parse { path, line: e.line(), message: e.to_string() })
}

/// Calibration file holding the true pose of `cam`.
pub fn true_calib(cam: &Camera) -> CalibFile {
    CalibFile::new(&cam.id, cam.intrinsics, &cam.extrinsics)
}
