//! On-disk scene layout and file formats.
//!
//! ```text
//! <root>/assets/manifest.json
//! <root>/frames/<frame_id>/labels.txt
//! <root>/frames/<frame_id>/cloud.bin            float32 LE, N x 3
//! <root>/frames/<frame_id>/keypoints.json       optional
//! <root>/frames/<frame_id>/<cam>/image.png      8-bit RGB
//! <root>/frames/<frame_id>/<cam>/calib.json
//! <root>/frames/<frame_id>/<cam>/depth_rel.png  16-bit gray, optional
//! <root>/frames/<frame_id>/<cam>/depth_rel.json decode: offset + scale * q
//! <root>/frames/<frame_id>/<cam>/masks/NNN.png  8-bit gray, nonzero = set
//! ```
//!
//! `cloud_xyzi.bin` (N x 4, intensity ignored) is read when `cloud.bin` is
//! absent.

use crate::depth::{InstanceMaskSet, RelativeDepthRaster, SparseDepthRaster};
use crate::extrinsics::KeypointSet;
use crate::geometry::{project, Box3D, BoxDims, Camera, CameraExtrinsics, CameraIntrinsics, CameraRig, Projection};
use crate::mesh::AssetMesh;
use crate::placement::{Placement, PlacementSource};
use crate::raster::{Mask, Raster};
use crate::render::{AssetLibrary, CameraVisibility};
use image::{ImageBuffer, ImageFormat, Luma, RgbImage};
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Cursor, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{}: {message}", path.display())]
    InvariantViolation { path: PathBuf, message: String },
    #[error("I/O error on {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl DatasetError {
    fn parse(path: &Path, line: usize, message: impl Into<String>) -> Self {
        Self::Parse { path: path.to_path_buf(), line, message: message.into() }
    }

    fn invariant(path: &Path, message: impl Into<String>) -> Self {
        Self::InvariantViolation { path: path.to_path_buf(), message: message.into() }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => DatasetError::MissingFile(path.to_path_buf()),
        _ => DatasetError::io(path, e),
    })
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_bytes(path)?).map_err(|e| DatasetError::parse(path, 0, e.to_string()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| DatasetError::parse(path, e.line(), e.to_string()))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| DatasetError::io(path, e))
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("plain data serializes");
    out.push(b'\n');
    out
}

/// Replaces `path` by writing a sibling temp file and renaming it over.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic_with(path, bytes, |_| Ok(()))
}

/// [`write_atomic`] with a hook that runs after the temp file is durable and
/// before the rename. A hook error aborts the write and leaves `path` as it
/// was; tests use it to simulate a crash at that point.
pub fn write_atomic_with(path: &Path, bytes: &[u8], before_rename: impl FnOnce(&Path) -> io::Result<()>) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| DatasetError::io(path, io::ErrorKind::InvalidInput.into()))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        before_rename(&tmp)?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(DatasetError::io(path, e));
    }
    if let Ok(d) = fs::File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

// ---------------------------------------------------------------- calibration

/// Direction of the stored rigid transform. Loaded extrinsics are always
/// world to camera.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtrinsicConvention {
    #[default]
    WorldToCamera,
    CameraToWorld,
}

/// `calib.json`. `rotation` is a `[w, x, y, z]` unit quaternion or a
/// row-major 3x3 matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibFile {
    pub camera_id: String,
    pub intrinsics: CameraIntrinsics,
    pub rotation: Vec<f64>,
    pub translation: [f64; 3],
    #[serde(default)]
    pub convention: ExtrinsicConvention,
}

impl CalibFile {
    pub fn new(camera_id: impl Into<String>, intrinsics: CameraIntrinsics, extr: &CameraExtrinsics) -> Self {
        let q = extr.rotation.quaternion();
        Self {
            camera_id: camera_id.into(),
            intrinsics,
            rotation: vec![q.w, q.i, q.j, q.k],
            translation: extr.translation.into(),
            convention: ExtrinsicConvention::WorldToCamera,
        }
    }

    /// World-to-camera extrinsics; `line` is reported on shape errors.
    pub fn extrinsics(&self, path: &Path, line: usize) -> Result<CameraExtrinsics> {
        let t = Vector3::from(self.translation);
        if !self.rotation.iter().chain(t.iter()).all(|v| v.is_finite()) {
            return Err(DatasetError::invariant(path, "non-finite extrinsics"));
        }
        let extr = match self.rotation.len() {
            4 => {
                let r = &self.rotation;
                let q = Quaternion::new(r[0], r[1], r[2], r[3]);
                let n = q.norm();
                if (n - 1.0).abs() > 1e-6 {
                    return Err(DatasetError::invariant(path, format!("rotation quaternion norm {n} is not 1")));
                }
                CameraExtrinsics::new(UnitQuaternion::from_quaternion(q), t)
            }
            9 => {
                let m = Matrix3::from_row_slice(&self.rotation);
                CameraExtrinsics::from_matrix(&m, t).map_err(|e| DatasetError::invariant(path, e.to_string()))?
            }
            n => {
                return Err(DatasetError::parse(
                    path,
                    line,
                    format!("rotation must have 4 (quaternion) or 9 (matrix) elements, got {n}"),
                ))
            }
        };
        Ok(match self.convention {
            ExtrinsicConvention::WorldToCamera => extr,
            ExtrinsicConvention::CameraToWorld => extr.inverse(),
        })
    }
}

pub fn load_calib(path: &Path) -> Result<(CalibFile, CameraExtrinsics)> {
    let text = read_text(path)?;
    let calib: CalibFile = serde_json::from_str(&text).map_err(|e| DatasetError::parse(path, e.line(), e.to_string()))?;
    let line = text.lines().position(|l| l.contains("\"rotation\"")).map_or(0, |i| i + 1);
    let extr = calib.extrinsics(path, line)?;
    calib.intrinsics.validate().map_err(|e| DatasetError::invariant(path, e.to_string()))?;
    Ok((calib, extr))
}

// --------------------------------------------------------------------- labels

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub class_name: String,
    pub placement: Placement,
    /// Per-camera visibility of simulated insertions; empty for real labels.
    pub visibility: Vec<CameraVisibility>,
}

impl LabelRecord {
    pub fn real(class_name: impl Into<String>, bbox: Box3D) -> Self {
        Self { class_name: class_name.into(), placement: Placement::real(bbox), visibility: vec![] }
    }

    pub fn bbox(&self) -> &Box3D {
        &self.placement.bbox
    }
}

/// One row per label:
///
/// `class_name class_id track_id h w l x y z yaw world [source asset_id visibility]`
///
/// `track_id` is `-1` when absent. `source` is `real` or `simulated`,
/// `asset_id` and `visibility` are `-` when empty, and visibility entries
/// are `camera:pixels:flag` joined by commas. Blank lines and `#` comments
/// are skipped.
pub fn format_labels(labels: &[LabelRecord]) -> String {
    let mut out = String::new();
    for l in labels {
        let b = l.bbox();
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {} world",
            l.class_name,
            b.class_id,
            b.track_id.unwrap_or(-1),
            b.dims.height,
            b.dims.width,
            b.dims.length,
            b.center.x,
            b.center.y,
            b.center.z,
            b.yaw
        ));
        if l.placement.source == PlacementSource::Simulated || !l.visibility.is_empty() || !l.placement.asset_id.is_empty() {
            let source = match l.placement.source {
                PlacementSource::Real => "real",
                PlacementSource::Simulated => "simulated",
            };
            let asset = if l.placement.asset_id.is_empty() { "-" } else { &l.placement.asset_id };
            let vis = if l.visibility.is_empty() {
                "-".to_string()
            } else {
                l.visibility
                    .iter()
                    .map(|v| format!("{}:{}:{}", v.camera_id, v.pixels, u8::from(v.visible)))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            out.push_str(&format!(" {source} {asset} {vis}"));
        }
        out.push('\n');
    }
    out
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<LabelRecord>> {
    let mut labels = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = trimmed.split_whitespace().collect();
        if cols.len() != 11 && cols.len() != 14 {
            return Err(DatasetError::parse(path, line, format!("expected 11 or 14 columns, got {}", cols.len())));
        }
        let num = |k: usize| -> Result<f64> {
            cols[k].parse::<f64>().map_err(|_| DatasetError::parse(path, line, format!("column {} is not a number: {:?}", k + 1, cols[k])))
        };
        let class_id = cols[1].parse::<u32>().map_err(|_| DatasetError::parse(path, line, "bad class_id"))?;
        let track = cols[2].parse::<i64>().map_err(|_| DatasetError::parse(path, line, "bad track_id"))?;
        let (h, w, l) = (num(3)?, num(4)?, num(5)?);
        let center = Vector3::new(num(6)?, num(7)?, num(8)?);
        let yaw = num(9)?;
        if cols[10] != "world" {
            return Err(DatasetError::parse(path, line, format!("unsupported label frame {:?}", cols[10])));
        }
        let mut bbox = Box3D::new(center, BoxDims::new(l, w, h), yaw, class_id);
        if track >= 0 {
            bbox.track_id = Some(track);
        }
        if !yaw.is_finite() {
            return Err(DatasetError::invariant(path, format!("line {line}: non-finite yaw")));
        }
        bbox.validate().map_err(|e| DatasetError::invariant(path, format!("line {line}: {e}")))?;
        let mut record = LabelRecord::real(cols[0], bbox);
        if cols.len() == 14 {
            record.placement.source = match cols[11] {
                "real" => PlacementSource::Real,
                "simulated" => PlacementSource::Simulated,
                other => return Err(DatasetError::parse(path, line, format!("unknown source {other:?}"))),
            };
            if cols[12] != "-" {
                record.placement.asset_id = cols[12].to_string();
            }
            if cols[13] != "-" {
                for entry in cols[13].split(',') {
                    let parts: Vec<&str> = entry.split(':').collect();
                    let parsed = match parts.as_slice() {
                        [cam, px, flag] => px.parse::<usize>().ok().zip(match *flag {
                            "0" => Some(false),
                            "1" => Some(true),
                            _ => None,
                        })
                        .map(|(pixels, visible)| CameraVisibility { camera_id: cam.to_string(), pixels, visible }),
                        _ => None,
                    };
                    record.visibility.push(parsed.ok_or_else(|| DatasetError::parse(path, line, format!("bad visibility entry {entry:?}")))?);
                }
            }
        }
        labels.push(record);
    }
    Ok(labels)
}

// ---------------------------------------------------------------- point cloud

pub fn encode_cloud(points: &[Vector3<f64>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * 12);
    for p in points {
        for c in p.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out
}

/// Decodes little-endian float32 records of `stride` floats, keeping xyz.
pub fn decode_cloud(bytes: &[u8], stride: usize, path: &Path) -> Result<Vec<Vector3<f64>>> {
    let rec = 4 * stride;
    if !bytes.len().is_multiple_of(rec) {
        return Err(DatasetError::parse(path, 0, format!("size {} is not a multiple of {rec} bytes", bytes.len())));
    }
    let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
    let points: Vec<Vector3<f64>> = bytes.chunks_exact(rec).map(|c| Vector3::new(f(&c[0..4]), f(&c[4..8]), f(&c[8..12]))).collect();
    if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(DatasetError::invariant(path, format!("point {i} is not finite")));
    }
    Ok(points)
}

/// Projects world points into the camera, keeping the nearest depth per
/// pixel (nearest-integer pixel of each projection).
pub fn project_pointcloud(cloud: &[Vector3<f64>], extr: &CameraExtrinsics, intr: &CameraIntrinsics) -> SparseDepthRaster {
    let mut out = SparseDepthRaster::empty(intr.width, intr.height);
    for p in cloud {
        if let Projection::InFront(px) = project(p, extr, intr) {
            if let Some((x, y)) = out.values.pixel_at(px.u, px.v) {
                out.splat_min(x, y, px.depth);
            }
        }
    }
    out
}

// --------------------------------------------------------------------- images

pub fn encode_png_rgb(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("in-memory PNG encoding");
    buf.into_inner()
}

fn decode_png(path: &Path) -> Result<image::DynamicImage> {
    let bytes = read_bytes(path)?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| DatasetError::parse(path, 0, e.to_string()))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(decode_png(path)?.to_rgb8())
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width(), mask.height(), mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect())
            .expect("mask buffer size");
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("in-memory PNG encoding");
    buf.into_inner()
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = decode_png(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Raster::from_vec(w, h, img.into_raw().into_iter().map(|v| v != 0).collect()).expect("decoded size"))
}

/// Decoding parameters stored next to `depth_rel.png`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthEncoding {
    pub scale: f64,
    pub offset: f64,
}

impl DepthEncoding {
    /// Identity when every value is already an integer in u16 range,
    /// otherwise a min/max stretch over the full 16 bits.
    pub fn fit(values: &[f64]) -> Self {
        if values.iter().all(|v| v.fract() == 0.0 && (0.0..=65535.0).contains(v)) {
            return Self { scale: 1.0, offset: 0.0 };
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scale = if hi > lo { (hi - lo) / 65535.0 } else { 1.0 };
        Self { scale, offset: if lo.is_finite() { lo } else { 0.0 } }
    }

    pub fn quantize(&self, v: f64) -> u16 {
        ((v - self.offset) / self.scale).round().clamp(0.0, 65535.0) as u16
    }

    pub fn decode(&self, q: u16) -> f64 {
        self.offset + self.scale * q as f64
    }
}

pub fn encode_relative_depth(values: &Raster<f64>) -> (Vec<u8>, DepthEncoding) {
    let enc = DepthEncoding::fit(values.data());
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(values.width(), values.height(), values.data().iter().map(|&v| enc.quantize(v)).collect())
            .expect("depth buffer size");
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("in-memory PNG encoding");
    (buf.into_inner(), enc)
}

pub fn load_relative_depth(png: &Path, sidecar: &Path) -> Result<Raster<f64>> {
    let enc: DepthEncoding = read_json(sidecar)?;
    if !(enc.scale.is_finite() && enc.offset.is_finite() && enc.scale != 0.0) {
        return Err(DatasetError::invariant(sidecar, "depth encoding must be finite with nonzero scale"));
    }
    let img = decode_png(png)?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        _ => return Err(DatasetError::parse(png, 0, "relative depth must be a 16-bit grayscale PNG")),
    };
    let (w, h) = gray.dimensions();
    Ok(Raster::from_vec(w, h, gray.into_raw().into_iter().map(|q| enc.decode(q)).collect()).expect("decoded size"))
}

// --------------------------------------------------------------------- assets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetEntry {
    pub asset_id: String,
    /// OBJ path relative to the `assets/` directory.
    pub mesh: String,
    pub dims: BoxDims,
    pub class_id: u32,
    pub class_name: String,
    #[serde(default = "default_color")]
    pub color: [u8; 3],
}

fn default_color() -> [u8; 3] {
    [180, 180, 180]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssetManifest {
    pub assets: Vec<AssetEntry>,
}

impl AssetManifest {
    pub fn get(&self, asset_id: &str) -> Option<&AssetEntry> {
        self.assets.iter().find(|a| a.asset_id == asset_id)
    }
}

pub fn assets_dir(root: &Path) -> PathBuf {
    root.join("assets")
}

pub fn load_asset_manifest(root: &Path) -> Result<AssetManifest> {
    let path = assets_dir(root).join("manifest.json");
    let manifest: AssetManifest = read_json(&path)?;
    let mut seen = BTreeSet::new();
    for a in &manifest.assets {
        if !seen.insert(a.asset_id.as_str()) {
            return Err(DatasetError::invariant(&path, format!("duplicate asset id {:?}", a.asset_id)));
        }
        if !a.dims.is_valid() {
            return Err(DatasetError::invariant(&path, format!("asset {:?} has non-positive dims", a.asset_id)));
        }
    }
    Ok(manifest)
}

/// Loads and validates every mesh named by the manifest.
pub fn load_asset_library(root: &Path, manifest: &AssetManifest) -> Result<AssetLibrary> {
    let mut lib = AssetLibrary::new();
    for a in &manifest.assets {
        let path = assets_dir(root).join(&a.mesh);
        let text = read_text(&path)?;
        let mesh = AssetMesh::from_obj(&a.asset_id, &text, a.dims, a.color).map_err(|e| match e {
            crate::mesh::MeshError::Parse { line, message } => DatasetError::parse(&path, line, message),
            other => DatasetError::invariant(&path, other.to_string()),
        })?;
        lib.insert(a.asset_id.clone(), mesh);
    }
    Ok(lib)
}

pub fn mesh_to_obj(mesh: &AssetMesh) -> String {
    let mut out = format!("# {}\n", mesh.asset_id);
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for t in &mesh.triangles {
        out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    out
}

// ---------------------------------------------------------------------- scene

#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub id: String,
    pub image_path: PathBuf,
    pub image: RgbImage,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    pub relative_depth: Option<RelativeDepthRaster>,
    pub masks: Option<InstanceMaskSet>,
}

impl CameraFrame {
    pub fn camera(&self) -> Camera {
        Camera { id: self.id.clone(), intrinsics: self.intrinsics, extrinsics: self.extrinsics }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub frame_id: String,
    pub cameras: Vec<CameraFrame>,
    pub labels: Vec<LabelRecord>,
    /// World-frame LiDAR points.
    pub cloud: Vec<Vector3<f64>>,
}

impl SceneFrame {
    pub fn camera(&self, id: &str) -> Option<&CameraFrame> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn rig(&self) -> CameraRig {
        CameraRig::new(self.cameras.iter().map(CameraFrame::camera).collect())
    }

    pub fn boxes(&self) -> Vec<Box3D> {
        self.labels.iter().map(|l| l.placement.bbox).collect()
    }
}

pub fn frames_dir(root: &Path) -> PathBuf {
    root.join("frames")
}

pub fn frame_dir(root: &Path, frame_id: &str) -> PathBuf {
    frames_dir(root).join(frame_id)
}

/// Frame ids under `root/frames`, sorted.
pub fn list_frames(root: &Path) -> Result<Vec<String>> {
    sorted_subdirs(&frames_dir(root), |_| true)
}

/// Camera directory names of one frame, sorted.
pub fn list_cameras(root: &Path, frame_id: &str) -> Result<Vec<String>> {
    sorted_subdirs(&frame_dir(root, frame_id), |_| true)
}

pub fn calib_path(root: &Path, frame_id: &str, camera_id: &str) -> PathBuf {
    frame_dir(root, frame_id).join(camera_id).join("calib.json")
}

pub fn image_path(root: &Path, frame_id: &str, camera_id: &str) -> PathBuf {
    frame_dir(root, frame_id).join(camera_id).join("image.png")
}

/// Labels of one frame without touching images or point clouds.
pub fn load_labels(root: &Path, frame_id: &str) -> Result<Vec<LabelRecord>> {
    let path = frame_dir(root, frame_id).join("labels.txt");
    parse_labels(&read_text(&path)?, &path)
}

fn sorted_subdirs(dir: &Path, keep: impl Fn(&str) -> bool) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => DatasetError::MissingFile(dir.to_path_buf()),
        _ => DatasetError::io(dir, e),
    })?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| DatasetError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_dir() && !name.starts_with('.') && keep(&name) {
            out.push(name);
        }
    }
    out.sort();
    Ok(out)
}

fn check_dims(path: &Path, expected: (u32, u32), got: (u32, u32)) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(DatasetError::invariant(path, format!("size {got:?} does not match the camera's {expected:?}")))
    }
}

/// Loads and fully validates one frame.
pub fn load_scene(root: &Path, frame_id: &str) -> Result<SceneFrame> {
    let dir = frame_dir(root, frame_id);
    if !dir.is_dir() {
        return Err(DatasetError::MissingFile(dir));
    }
    let label_path = dir.join("labels.txt");
    let labels = parse_labels(&read_text(&label_path)?, &label_path)?;

    let cloud = {
        let xyz = dir.join("cloud.bin");
        let xyzi = dir.join("cloud_xyzi.bin");
        if xyz.exists() || !xyzi.exists() {
            decode_cloud(&read_bytes(&xyz)?, 3, &xyz)?
        } else {
            decode_cloud(&read_bytes(&xyzi)?, 4, &xyzi)?
        }
    };

    let mut cameras = Vec::new();
    for cam in sorted_subdirs(&dir, |_| true)? {
        let cdir = dir.join(&cam);
        let calib_path = cdir.join("calib.json");
        let (calib, extrinsics) = load_calib(&calib_path)?;
        if calib.camera_id != cam {
            return Err(DatasetError::invariant(&calib_path, format!("camera_id {:?} does not match directory {cam:?}", calib.camera_id)));
        }
        let intr = calib.intrinsics;
        let dims = (intr.width, intr.height);
        let image_path = cdir.join("image.png");
        let image = load_rgb(&image_path)?;
        check_dims(&image_path, dims, image.dimensions())?;

        let depth_png = cdir.join("depth_rel.png");
        let relative_depth = if depth_png.exists() {
            let values = load_relative_depth(&depth_png, &cdir.join("depth_rel.json"))?;
            check_dims(&depth_png, dims, values.dims())?;
            Some(RelativeDepthRaster { camera_id: cam.clone(), values })
        } else {
            None
        };

        let mask_dir = cdir.join("masks");
        let masks = if mask_dir.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(&mask_dir)
                .map_err(|e| DatasetError::io(&mask_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "png"))
                .collect();
            files.sort();
            let mut masks = Vec::with_capacity(files.len());
            for f in &files {
                let m = load_mask(f)?;
                check_dims(f, dims, m.dims())?;
                masks.push(m);
            }
            Some(InstanceMaskSet { camera_id: cam.clone(), masks })
        } else {
            None
        };

        cameras.push(CameraFrame { id: cam, image_path, image, intrinsics: intr, extrinsics, relative_depth, masks });
    }
    if cameras.is_empty() {
        return Err(DatasetError::invariant(&dir, "frame has no camera directories"));
    }
    Ok(SceneFrame { frame_id: frame_id.to_string(), cameras, labels, cloud })
}

/// Paths written by [`save_scene`], relative to the output root.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SaveManifest {
    pub images: Vec<PathBuf>,
    pub labels: PathBuf,
    pub calibration: Vec<PathBuf>,
    pub cloud: PathBuf,
    pub auxiliary: Vec<PathBuf>,
}

impl SaveManifest {
    pub fn all(&self) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = self.images.iter().chain(&self.calibration).chain(&self.auxiliary).cloned().collect();
        v.push(self.labels.clone());
        v.push(self.cloud.clone());
        v.sort();
        v
    }
}

/// Writes `frame` under `out_root/frames/<frame_id>/`.
pub fn save_scene(frame: &SceneFrame, out_root: &Path) -> Result<SaveManifest> {
    let rel_dir = Path::new("frames").join(&frame.frame_id);
    let put = |rel: PathBuf, bytes: &[u8]| -> Result<PathBuf> {
        write_file(&out_root.join(&rel), bytes)?;
        Ok(rel)
    };
    let mut manifest = SaveManifest {
        labels: put(rel_dir.join("labels.txt"), format_labels(&frame.labels).as_bytes())?,
        cloud: put(rel_dir.join("cloud.bin"), &encode_cloud(&frame.cloud))?,
        ..Default::default()
    };
    for cam in &frame.cameras {
        let cdir = rel_dir.join(&cam.id);
        manifest.images.push(put(cdir.join("image.png"), &encode_png_rgb(&cam.image))?);
        let calib = CalibFile::new(&cam.id, cam.intrinsics, &cam.extrinsics);
        manifest.calibration.push(put(cdir.join("calib.json"), &to_json_bytes(&calib))?);
        if let Some(rel) = &cam.relative_depth {
            let (png, enc) = encode_relative_depth(&rel.values);
            manifest.auxiliary.push(put(cdir.join("depth_rel.png"), &png)?);
            manifest.auxiliary.push(put(cdir.join("depth_rel.json"), &to_json_bytes(&enc))?);
        }
        if let Some(masks) = &cam.masks {
            for (i, m) in masks.masks.iter().enumerate() {
                manifest.auxiliary.push(put(cdir.join("masks").join(format!("{i:03}.png")), &encode_mask(m))?);
            }
        }
    }
    Ok(manifest)
}

// ------------------------------------------------------------------ keypoints

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeypointFile {
    pub cameras: Vec<KeypointSet>,
}

pub fn keypoints_path(root: &Path, frame_id: &str) -> PathBuf {
    frame_dir(root, frame_id).join("keypoints.json")
}

pub fn load_keypoints(path: &Path) -> Result<KeypointFile> {
    read_json(path)
}
