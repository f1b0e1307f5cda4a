//! Software z-buffer rasterizer that composites asset meshes onto background
//! frames, honoring a per-pixel occlusion depth.

use crate::depth::ForegroundDepth;
use crate::geometry::{Camera, CameraExtrinsics, CameraIntrinsics, GeometryError};
use crate::mesh::{AssetMesh, MeshError};
use crate::placement::Placement;
use crate::raster::{Mask, Raster};
use image::RgbImage;
use nalgebra::{Rotation3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Near clipping plane, meters in front of the camera.
pub const NEAR_PLANE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch { expected: (u32, u32), got: (u32, u32) },
    #[error("unknown asset {0:?}")]
    UnknownAsset(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Directional light for flat Lambert shading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lighting {
    /// Direction the light travels, world frame. Need not be normalized.
    pub direction: [f64; 3],
    /// Fraction of the base color kept on faces turned away from the light.
    pub ambient: f64,
}

impl Default for Lighting {
    fn default() -> Self {
        Self { direction: [-0.4, -0.3, -1.0], ambient: 0.35 }
    }
}

impl Lighting {
    fn shade(&self, base: [u8; 3], normal: &Vector3<f64>) -> [u8; 3] {
        let l = Vector3::from(self.direction);
        let lambert = match (normal.try_normalize(0.0), l.try_normalize(0.0)) {
            (Some(n), Some(l)) => (-n.dot(&l)).max(0.0),
            _ => 0.0,
        };
        let k = (self.ambient + (1.0 - self.ambient) * lambert).clamp(0.0, 1.0);
        base.map(|c| (c as f64 * k).round().clamp(0.0, 255.0) as u8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderStatus {
    Rendered,
    /// Every triangle lay behind the near plane; nothing was touched.
    EmptyAfterClipping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DrawOutcome {
    pub status: RenderStatus,
    /// Pixel writes that passed both depth tests (counts overwrites).
    pub writes: usize,
}

/// Background frame plus everything rendered on top of it so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub image: RgbImage,
    /// Nearest rendered depth in meters, `+inf` where nothing was drawn.
    pub depth: Raster<f64>,
    pub coverage: Mask,
    /// Instance id owning each pixel, 0 for background.
    pub instances: Raster<u32>,
}

impl Composite {
    pub fn new(background: RgbImage) -> Self {
        let (w, h) = background.dimensions();
        Self {
            image: background,
            depth: Raster::filled(w, h, f64::INFINITY),
            coverage: Raster::filled(w, h, false),
            instances: Raster::filled(w, h, 0),
        }
    }

    pub fn dims(&self) -> (u32, u32) {
        self.image.dimensions()
    }

    /// Final pixel count owned by `instance`.
    pub fn instance_pixels(&self, instance: u32) -> usize {
        self.instances.data().iter().filter(|&&i| i == instance).count()
    }

    pub fn instance_mask(&self, instance: u32) -> Mask {
        self.instances.map(|&i| i == instance)
    }

    /// Renders `mesh` scaled and posed to `placement.bbox`. A pixel is
    /// written iff the fragment is nearer than both the z-buffer and
    /// `occlusion` at that pixel.
    #[allow(clippy::too_many_arguments)]
    pub fn draw(
        &mut self,
        mesh: &AssetMesh,
        placement: &Placement,
        instance: u32,
        extr: &CameraExtrinsics,
        intr: &CameraIntrinsics,
        occlusion: &ForegroundDepth,
        lighting: &Lighting,
    ) -> Result<DrawOutcome, RenderError> {
        intr.validate()?;
        let dims = self.dims();
        if (intr.width, intr.height) != dims {
            return Err(RenderError::DimensionMismatch { expected: dims, got: (intr.width, intr.height) });
        }
        if occlusion.dims() != dims {
            return Err(RenderError::DimensionMismatch { expected: dims, got: occlusion.dims() });
        }
        placement.bbox.validate()?;

        let world = posed_vertices(mesh, placement);
        let cam: Vec<Vector3<f64>> = world.iter().map(|p| extr.to_camera(p)).collect();
        let mut any_in_front = false;
        let mut writes = 0;
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let [a, b, c] = tri.map(|i| cam[i as usize]);
            if a.z < NEAR_PLANE && b.z < NEAR_PLANE && c.z < NEAR_PLANE {
                continue;
            }
            any_in_front = true;
            // Camera sits at the origin, so the view ray to the face is `a`.
            if (b - a).cross(&(c - a)).dot(&a) >= 0.0 {
                continue;
            }
            let [wa, wb, wc] = tri.map(|i| world[i as usize]);
            let color = lighting.shade(mesh.colors[t], &(wb - wa).cross(&(wc - wa)));
            let poly = clip_near(&[a, b, c]);
            for k in 1..poly.len().saturating_sub(1) {
                writes += self.fill(&[poly[0], poly[k], poly[k + 1]], intr, occlusion, color, instance);
            }
        }
        let status = if any_in_front { RenderStatus::Rendered } else { RenderStatus::EmptyAfterClipping };
        Ok(DrawOutcome { status, writes })
    }

    fn fill(
        &mut self,
        tri: &[Vector3<f64>; 3],
        intr: &CameraIntrinsics,
        occlusion: &ForegroundDepth,
        color: [u8; 3],
        instance: u32,
    ) -> usize {
        let s = tri.map(|p| (intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy, 1.0 / p.z));
        let area = edge(s[0], s[1], s[2].0, s[2].1);
        if area.abs() < 1e-12 || !area.is_finite() {
            return 0;
        }
        let (w, h) = self.dims();
        let lo_u = s.iter().map(|v| v.0).fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let hi_u = s.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max).floor().min(w as f64 - 1.0);
        let lo_v = s.iter().map(|v| v.1).fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let hi_v = s.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max).floor().min(h as f64 - 1.0);
        if lo_u > hi_u || lo_v > hi_v {
            return 0;
        }
        let mut writes = 0;
        for y in lo_v as u32..=hi_v as u32 {
            for x in lo_u as u32..=hi_u as u32 {
                let (px, py) = (x as f64, y as f64);
                let b0 = edge(s[1], s[2], px, py) / area;
                let b1 = edge(s[2], s[0], px, py) / area;
                let b2 = edge(s[0], s[1], px, py) / area;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                let z = 1.0 / (b0 * s[0].2 + b1 * s[1].2 + b2 * s[2].2);
                let i = self.depth.index(x, y);
                if z < self.depth.data()[i] && z < occlusion.values.data()[i] {
                    self.depth.data_mut()[i] = z;
                    self.coverage.data_mut()[i] = true;
                    self.instances.data_mut()[i] = instance;
                    self.image.put_pixel(x, y, image::Rgb(color));
                    writes += 1;
                }
            }
        }
        writes
    }
}

fn edge(a: (f64, f64, f64), b: (f64, f64, f64), px: f64, py: f64) -> f64 {
    (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0)
}

/// One Sutherland-Hodgman pass against `z >= NEAR_PLANE`.
fn clip_near(poly: &[Vector3<f64>; 3]) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let (a, b) = (poly[i], poly[(i + 1) % 3]);
        let (a_in, b_in) = (a.z >= NEAR_PLANE, b.z >= NEAR_PLANE);
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (NEAR_PLANE - a.z) / (b.z - a.z);
            let mut p = a + (b - a) * t;
            p.z = NEAR_PLANE;
            out.push(p);
        }
    }
    out
}

/// Mesh vertices in world coordinates: the mesh bounding box is stretched
/// per axis onto the placement box, rotated by yaw and moved to its center.
pub fn posed_vertices(mesh: &AssetMesh, placement: &Placement) -> Vec<Vector3<f64>> {
    let b = &placement.bbox;
    let (lo, hi) = mesh.bounds();
    let ext = hi - lo;
    let mid = (lo + hi) / 2.0;
    let scale = Vector3::new(b.dims.length / ext.x, b.dims.width / ext.y, b.dims.height / ext.z);
    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), b.yaw);
    let base = b.center - Vector3::new(0.0, 0.0, b.dims.height / 2.0);
    mesh.vertices
        .iter()
        .map(|v| {
            let local = Vector3::new(v.x - mid.x, v.y - mid.y, v.z - lo.z).component_mul(&scale);
            rot * local + base
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub composite: Composite,
    pub status: RenderStatus,
}

/// Single-asset render onto a fresh copy of `background`.
pub fn rasterize(
    mesh: &AssetMesh,
    placement: &Placement,
    extr: &CameraExtrinsics,
    intr: &CameraIntrinsics,
    occlusion: &ForegroundDepth,
    background: &RgbImage,
    lighting: &Lighting,
) -> Result<Rendered, RenderError> {
    let mut composite = Composite::new(background.clone());
    let outcome = composite.draw(mesh, placement, 1, extr, intr, occlusion, lighting)?;
    Ok(Rendered { composite, status: outcome.status })
}

pub type AssetLibrary = BTreeMap<String, AssetMesh>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub lighting: Lighting,
    /// A simulated label is visible in a camera when it owns more pixels than this.
    pub visible_threshold: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { lighting: Lighting::default(), visible_threshold: 50 }
    }
}

pub struct CameraView<'a> {
    pub camera: &'a Camera,
    pub background: &'a RgbImage,
    /// `None` means nothing in the frame occludes inserted assets.
    pub occlusion: Option<&'a ForegroundDepth>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CameraVisibility {
    pub camera_id: String,
    pub pixels: usize,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLabel {
    pub placement: Placement,
    /// Empty for real labels.
    pub visibility: Vec<CameraVisibility>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraComposite {
    pub camera_id: String,
    pub result: Result<Composite, RenderError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRender {
    pub composites: Vec<CameraComposite>,
    /// Real labels first, then one entry per placement in input order.
    pub labels: Vec<SceneLabel>,
}

/// Renders every placement into every view with one shared z-buffer per
/// camera. Placement `i` gets instance id `i + 1`. A failing camera yields
/// an `Err` composite and zero visibility; the others are unaffected.
pub fn render_scene(
    views: &[CameraView<'_>],
    real: &[Placement],
    placements: &[Placement],
    assets: &AssetLibrary,
    settings: &RenderSettings,
) -> SceneRender {
    let composites: Vec<CameraComposite> = views
        .par_iter()
        .map(|view| CameraComposite {
            camera_id: view.camera.id.clone(),
            result: render_view(view, placements, assets, settings),
        })
        .collect();

    let mut labels: Vec<SceneLabel> = real.iter().map(|p| SceneLabel { placement: p.clone(), visibility: vec![] }).collect();
    for (i, p) in placements.iter().enumerate() {
        let visibility = composites
            .iter()
            .map(|c| {
                let pixels = c.result.as_ref().map_or(0, |comp| comp.instance_pixels(i as u32 + 1));
                CameraVisibility { camera_id: c.camera_id.clone(), pixels, visible: pixels > settings.visible_threshold }
            })
            .collect();
        labels.push(SceneLabel { placement: p.clone(), visibility });
    }
    SceneRender { composites, labels }
}

fn render_view(
    view: &CameraView<'_>,
    placements: &[Placement],
    assets: &AssetLibrary,
    settings: &RenderSettings,
) -> Result<Composite, RenderError> {
    let meshes = placements
        .iter()
        .map(|p| assets.get(&p.asset_id).ok_or_else(|| RenderError::UnknownAsset(p.asset_id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let (w, h) = view.background.dimensions();
    let unoccluded;
    let occlusion = match view.occlusion {
        Some(o) => o,
        None => {
            unoccluded = ForegroundDepth::unoccluded(w, h);
            &unoccluded
        }
    };
    let cam = view.camera;
    let mut composite = Composite::new(view.background.clone());
    if placements.is_empty() && ((cam.intrinsics.width, cam.intrinsics.height) != (w, h) || occlusion.dims() != (w, h)) {
        return Err(RenderError::DimensionMismatch { expected: (w, h), got: (cam.intrinsics.width, cam.intrinsics.height) });
    }
    for (i, (p, mesh)) in placements.iter().zip(meshes).enumerate() {
        composite.draw(mesh, p, i as u32 + 1, &cam.extrinsics, &cam.intrinsics, occlusion, &settings.lighting)?;
    }
    Ok(composite)
}
