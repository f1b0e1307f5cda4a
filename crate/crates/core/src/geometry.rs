//! Pinhole cameras, rigid world-to-camera transforms and oriented 3D boxes.
//!
//! World frame is right-handed with +z up. Camera frame follows the usual
//! computer-vision convention: +x right, +y down, +z along the optical axis.
//! Pixel centers sit at integer coordinates, so pixel `(i, j)` covers
//! `u in [i - 0.5, i + 0.5)`, `v in [j - 0.5, j + 0.5)`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Camera-frame depths at or below this are treated as behind the camera.
pub const NEAR_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid extrinsics: {0}")]
    InvalidExtrinsics(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx.is_finite() && self.fy.is_finite() && self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics("image size must be nonzero".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside image {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Every pinhole parameter multiplied by `s`; image size is scaled and rounded up.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: (self.width as f64 * s).ceil() as u32,
            height: (self.height as f64 * s).ceil() as u32,
        }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Ray direction in the camera frame through pixel `(u, v)`, with unit z.
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Rigid transform from the world (LiDAR) frame into the camera frame:
/// `p_cam = R * p_world + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraExtrinsics {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for CameraExtrinsics {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraExtrinsics {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Builds extrinsics from a rotation matrix, rejecting anything that is not
    /// orthonormal with determinant +1 (tolerance 1e-6).
    pub fn from_matrix(r: &Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !ortho.is_finite() || ortho > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(GeometryError::InvalidExtrinsics(format!(
                "rotation matrix is not in SO(3): |RR^T - I| = {ortho:e}, det = {det}"
            )));
        }
        let rot = Rotation3::from_matrix_unchecked(*r);
        Ok(Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation))
    }

    /// Camera placed at `eye` looking at `target`, with world +z as the up hint.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let up_hint = if forward.cross(&Vector3::z()).norm() < 1e-9 { Vector3::y() } else { Vector3::z() };
        let right = forward.cross(&up_hint).normalize();
        let down = forward.cross(&right);
        // Rows are the camera axes expressed in world coordinates.
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rot = Rotation3::from_matrix_unchecked(r);
        let rotation = UnitQuaternion::from_rotation_matrix(&rot);
        Self { rotation, translation: -(rotation * eye) }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_world + self.translation
    }

    pub fn to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p_cam - self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.to_world(&Vector3::zeros())
    }

    /// Inverse transform (camera to world), useful for import shims.
    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self { rotation: inv, translation: -(inv * self.translation) }
    }

    /// Rotation angle (degrees) and translation distance (meters) between two poses.
    pub fn distance_to(&self, other: &Self) -> (f64, f64) {
        let angle = self.rotation.angle_to(&other.rotation).to_degrees();
        let trans = (self.translation - other.translation).norm();
        (angle, trans)
    }
}

/// Length (along heading), width and height in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDims {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl BoxDims {
    pub fn new(length: f64, width: f64, height: f64) -> Self {
        Self { length, width, height }
    }

    pub fn is_valid(&self) -> bool {
        [self.length, self.width, self.height].iter().all(|d| d.is_finite() && *d > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vector3<f64>,
    pub dims: BoxDims,
    pub yaw: f64,
    pub class_id: u32,
    pub track_id: Option<i64>,
}

impl Box3D {
    /// Builds a box, normalizing yaw into (-pi, pi].
    pub fn new(center: Vector3<f64>, dims: BoxDims, yaw: f64, class_id: u32) -> Self {
        Self { center, dims, yaw: normalize_angle(yaw), class_id, track_id: None }
    }

    pub fn with_track(mut self, track_id: i64) -> Self {
        self.track_id = Some(track_id);
        self
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.dims.is_valid() {
            return Err(GeometryError::InvalidBox(format!(
                "dimensions must be positive, got {:?}",
                self.dims
            )));
        }
        if !(self.center.iter().all(|c| c.is_finite()) && self.yaw.is_finite()) {
            return Err(GeometryError::InvalidBox("non-finite center or yaw".into()));
        }
        Ok(())
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        corners(self)
    }

    /// Ground-plane footprint corners, counter-clockwise seen from above.
    pub fn footprint(&self) -> [Vector2<f64>; 4] {
        let c = self.corners();
        [c[0].xy(), c[1].xy(), c[2].xy(), c[3].xy()]
    }

    pub fn z_range(&self) -> (f64, f64) {
        let h = self.dims.height / 2.0;
        (self.center.z - h, self.center.z + h)
    }
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Corner offsets in the box frame (+x forward along length, +y left, +z up),
/// as multiples of the half dimensions.
///
/// Bottom face first, counter-clockwise seen from above starting at the
/// front-right corner, then the top face in the same order. Corner `i + 4`
/// sits directly above corner `i`.
pub const CORNER_SIGNS: [[f64; 3]; 8] = [
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [-1.0, -1.0, 1.0],
];

pub fn corners(b: &Box3D) -> [Vector3<f64>; 8] {
    let (s, c) = b.yaw.sin_cos();
    let half = Vector3::new(b.dims.length, b.dims.width, b.dims.height) / 2.0;
    CORNER_SIGNS.map(|sign| {
        let x = sign[0] * half.x;
        let y = sign[1] * half.y;
        let z = sign[2] * half.z;
        b.center + Vector3::new(c * x - s * y, s * x + c * y, z)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
    /// Camera-frame z in meters; always positive.
    pub depth: f64,
}

impl Pixel {
    pub fn uv(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Projection {
    InFront(Pixel),
    Behind,
}

impl Projection {
    pub fn pixel(self) -> Option<Pixel> {
        match self {
            Projection::InFront(p) => Some(p),
            Projection::Behind => None,
        }
    }
}

/// Projects a camera-frame point. Pixels may fall outside the image.
pub fn project_camera_point(p_cam: &Vector3<f64>, intr: &CameraIntrinsics) -> Projection {
    if p_cam.z <= NEAR_EPSILON {
        return Projection::Behind;
    }
    Projection::InFront(Pixel {
        u: intr.fx * p_cam.x / p_cam.z + intr.cx,
        v: intr.fy * p_cam.y / p_cam.z + intr.cy,
        depth: p_cam.z,
    })
}

pub fn project(point: &Vector3<f64>, extr: &CameraExtrinsics, intr: &CameraIntrinsics) -> Projection {
    project_camera_point(&extr.to_camera(point), intr)
}

/// Inverse of [`project`] for a pixel with known depth.
pub fn back_project(px: &Pixel, extr: &CameraExtrinsics, intr: &CameraIntrinsics) -> Vector3<f64> {
    extr.to_world(&(intr.unproject(px.u, px.v) * px.depth))
}

/// Frustum membership of a single world point.
pub fn point_in_view(point: &Vector3<f64>, extr: &CameraExtrinsics, intr: &CameraIntrinsics) -> bool {
    match project(point, extr, intr) {
        Projection::InFront(px) => intr.contains(px.u, px.v),
        Projection::Behind => false,
    }
}

/// Per-camera visibility predicate: the box center projects in front of the
/// camera and inside the image. Occlusion is not considered.
pub fn in_view(b: &Box3D, extr: &CameraExtrinsics, intr: &CameraIntrinsics) -> bool {
    point_in_view(&b.center, extr, intr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub id: String,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

impl Camera {
    pub fn project(&self, point: &Vector3<f64>) -> Projection {
        project(point, &self.extrinsics, &self.intrinsics)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Self {
        Self { cameras }
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Camera> {
        self.cameras.iter().find(|c| c.id == id)
    }
}
