//! Camera extrinsic refinement from user-adjusted 2D keypoints.
//!
//! Each keypoint pins one corner of a labelled 3D box to a target pixel. The
//! pose correction is parameterized multiplicatively, `R = exp([w]x) * R0` and
//! `T = T0 + dt`, so every candidate stays on SO(3) and BFGS can run
//! unconstrained over the 6-vector `(w, dt)`.

use crate::bfgs::{self, BfgsConfig};
use crate::geometry::{Box3D, CameraExtrinsics, CameraIntrinsics, NEAR_EPSILON};
use nalgebra::{Matrix3, SVector, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::f64::consts::PI;
use thiserror::Error;

pub type Vector6 = SVector<f64, 6>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtrinsicError {
    #[error(
        "insufficient keypoints: {entries} entries over {boxes} boxes; need >= 4 spanning >= 2 boxes or >= 6 on one box"
    )]
    InsufficientKeypoints { entries: usize, boxes: usize },
    #[error("objective is not finite at the start pose")]
    NonFinite,
    #[error("keypoint {entry} projects behind the camera")]
    BehindCamera { entry: usize },
    #[error("keypoint {entry} references unknown box {box_ref}")]
    UnknownBox { entry: usize, box_ref: usize },
    #[error("keypoint {entry} has corner index {corner_index}, expected 0..8")]
    InvalidCorner { entry: usize, corner_index: usize },
    #[error("keypoint {entry} target ({u}, {v}) is too far outside the image")]
    TargetOutOfRange { entry: usize, u: f64, v: f64 },
}

/// One corner-to-pixel constraint. `box_ref` indexes the frame's label list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub box_ref: usize,
    pub corner_index: usize,
    pub target: [f64; 2],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub camera_id: String,
    pub entries: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn new(camera_id: impl Into<String>) -> Self {
        Self { camera_id: camera_id.into(), entries: Vec::new() }
    }

    /// Inserts a keypoint, replacing any existing entry for the same corner.
    pub fn upsert(&mut self, kp: Keypoint) {
        match self
            .entries
            .iter_mut()
            .find(|e| e.box_ref == kp.box_ref && e.corner_index == kp.corner_index)
        {
            Some(e) => e.target = kp.target,
            None => self.entries.push(kp),
        }
    }

    pub fn distinct_boxes(&self) -> usize {
        self.entries.iter().map(|e| e.box_ref).collect::<BTreeSet<_>>().len()
    }

    pub fn is_identifiable(&self) -> bool {
        let n = self.entries.len();
        let boxes = self.distinct_boxes();
        (n >= 4 && boxes >= 2) || n >= 6
    }

    /// Checks indices and target ranges against the label list and image.
    pub fn validate(&self, boxes: &[Box3D], intr: &CameraIntrinsics) -> Result<(), ExtrinsicError> {
        let (w, h) = (intr.width as f64, intr.height as f64);
        for (entry, kp) in self.entries.iter().enumerate() {
            if kp.box_ref >= boxes.len() {
                return Err(ExtrinsicError::UnknownBox { entry, box_ref: kp.box_ref });
            }
            if kp.corner_index >= 8 {
                return Err(ExtrinsicError::InvalidCorner { entry, corner_index: kp.corner_index });
            }
            let [u, v] = kp.target;
            let inside = u.is_finite()
                && v.is_finite()
                && (-0.25 * w..=1.25 * w).contains(&u)
                && (-0.25 * h..=1.25 * h).contains(&v);
            if !inside {
                return Err(ExtrinsicError::TargetOutOfRange { entry, u, v });
            }
        }
        Ok(())
    }

    fn resolve(&self, boxes: &[Box3D], intr: &CameraIntrinsics) -> Result<Vec<Correspondence>, ExtrinsicError> {
        self.validate(boxes, intr)?;
        Ok(self
            .entries
            .iter()
            .map(|kp| Correspondence {
                world: boxes[kp.box_ref].corners()[kp.corner_index],
                target: Vector2::from(kp.target),
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy)]
struct Correspondence {
    world: Vector3<f64>,
    target: Vector2<f64>,
}

/// Pose correction: axis-angle rotation (radians) applied on the left, and an
/// additive translation (meters).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicDelta {
    pub rot: Vector3<f64>,
    pub trans: Vector3<f64>,
}

impl ExtrinsicDelta {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(x: &Vector6) -> Self {
        Self { rot: x.fixed_rows::<3>(0).into(), trans: x.fixed_rows::<3>(3).into() }
    }

    pub fn to_vector(&self) -> Vector6 {
        Vector6::new(self.rot.x, self.rot.y, self.rot.z, self.trans.x, self.trans.y, self.trans.z)
    }

    pub fn compose(&self, base: &CameraExtrinsics) -> CameraExtrinsics {
        CameraExtrinsics {
            rotation: UnitQuaternion::from_scaled_axis(self.rot) * base.rotation,
            translation: base.translation + self.trans,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Closed-form gradient through the SO(3) left Jacobian.
    Analytic,
    /// Central differences, `h = 1e-7` rad on rotation and `1e-6` m on translation.
    CentralDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub gradient: GradientMode,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { grad_tol: 1e-8, max_iter: 200, gradient: GradientMode::Analytic }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub initial_rmse: f64,
    pub final_rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    pub optimized: CameraExtrinsics,
    pub delta: ExtrinsicDelta,
    pub gradient_norm: f64,
    pub keypoints: usize,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left Jacobian of the SO(3) exponential: `exp(w + d) ~= exp(J(w) d) exp(w)`.
fn left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = skew(w);
    let (a, b) = if theta2 < 1e-8 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let t = theta2.sqrt();
        ((1.0 - t.cos()) / theta2, (t - t.sin()) / (theta2 * t))
    };
    Matrix3::identity() + k * a + k * k * b
}

fn residual_sum(
    base: &CameraExtrinsics,
    delta: &ExtrinsicDelta,
    intr: &CameraIntrinsics,
    pts: &[Correspondence],
) -> Result<f64, ExtrinsicError> {
    let pose = delta.compose(base);
    let mut sum = 0.0;
    for (entry, c) in pts.iter().enumerate() {
        let q = pose.to_camera(&c.world);
        if q.z <= NEAR_EPSILON {
            return Err(ExtrinsicError::BehindCamera { entry });
        }
        let du = intr.fx * q.x / q.z + intr.cx - c.target.x;
        let dv = intr.fy * q.y / q.z + intr.cy - c.target.y;
        sum += du * du + dv * dv;
    }
    Ok(sum)
}

fn residual_and_gradient(
    base: &CameraExtrinsics,
    delta: &ExtrinsicDelta,
    intr: &CameraIntrinsics,
    pts: &[Correspondence],
) -> Result<(f64, Vector6), ExtrinsicError> {
    let exp_w = UnitQuaternion::from_scaled_axis(delta.rot);
    let rot = exp_w * base.rotation;
    let jl = left_jacobian(&delta.rot);
    let mut sum = 0.0;
    let mut grad = Vector6::zeros();
    for (entry, c) in pts.iter().enumerate() {
        let rotated = rot * c.world;
        let q = rotated + base.translation + delta.trans;
        if q.z <= NEAR_EPSILON {
            return Err(ExtrinsicError::BehindCamera { entry });
        }
        let iz = 1.0 / q.z;
        let du = intr.fx * q.x * iz + intr.cx - c.target.x;
        let dv = intr.fy * q.y * iz + intr.cy - c.target.y;
        sum += du * du + dv * dv;
        // d f / d q as a row vector.
        let dq = Vector3::new(
            2.0 * du * intr.fx * iz,
            2.0 * dv * intr.fy * iz,
            -2.0 * (du * intr.fx * q.x + dv * intr.fy * q.y) * iz * iz,
        );
        let d_rot = -(skew(&rotated) * jl).transpose() * dq;
        let mut g_rot = grad.fixed_rows_mut::<3>(0);
        g_rot += d_rot;
        let mut g_trans = grad.fixed_rows_mut::<3>(3);
        g_trans += dq;
    }
    Ok((sum, grad))
}

fn central_difference(
    base: &CameraExtrinsics,
    x: &Vector6,
    intr: &CameraIntrinsics,
    pts: &[Correspondence],
    steps: [f64; 6],
) -> Result<Vector6, ExtrinsicError> {
    let mut g = Vector6::zeros();
    for i in 0..6 {
        let mut plus = *x;
        let mut minus = *x;
        plus[i] += steps[i];
        minus[i] -= steps[i];
        let fp = residual_sum(base, &ExtrinsicDelta::from_vector(&plus), intr, pts)?;
        let fm = residual_sum(base, &ExtrinsicDelta::from_vector(&minus), intr, pts)?;
        g[i] = (fp - fm) / (2.0 * steps[i]);
    }
    Ok(g)
}

const FD_STEPS: [f64; 6] = [1e-7, 1e-7, 1e-7, 1e-6, 1e-6, 1e-6];

/// Sum of squared pixel distances between projected box corners and their
/// target keypoints under `delta` composed onto `extr`.
pub fn reprojection_residual(
    extr: &CameraExtrinsics,
    delta: &ExtrinsicDelta,
    intr: &CameraIntrinsics,
    keypoints: &KeypointSet,
    boxes: &[Box3D],
) -> Result<f64, ExtrinsicError> {
    let pts = keypoints.resolve(boxes, intr)?;
    residual_sum(extr, delta, intr, &pts)
}

/// Gradient of [`reprojection_residual`] with respect to `(rot, trans)` as
/// computed by the optimizer for the given mode.
pub fn residual_gradient(
    extr: &CameraExtrinsics,
    delta: &ExtrinsicDelta,
    intr: &CameraIntrinsics,
    keypoints: &KeypointSet,
    boxes: &[Box3D],
    mode: GradientMode,
) -> Result<Vector6, ExtrinsicError> {
    let pts = keypoints.resolve(boxes, intr)?;
    match mode {
        GradientMode::Analytic => residual_and_gradient(extr, delta, intr, &pts).map(|(_, g)| g),
        GradientMode::CentralDifference => central_difference(extr, &delta.to_vector(), intr, &pts, FD_STEPS),
    }
}

/// Refines `extr0` so projected box corners land on their keypoint targets.
pub fn optimize(
    extr0: &CameraExtrinsics,
    intr: &CameraIntrinsics,
    keypoints: &KeypointSet,
    boxes: &[Box3D],
    config: &OptimizerConfig,
) -> Result<OptimizationReport, ExtrinsicError> {
    if !keypoints.is_identifiable() {
        return Err(ExtrinsicError::InsufficientKeypoints {
            entries: keypoints.entries.len(),
            boxes: keypoints.distinct_boxes(),
        });
    }
    let pts = keypoints.resolve(boxes, intr)?;
    let n = pts.len() as f64;

    let initial = residual_sum(extr0, &ExtrinsicDelta::zero(), intr, &pts)?;
    if !initial.is_finite() {
        return Err(ExtrinsicError::NonFinite);
    }

    let mode = config.gradient;
    let objective = |x: &Vector6| -> Option<(f64, Vector6)> {
        let delta = ExtrinsicDelta::from_vector(x);
        if delta.rot.norm() >= PI {
            return None;
        }
        match mode {
            GradientMode::Analytic => residual_and_gradient(extr0, &delta, intr, &pts).ok(),
            GradientMode::CentralDifference => {
                let f = residual_sum(extr0, &delta, intr, &pts).ok()?;
                let g = central_difference(extr0, x, intr, &pts, FD_STEPS).ok()?;
                Some((f, g))
            }
        }
    };
    let bfgs_cfg = BfgsConfig { grad_tol: config.grad_tol, max_iter: config.max_iter, ..BfgsConfig::default() };
    let result = bfgs::minimize(objective, Vector6::zeros(), &bfgs_cfg).ok_or(ExtrinsicError::NonFinite)?;

    let delta = ExtrinsicDelta::from_vector(&result.x);
    Ok(OptimizationReport {
        initial_rmse: (initial / n).sqrt(),
        final_rmse: (result.f / n).sqrt(),
        iterations: result.iterations,
        converged: result.converged(),
        optimized: delta.compose(extr0),
        delta,
        gradient_norm: result.gradient.amax(),
        keypoints: pts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, BoxDims};

    fn scene() -> (CameraIntrinsics, CameraExtrinsics, Vec<Box3D>) {
        let intr = CameraIntrinsics::new(1000.0, 1000.0, 640.0, 360.0, 1280, 720).unwrap();
        let extr = CameraExtrinsics::look_at(Vector3::new(-28.0, 6.0, 7.0), Vector3::new(0.0, 0.0, 0.0));
        let boxes = vec![
            Box3D::new(Vector3::new(2.0, 3.0, 0.8), BoxDims::new(4.5, 1.9, 1.6), 0.3, 0),
            Box3D::new(Vector3::new(-4.0, -3.0, 0.75), BoxDims::new(4.2, 1.8, 1.5), -1.2, 0),
        ];
        (intr, extr, boxes)
    }

    fn keypoints_from(extr: &CameraExtrinsics, intr: &CameraIntrinsics, boxes: &[Box3D]) -> KeypointSet {
        let mut set = KeypointSet::new("cam0");
        for (b, bx) in boxes.iter().enumerate() {
            for (i, c) in bx.corners().iter().enumerate() {
                let px = project(c, extr, intr).pixel().unwrap();
                set.upsert(Keypoint { box_ref: b, corner_index: i, target: [px.u, px.v] });
            }
        }
        set
    }

    #[test]
    fn residual_zero_at_generating_pose() {
        let (intr, extr, boxes) = scene();
        let kps = keypoints_from(&extr, &intr, &boxes);
        let r = reprojection_residual(&extr, &ExtrinsicDelta::zero(), &intr, &kps, &boxes).unwrap();
        assert!(r < 1e-18, "{r}");
    }

    #[test]
    fn residual_single_offset_keypoint() {
        let (intr, extr, boxes) = scene();
        let px = project(&boxes[0].corners()[2], &extr, &intr).pixel().unwrap();
        let mut kps = KeypointSet::new("cam0");
        kps.upsert(Keypoint { box_ref: 0, corner_index: 2, target: [px.u + 3.0, px.v + 4.0] });
        let r = reprojection_residual(&extr, &ExtrinsicDelta::zero(), &intr, &kps, &boxes).unwrap();
        assert!((r - 25.0).abs() < 1e-9, "{r}");
    }

    #[test]
    fn behind_camera_is_an_error() {
        let (intr, extr, boxes) = scene();
        let kps = keypoints_from(&extr, &intr, &boxes);
        let flip = ExtrinsicDelta { rot: Vector3::zeros(), trans: Vector3::new(0.0, 0.0, -40.0) };
        assert!(matches!(
            reprojection_residual(&extr, &flip, &intr, &kps, &boxes),
            Err(ExtrinsicError::BehindCamera { .. })
        ));
    }

    #[test]
    fn identifiability_thresholds() {
        let (intr, extr, boxes) = scene();
        let full = keypoints_from(&extr, &intr, &boxes);
        let take = |idx: &[usize]| KeypointSet {
            camera_id: "cam0".into(),
            entries: idx.iter().map(|&i| full.entries[i]).collect(),
        };
        let cfg = OptimizerConfig::default();
        for bad in [&[0usize, 1, 2][..], &[0, 1, 2, 3, 4], &[0, 8, 9]] {
            assert!(matches!(
                optimize(&extr, &intr, &take(bad), &boxes, &cfg),
                Err(ExtrinsicError::InsufficientKeypoints { .. })
            ));
        }
        for good in [&[0usize, 1, 8, 9][..], &[0, 1, 2, 3, 4, 5]] {
            assert!(optimize(&extr, &intr, &take(good), &boxes, &cfg).is_ok());
        }
    }

    #[test]
    fn upsert_overwrites_same_corner() {
        let mut set = KeypointSet::new("c");
        set.upsert(Keypoint { box_ref: 0, corner_index: 0, target: [1.0, 2.0] });
        set.upsert(Keypoint { box_ref: 0, corner_index: 0, target: [3.0, 4.0] });
        set.upsert(Keypoint { box_ref: 1, corner_index: 0, target: [5.0, 6.0] });
        assert_eq!(set.entries.len(), 2);
        assert_eq!(set.entries[0].target, [3.0, 4.0]);
    }

    #[test]
    fn validation_errors() {
        let (intr, _, boxes) = scene();
        let mut set = KeypointSet::new("c");
        set.entries.push(Keypoint { box_ref: 5, corner_index: 0, target: [0.0, 0.0] });
        assert!(matches!(set.validate(&boxes, &intr), Err(ExtrinsicError::UnknownBox { .. })));
        set.entries[0] = Keypoint { box_ref: 0, corner_index: 8, target: [0.0, 0.0] };
        assert!(matches!(set.validate(&boxes, &intr), Err(ExtrinsicError::InvalidCorner { .. })));
        set.entries[0] = Keypoint { box_ref: 0, corner_index: 1, target: [-321.0, 0.0] };
        assert!(matches!(set.validate(&boxes, &intr), Err(ExtrinsicError::TargetOutOfRange { .. })));
        set.entries[0] = Keypoint { box_ref: 0, corner_index: 1, target: [-319.0, 899.0] };
        assert!(set.validate(&boxes, &intr).is_ok());
    }

    #[test]
    fn fixed_point_stays_put() {
        let (intr, extr, boxes) = scene();
        let kps = keypoints_from(&extr, &intr, &boxes);
        let rep = optimize(&extr, &intr, &kps, &boxes, &OptimizerConfig::default()).unwrap();
        assert!(rep.final_rmse < 1e-6);
        assert!(rep.delta.to_vector().amax() < 1e-9);
        assert!(rep.converged);
    }

    #[test]
    fn left_jacobian_matches_exponential() {
        let w = Vector3::new(0.3, -0.2, 0.5);
        let d = Vector3::new(1e-6, 2e-6, -1e-6);
        let lhs = UnitQuaternion::from_scaled_axis(w + d);
        let rhs = UnitQuaternion::from_scaled_axis(left_jacobian(&w) * d) * UnitQuaternion::from_scaled_axis(w);
        assert!(lhs.angle_to(&rhs) < 1e-11);
    }

    #[test]
    fn finite_difference_mode_recovers_pose() {
        let (intr, truth, boxes) = scene();
        let kps = keypoints_from(&truth, &intr, &boxes);
        let start = ExtrinsicDelta {
            rot: Vector3::new(0.01, -0.02, 0.015),
            trans: Vector3::new(0.3, -0.2, 0.1),
        }
        .compose(&truth);
        let cfg = OptimizerConfig { gradient: GradientMode::CentralDifference, ..Default::default() };
        let rep = optimize(&start, &intr, &kps, &boxes, &cfg).unwrap();
        let (deg, m) = rep.optimized.distance_to(&truth);
        assert!(deg < 0.05 && m < 0.01, "{deg} deg {m} m");
    }
}
