//! Calibrated foreground depth from instance masks, monocular relative depth
//! and projected LiDAR.
//!
//! Masks that are small enough and contain a projected label center are kept
//! as foreground. Relative depth is mapped to meters by an affine fit against
//! the sparse LiDAR depth, and background pixels get `+inf` so they never
//! occlude anything during compositing.

use crate::raster::{Mask, Raster};
use log::warn;
use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Calibrated depths below this are clamped up to it.
pub const MIN_DEPTH: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DepthError {
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch { expected: (u32, u32), got: (u32, u32) },
    #[error("degenerate depth fit: {0}")]
    DegenerateFit(String),
    #[error("no ground-truth pixels inside the evaluation mask")]
    EmptyEvaluation,
}

fn ensure_dims(expected: (u32, u32), got: (u32, u32)) -> Result<(), DepthError> {
    if expected == got {
        Ok(())
    } else {
        Err(DepthError::DimensionMismatch { expected, got })
    }
}

/// Unitless depth proxy from a monocular model, one value per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeDepthRaster {
    pub camera_id: String,
    pub values: Raster<f64>,
}

/// Metric depth at pixels that received a LiDAR return.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepthRaster {
    pub values: Raster<f64>,
    pub valid: Mask,
}

impl SparseDepthRaster {
    pub fn empty(width: u32, height: u32) -> Self {
        Self { values: Raster::filled(width, height, 0.0), valid: Raster::filled(width, height, false) }
    }

    pub fn dims(&self) -> (u32, u32) {
        self.values.dims()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.count()
    }

    /// Keeps `value` if it is nearer than what the pixel already holds.
    pub fn splat_min(&mut self, x: u32, y: u32, depth: f64) {
        if !*self.valid.get(x, y) || depth < *self.values.get(x, y) {
            self.values.set(x, y, depth);
            self.valid.set(x, y, true);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMaskSet {
    pub camera_id: String,
    pub masks: Vec<Mask>,
}

/// Per-pixel metric depth with `+inf` outside the foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundDepth {
    pub values: Raster<f64>,
    pub mask: Mask,
    /// Pixels whose calibrated depth fell below [`MIN_DEPTH`].
    pub clamped: usize,
}

impl ForegroundDepth {
    /// No foreground anywhere: nothing occludes.
    pub fn unoccluded(width: u32, height: u32) -> Self {
        Self {
            values: Raster::filled(width, height, f64::INFINITY),
            mask: Raster::filled(width, height, false),
            clamped: 0,
        }
    }

    pub fn uniform(width: u32, height: u32, depth: f64) -> Self {
        Self { values: Raster::filled(width, height, depth), mask: Raster::filled(width, height, true), clamped: 0 }
    }

    pub fn dims(&self) -> (u32, u32) {
        self.values.dims()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineDepthCalibration {
    /// Scale applied to relative depth.
    pub a: f64,
    /// Offset in meters.
    pub b: f64,
    pub inlier_count: usize,
    pub rms_error: f64,
    /// Set when `a <= 0`, i.e. the proxy decreases with distance.
    pub convention_warning: bool,
}

impl AffineDepthCalibration {
    pub fn apply(&self, rel: f64) -> f64 {
        self.a * rel + self.b
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitRegion {
    /// LiDAR-valid pixels inside the foreground mask.
    #[default]
    Foreground,
    /// Every LiDAR-valid pixel.
    AllValid,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForegroundDepthConfig {
    pub fit_region: FitRegion,
}

/// Keeps the masks with fewer than `width * height / 4` pixels that contain at
/// least one projected box center (rounded to the nearest pixel).
pub fn select_foreground(masks: &InstanceMaskSet, centers: &[Vector2<f64>], width: u32, height: u32) -> InstanceMaskSet {
    let limit = width as f64 * height as f64 / 4.0;
    let kept = masks
        .masks
        .iter()
        .filter(|m| m.dims() == (width, height))
        .filter(|m| (m.count() as f64) < limit)
        .filter(|m| centers.iter().any(|c| m.pixel_at(c.x, c.y).is_some_and(|(x, y)| *m.get(x, y))))
        .cloned()
        .collect();
    InstanceMaskSet { camera_id: masks.camera_id.clone(), masks: kept }
}

/// Pixelwise OR of all masks.
pub fn union_mask(selected: &InstanceMaskSet, width: u32, height: u32) -> Result<Mask, DepthError> {
    let mut out = Raster::filled(width, height, false);
    for m in &selected.masks {
        ensure_dims((width, height), m.dims())?;
        for (o, s) in out.data_mut().iter_mut().zip(m.data()) {
            *o |= *s;
        }
    }
    Ok(out)
}

/// Least-squares line `z = a * rel + b` through `(rel, z)` pairs.
pub fn fit_affine(pairs: &[(f64, f64)]) -> Result<AffineDepthCalibration, DepthError> {
    let n = pairs.len();
    if n < 2 {
        return Err(DepthError::DegenerateFit(format!("{n} valid pixels, need at least 2")));
    }
    let nf = n as f64;
    let mean_x = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let mean_z = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxx, mut sxz) = (0.0, 0.0);
    for &(x, z) in pairs {
        let dx = x - mean_x;
        sxx += dx * dx;
        sxz += dx * (z - mean_z);
    }
    let scale = pairs.iter().map(|p| p.0.abs()).fold(1.0f64, f64::max);
    if !(sxx > nf * (1e-12 * scale).powi(2)) {
        return Err(DepthError::DegenerateFit("relative depth is constant over the fit pixels".into()));
    }
    let a = sxz / sxx;
    let b = mean_z - a * mean_x;
    let sse: f64 = pairs.iter().map(|&(x, z)| (a * x + b - z).powi(2)).sum();
    let convention_warning = a <= 0.0;
    if convention_warning {
        warn!("relative depth decreases with distance (a = {a}); check the depth model convention");
    }
    Ok(AffineDepthCalibration { a, b, inlier_count: n, rms_error: (sse / nf).sqrt(), convention_warning })
}

/// Fits `a * rel + b` to LiDAR depth over valid pixels, optionally restricted
/// to `region`.
pub fn calibrate(
    rel: &RelativeDepthRaster,
    sparse: &SparseDepthRaster,
    region: Option<&Mask>,
) -> Result<AffineDepthCalibration, DepthError> {
    let dims = rel.values.dims();
    ensure_dims(dims, sparse.dims())?;
    if let Some(r) = region {
        ensure_dims(dims, r.dims())?;
    }
    let pairs: Vec<(f64, f64)> = (0..rel.values.len())
        .filter(|&i| sparse.valid.data()[i] && region.is_none_or(|r| r.data()[i]))
        .map(|i| (rel.values.data()[i], sparse.values.data()[i]))
        .collect();
    fit_affine(&pairs)
}

/// Applies the calibration inside `mask`; `+inf` elsewhere.
pub fn foreground_depth(
    rel: &RelativeDepthRaster,
    calib: &AffineDepthCalibration,
    mask: &Mask,
) -> Result<ForegroundDepth, DepthError> {
    ensure_dims(rel.values.dims(), mask.dims())?;
    let mut clamped = 0;
    let values: Vec<f64> = rel
        .values
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&r, &m)| {
            if !m {
                return f64::INFINITY;
            }
            let d = calib.apply(r);
            if d < MIN_DEPTH {
                clamped += 1;
                MIN_DEPTH
            } else {
                d
            }
        })
        .collect();
    if clamped > 0 {
        warn!("{clamped} foreground pixels clamped to {MIN_DEPTH} m");
    }
    let (w, h) = rel.values.dims();
    Ok(ForegroundDepth { values: Raster::from_vec(w, h, values).expect("dims checked"), mask: mask.clone(), clamped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    /// Mean absolute error, meters.
    pub mae: f64,
    /// Mean absolute relative error.
    pub rel: f64,
    pub count: usize,
}

/// MAE and relative error of `pred` over ground-truth-valid pixels inside
/// `eval_mask` (all valid pixels when `None`).
pub fn depth_metrics(
    pred: &Raster<f64>,
    gt: &SparseDepthRaster,
    eval_mask: Option<&Mask>,
) -> Result<DepthMetrics, DepthError> {
    ensure_dims(gt.dims(), pred.dims())?;
    if let Some(m) = eval_mask {
        ensure_dims(gt.dims(), m.dims())?;
    }
    let (mut abs, mut rel, mut n) = (0.0, 0.0, 0usize);
    for i in 0..pred.len() {
        if !gt.valid.data()[i] || eval_mask.is_some_and(|m| !m.data()[i]) {
            continue;
        }
        let g = gt.values.data()[i];
        let e = (pred.data()[i] - g).abs();
        abs += e;
        rel += e / g;
        n += 1;
    }
    if n == 0 {
        return Err(DepthError::EmptyEvaluation);
    }
    Ok(DepthMetrics { mae: abs / n as f64, rel: rel / n as f64, count: n })
}

/// Splits LiDAR-valid pixels inside `region` into a fit set and a hold-out set
/// holding `fraction` of them. Valid pixels outside `region` stay in the fit set.
pub fn split_holdout(
    sparse: &SparseDepthRaster,
    region: &Mask,
    fraction: f64,
    seed: u64,
) -> (SparseDepthRaster, SparseDepthRaster) {
    let mut candidates: Vec<usize> =
        (0..sparse.values.len()).filter(|&i| sparse.valid.data()[i] && region.data()[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let k = (candidates.len() as f64 * fraction).round() as usize;
    let (w, h) = sparse.dims();
    let mut fit = sparse.clone();
    let mut held = SparseDepthRaster::empty(w, h);
    for &i in &candidates[..k] {
        fit.valid.data_mut()[i] = false;
        held.valid.data_mut()[i] = true;
        held.values.data_mut()[i] = sparse.values.data()[i];
    }
    (fit, held)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundDepthResult {
    pub depth: ForegroundDepth,
    /// `None` when no mask survived selection (nothing to calibrate).
    pub calibration: Option<AffineDepthCalibration>,
    pub selected_masks: usize,
}

/// Full per-camera procedure: select foreground masks, union them, fit the
/// affine calibration and build the occlusion raster.
pub fn estimate_foreground_depth(
    rel: &RelativeDepthRaster,
    sparse: &SparseDepthRaster,
    masks: &InstanceMaskSet,
    centers: &[Vector2<f64>],
    config: &ForegroundDepthConfig,
) -> Result<ForegroundDepthResult, DepthError> {
    let (w, h) = rel.values.dims();
    ensure_dims((w, h), sparse.dims())?;
    let selected = select_foreground(masks, centers, w, h);
    let mask = union_mask(&selected, w, h)?;
    if !mask.any() {
        return Ok(ForegroundDepthResult { depth: ForegroundDepth::unoccluded(w, h), calibration: None, selected_masks: 0 });
    }
    let region = match config.fit_region {
        FitRegion::Foreground => Some(&mask),
        FitRegion::AllValid => None,
    };
    let calib = calibrate(rel, sparse, region)?;
    let depth = foreground_depth(rel, &calib, &mask)?;
    Ok(ForegroundDepthResult { depth, calibration: Some(calib), selected_masks: selected.masks.len() })
}
