//! Occlusion-aware placement of simulated assets on the ground plane.
//!
//! Cells of a regular grid are scored by how many cameras see them (and how
//! evenly) plus how much they spread the set of placed objects. A greedy loop
//! samples positions inside the best cells and keeps only candidates that pass
//! the collision and visibility checks.

use crate::geometry::{in_view, point_in_view, Box3D, BoxDims, CameraRig};
use nalgebra::{Rotation2, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlacementError {
    #[error("camera rig is empty")]
    EmptyRig,
    #[error("invalid placement grid: {0}")]
    InvalidGrid(String),
    #[error("asset catalog is empty")]
    EmptyCatalog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementGrid {
    pub origin: [f64; 2],
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
    pub ground_z: f64,
    /// World XY positions where real objects have been observed.
    #[serde(default)]
    pub seed_points: Vec<[f64; 2]>,
}

impl PlacementGrid {
    pub fn new(origin: [f64; 2], cell_size: f64, nx: usize, ny: usize, ground_z: f64) -> Result<Self, PlacementError> {
        let g = Self { origin, cell_size, nx, ny, ground_z, seed_points: Vec::new() };
        g.validate()?;
        Ok(g)
    }

    pub fn with_seed_points(mut self, pts: Vec<[f64; 2]>) -> Result<Self, PlacementError> {
        self.seed_points = pts;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), PlacementError> {
        if !(self.cell_size.is_finite() && self.cell_size > 0.0) {
            return Err(PlacementError::InvalidGrid(format!("cell_size must be > 0, got {}", self.cell_size)));
        }
        if self.nx == 0 || self.ny == 0 {
            return Err(PlacementError::InvalidGrid("grid needs at least one cell".into()));
        }
        if let Some(p) = self.seed_points.iter().find(|p| !self.contains(Vector2::new(p[0], p[1]))) {
            return Err(PlacementError::InvalidGrid(format!("seed point {p:?} outside grid extent")));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.nx * self.ny
    }

    /// Cells are numbered row-major: `index = iy * nx + ix`.
    pub fn cell_min(&self, index: usize) -> Vector2<f64> {
        let (ix, iy) = (index % self.nx, index / self.nx);
        Vector2::new(self.origin[0] + ix as f64 * self.cell_size, self.origin[1] + iy as f64 * self.cell_size)
    }

    pub fn cell_center(&self, index: usize) -> Vector2<f64> {
        self.cell_min(index) + Vector2::repeat(self.cell_size / 2.0)
    }

    pub fn contains(&self, p: Vector2<f64>) -> bool {
        let max_x = self.origin[0] + self.nx as f64 * self.cell_size;
        let max_y = self.origin[1] + self.ny as f64 * self.cell_size;
        p.x >= self.origin[0] && p.x <= max_x && p.y >= self.origin[1] && p.y <= max_y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementSource {
    Real,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub asset_id: String,
    pub source: PlacementSource,
}

impl Placement {
    pub fn real(bbox: Box3D) -> Self {
        Self { bbox, asset_id: String::new(), source: PlacementSource::Real }
    }

    pub fn simulated(bbox: Box3D, asset_id: impl Into<String>) -> Self {
        Self { bbox, asset_id: asset_id.into(), source: PlacementSource::Simulated }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogAsset {
    pub asset_id: String,
    pub dims: BoxDims,
    pub class_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub cell_index: usize,
    /// Number of cameras whose frustum contains the cell's probe point.
    pub visible_cameras: usize,
    pub visibility_term: f64,
    pub dispersion_term: f64,
    /// `visibility_term + dispersion_term`, or `-inf` for cells away from
    /// every seed point.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum YawMode {
    Uniform,
    /// Heading drawn from `headings` (radians) plus uniform jitter in
    /// `[-jitter, jitter]`.
    LaneAligned { headings: Vec<f64>, jitter: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Cells farther than this from every seed point are never sampled.
    pub r_seed: f64,
    pub top_k: usize,
    pub max_retries: usize,
    /// Asset size used for the height of the visibility probe point.
    pub default_dims: BoxDims,
    pub yaw: YawMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            r_seed: 3.0,
            top_k: 5,
            max_retries: 50,
            default_dims: BoxDims::new(4.5, 1.8, 1.6),
            yaw: YawMode::Uniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Overlap,
    Invisible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckOutcome {
    Accept,
    Reject(RejectReason),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionCounts {
    pub overlap: usize,
    pub invisible: usize,
}

impl RejectionCounts {
    fn record(&mut self, r: RejectReason) {
        match r {
            RejectReason::Overlap => self.overlap += 1,
            RejectReason::Invisible => self.invisible += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    /// No cell is both seed-gated in and visible from any camera.
    NoCandidateCells,
    /// `max_retries` consecutive candidates were rejected.
    RetriesExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingResult {
    pub placements: Vec<Placement>,
    pub rejections: RejectionCounts,
    pub stop: StopReason,
}

/// Multi-view visibility term for one point:
/// `sum_m V_m - sum_m (V_m - mean V)^2` with `V_m` in {0, 1}.
pub fn visibility_score(p: &Vector3<f64>, rig: &CameraRig) -> Result<f64, PlacementError> {
    visibility_with_count(p, rig).map(|(s, _)| s)
}

fn visibility_with_count(p: &Vector3<f64>, rig: &CameraRig) -> Result<(f64, usize), PlacementError> {
    if rig.is_empty() {
        return Err(PlacementError::EmptyRig);
    }
    let vis: Vec<f64> = rig
        .cameras
        .iter()
        .map(|c| if point_in_view(p, &c.extrinsics, &c.intrinsics) { 1.0 } else { 0.0 })
        .collect();
    let sum: f64 = vis.iter().sum();
    let avg = sum / vis.len() as f64;
    let spread: f64 = vis.iter().map(|v| (v - avg).powi(2)).sum();
    Ok((sum - spread, sum as usize))
}

/// Spread of a point set: `(sum_i sum_j |p_i - p_j|^2) / (2 |P|)` over ordered
/// pairs. Zero for an empty set.
pub fn dispersion_score(points: &[Vector3<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for p in points {
        for q in points {
            total += (p - q).norm_squared();
        }
    }
    total / (2.0 * points.len() as f64)
}

/// Increase of [`dispersion_score`] when `q` joins `points`.
///
/// Equals `n / (n + 1) * |q - centroid|^2`, which follows from
/// `sum_ij |p_i - p_j|^2 = 2n sum_i |p_i - centroid|^2`.
pub fn marginal_dispersion_gain(q: &Vector3<f64>, points: &[Vector3<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n;
    n / (n + 1.0) * (q - centroid).norm_squared()
}

/// Combined placement objective: summed visibility of every point in
/// `existing ∪ selected` plus the dispersion of that union.
pub fn combined_objective(
    selected: &[Vector3<f64>],
    existing: &[Vector3<f64>],
    rig: &CameraRig,
) -> Result<f64, PlacementError> {
    let all: Vec<Vector3<f64>> = existing.iter().chain(selected).copied().collect();
    let mut vis = 0.0;
    for p in &all {
        vis += visibility_score(p, rig)?;
    }
    Ok(vis + dispersion_score(&all))
}

fn probe_point(grid: &PlacementGrid, index: usize, config: &SamplerConfig) -> Vector3<f64> {
    let c = grid.cell_center(index);
    Vector3::new(c.x, c.y, grid.ground_z + config.default_dims.height / 2.0)
}

fn seed_gated(grid: &PlacementGrid, center: Vector2<f64>, r_seed: f64) -> bool {
    // An empty seed list disables gating.
    grid.seed_points.is_empty()
        || grid.seed_points.iter().any(|s| (Vector2::new(s[0], s[1]) - center).norm() <= r_seed)
}

fn score_points(
    grid: &PlacementGrid,
    rig: &CameraRig,
    points: &[Vector3<f64>],
    config: &SamplerConfig,
) -> Result<Vec<CandidateScore>, PlacementError> {
    (0..grid.cell_count())
        .map(|i| {
            let p = probe_point(grid, i, config);
            let (vis, count) = visibility_with_count(&p, rig)?;
            let disp = marginal_dispersion_gain(&p, points);
            let total = if seed_gated(grid, grid.cell_center(i), config.r_seed) { vis + disp } else { f64::NEG_INFINITY };
            Ok(CandidateScore { cell_index: i, visible_cameras: count, visibility_term: vis, dispersion_term: disp, total })
        })
        .collect()
}

/// Scores every grid cell given the placements already in the scene.
pub fn score_cells(
    grid: &PlacementGrid,
    rig: &CameraRig,
    existing: &[Placement],
    config: &SamplerConfig,
) -> Result<Vec<CandidateScore>, PlacementError> {
    let points: Vec<Vector3<f64>> = existing.iter().map(|p| p.bbox.center).collect();
    score_points(grid, rig, &points, config)
}

/// Eligible cells (seed-gated in and seen by at least one camera), best first.
/// Ties keep grid order.
fn ranked(scores: &[CandidateScore]) -> Vec<CandidateScore> {
    let mut eligible: Vec<CandidateScore> =
        scores.iter().filter(|s| s.total.is_finite() && s.visible_cameras > 0).copied().collect();
    eligible.sort_by(|a, b| b.total.total_cmp(&a.total));
    eligible
}

/// Plain sequential greedy: each step takes the best cell given the existing
/// points and the cells chosen so far. The first step of an empty scene has
/// no dispersion signal, so this alone can land far from the optimum; see
/// [`greedy_cells`].
pub fn sequential_greedy_cells(
    grid: &PlacementGrid,
    rig: &CameraRig,
    existing: &[Vector3<f64>],
    n: usize,
    config: &SamplerConfig,
) -> Result<Vec<usize>, PlacementError> {
    let mut points = existing.to_vec();
    let mut chosen = Vec::with_capacity(n);
    for _ in 0..n {
        let scores = score_points(grid, rig, &points, config)?;
        let Some(best) = ranked(&scores).first().copied() else { break };
        chosen.push(best.cell_index);
        points.push(probe_point(grid, best.cell_index, config));
    }
    Ok(chosen)
}

/// Deterministic selection of `n` cells maximizing [`combined_objective`]:
/// sequential greedy, then best-improvement single swaps until no swap of a
/// chosen cell for an eligible one raises the objective.
pub fn greedy_cells(
    grid: &PlacementGrid,
    rig: &CameraRig,
    existing: &[Vector3<f64>],
    n: usize,
    config: &SamplerConfig,
) -> Result<Vec<usize>, PlacementError> {
    let mut chosen = sequential_greedy_cells(grid, rig, existing, n, config)?;
    let eligible: Vec<usize> = ranked(&score_points(grid, rig, existing, config)?).iter().map(|s| s.cell_index).collect();
    let objective = |cells: &[usize]| {
        let pts: Vec<Vector3<f64>> = cells.iter().map(|&i| probe_point(grid, i, config)).collect();
        combined_objective(&pts, existing, rig)
    };
    let mut current = objective(&chosen)?;
    // Each accepted swap strictly raises the objective over a finite set, so
    // this terminates; the cap only bounds pathological float behavior.
    for _ in 0..1000 {
        let mut best: Option<(usize, usize, f64)> = None;
        for slot in 0..chosen.len() {
            for &cell in &eligible {
                if chosen.contains(&cell) {
                    continue;
                }
                let mut trial = chosen.clone();
                trial[slot] = cell;
                let v = objective(&trial)?;
                if v > current + 1e-12 && best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((slot, cell, v));
                }
            }
        }
        let Some((slot, cell, v)) = best else { break };
        chosen[slot] = cell;
        current = v;
    }
    Ok(chosen)
}

/// Probe point of a cell, as used by scoring.
pub fn cell_probe(grid: &PlacementGrid, index: usize, config: &SamplerConfig) -> Vector3<f64> {
    probe_point(grid, index, config)
}

fn axes(b: &Box3D) -> [Vector2<f64>; 2] {
    let (s, c) = b.yaw.sin_cos();
    [Vector2::new(c, s), Vector2::new(-s, c)]
}

fn project_interval(corners: &[Vector2<f64>; 4], axis: &Vector2<f64>) -> (f64, f64) {
    corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
        let d = c.dot(axis);
        (lo.min(d), hi.max(d))
    })
}

/// Smallest overlap of the two footprints' projections over the four
/// separating-axis candidates. Negative when a separating axis exists; zero
/// for touching footprints.
pub fn footprint_penetration(a: &Box3D, b: &Box3D) -> f64 {
    let ca = a.footprint();
    let cb = b.footprint();
    let mut min_overlap = f64::INFINITY;
    for axis in axes(a).iter().chain(axes(b).iter()) {
        let (a0, a1) = project_interval(&ca, axis);
        let (b0, b1) = project_interval(&cb, axis);
        min_overlap = min_overlap.min(a1.min(b1) - a0.max(b0));
    }
    min_overlap
}

/// Oriented-rectangle separating-axis test on the ground plane combined with a
/// vertical interval test. Touching counts as overlap.
pub fn boxes_overlap(a: &Box3D, b: &Box3D) -> bool {
    let (az0, az1) = a.z_range();
    let (bz0, bz1) = b.z_range();
    if az1 < bz0 || bz1 < az0 {
        return false;
    }
    footprint_penetration(a, b) >= 0.0
}

/// Rule-based feasibility check for a simulated candidate.
pub fn check(candidate: &Placement, existing: &[Placement], rig: &CameraRig) -> CheckOutcome {
    if existing.iter().any(|e| boxes_overlap(&candidate.bbox, &e.bbox)) {
        return CheckOutcome::Reject(RejectReason::Overlap);
    }
    if !rig.cameras.iter().any(|c| in_view(&candidate.bbox, &c.extrinsics, &c.intrinsics)) {
        return CheckOutcome::Reject(RejectReason::Invisible);
    }
    CheckOutcome::Accept
}

fn sample_yaw(rng: &mut ChaCha8Rng, mode: &YawMode) -> f64 {
    match mode {
        YawMode::LaneAligned { headings, jitter } if !headings.is_empty() => {
            let h = headings[rng.random_range(0..headings.len())];
            crate::geometry::normalize_angle(h + jitter * (2.0 * rng.random::<f64>() - 1.0))
        }
        // u in [0, 1) maps onto (-pi, pi].
        _ => PI - 2.0 * PI * rng.random::<f64>(),
    }
}

/// Greedily samples up to `n_requested` collision-free, visible placements.
///
/// Each round re-scores the grid with everything placed so far, draws a cell
/// uniformly from the top `k`, a position uniformly inside it, a uniform yaw
/// and a uniform catalog asset. A round that sees `max_retries` rejections
/// ends sampling early.
pub fn sample_placements(
    grid: &PlacementGrid,
    rig: &CameraRig,
    existing: &[Placement],
    n_requested: usize,
    catalog: &[CatalogAsset],
    rng_seed: u64,
    config: &SamplerConfig,
) -> Result<SamplingResult, PlacementError> {
    if rig.is_empty() {
        return Err(PlacementError::EmptyRig);
    }
    grid.validate()?;
    let mut result = SamplingResult { placements: Vec::new(), rejections: RejectionCounts::default(), stop: StopReason::Completed };
    if n_requested == 0 {
        return Ok(result);
    }
    if catalog.is_empty() {
        return Err(PlacementError::EmptyCatalog);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut scene: Vec<Placement> = existing.to_vec();

    while result.placements.len() < n_requested {
        let scores = score_cells(grid, rig, &scene, config)?;
        let top: Vec<CandidateScore> = ranked(&scores).into_iter().take(config.top_k.max(1)).collect();
        if top.is_empty() {
            result.stop = StopReason::NoCandidateCells;
            break;
        }
        let mut accepted = None;
        for _ in 0..config.max_retries.max(1) {
            let cell = top[rng.random_range(0..top.len())].cell_index;
            let min = grid.cell_min(cell);
            let x = min.x + rng.random::<f64>() * grid.cell_size;
            let y = min.y + rng.random::<f64>() * grid.cell_size;
            let yaw = sample_yaw(&mut rng, &config.yaw);
            let asset = &catalog[rng.random_range(0..catalog.len())];
            let center = Vector3::new(x, y, grid.ground_z + asset.dims.height / 2.0);
            let candidate = Placement::simulated(Box3D::new(center, asset.dims, yaw, asset.class_id), asset.asset_id.clone());
            match check(&candidate, &scene, rig) {
                CheckOutcome::Accept => {
                    accepted = Some(candidate);
                    break;
                }
                CheckOutcome::Reject(r) => result.rejections.record(r),
            }
        }
        match accepted {
            Some(p) => {
                scene.push(p.clone());
                result.placements.push(p);
            }
            None => {
                result.stop = StopReason::RetriesExhausted;
                break;
            }
        }
    }
    Ok(result)
}

/// Rotates a local ground-plane offset by `yaw`.
pub fn rotate_xy(v: Vector2<f64>, yaw: f64) -> Vector2<f64> {
    Rotation2::new(yaw) * v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Camera, CameraExtrinsics, CameraIntrinsics};
    use proptest::prelude::*;

    fn camera(id: &str, eye: Vector3<f64>, target: Vector3<f64>) -> Camera {
        Camera {
            id: id.into(),
            intrinsics: CameraIntrinsics::new(400.0, 400.0, 320.0, 240.0, 640, 480).unwrap(),
            extrinsics: CameraExtrinsics::look_at(eye, target),
        }
    }

    fn two_cam_rig() -> CameraRig {
        CameraRig::new(vec![
            camera("a", Vector3::new(-25.0, 0.0, 8.0), Vector3::zeros()),
            camera("b", Vector3::new(25.0, 0.0, 8.0), Vector3::zeros()),
        ])
    }

    #[test]
    fn visibility_examples() {
        let rig1 = CameraRig::new(vec![camera("a", Vector3::new(-25.0, 0.0, 8.0), Vector3::zeros())]);
        assert_eq!(visibility_score(&Vector3::zeros(), &rig1).unwrap(), 1.0);
        let rig2 = two_cam_rig();
        assert_eq!(visibility_score(&Vector3::zeros(), &rig2).unwrap(), 2.0);
        // Behind camera b, in front of camera a.
        let p = Vector3::new(28.0, 0.0, 0.0);
        assert!((visibility_score(&p, &rig2).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(visibility_score(&p, &CameraRig::default()), Err(PlacementError::EmptyRig));
    }

    #[test]
    fn dispersion_examples() {
        assert_eq!(dispersion_score(&[Vector3::new(1.0, 2.0, 3.0)]), 0.0);
        let two = [Vector3::zeros(), Vector3::new(2.0, 0.0, 0.0)];
        assert!((dispersion_score(&two) - 2.0).abs() < 1e-12);
        let three = [Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), Vector3::new(2.0, 0.0, 0.0)];
        assert!((dispersion_score(&three) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn overlap_examples() {
        let dims = BoxDims::new(4.0, 2.0, 1.5);
        let a = Box3D::new(Vector3::new(0.0, 0.0, 0.75), dims, 0.3, 0);
        assert!(boxes_overlap(&a, &a));
        for yaw in [-2.0, 0.0, 0.7, 1.5] {
            let b = Box3D::new(Vector3::new(10.0, 0.0, 0.75), dims, yaw, 0);
            assert!(!boxes_overlap(&a, &b));
        }
        // Same footprint, stacked above: vertical intervals disjoint.
        let above = Box3D::new(Vector3::new(0.0, 0.0, 3.0), dims, 0.3, 0);
        assert!(!boxes_overlap(&a, &above));
    }

    #[test]
    fn check_reports_reasons() {
        let rig = two_cam_rig();
        let dims = BoxDims::new(4.0, 2.0, 1.5);
        let a = Placement::real(Box3D::new(Vector3::new(0.0, 0.0, 0.75), dims, 0.0, 0));
        let same = Placement::simulated(a.bbox, "car");
        assert_eq!(check(&same, std::slice::from_ref(&a), &rig), CheckOutcome::Reject(RejectReason::Overlap));
        let far = Placement::simulated(Box3D::new(Vector3::new(0.0, 200.0, 0.75), dims, 0.0, 0), "car");
        assert_eq!(check(&far, std::slice::from_ref(&a), &rig), CheckOutcome::Reject(RejectReason::Invisible));
        let ok = Placement::simulated(Box3D::new(Vector3::new(0.0, 5.0, 0.75), dims, 0.0, 0), "car");
        assert_eq!(check(&ok, &[a], &rig), CheckOutcome::Accept);
    }

    #[test]
    fn scores_are_mirror_symmetric() {
        // Cameras mirrored across x = 0; grid symmetric about x = 0.
        let rig = two_cam_rig();
        let grid = PlacementGrid::new([-10.0, -10.0], 2.0, 10, 10, 0.0).unwrap();
        let scores = score_cells(&grid, &rig, &[], &SamplerConfig::default()).unwrap();
        for iy in 0..10 {
            for ix in 0..10 {
                let a = scores[iy * 10 + ix].total;
                let b = scores[iy * 10 + (9 - ix)].total;
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn seed_gating_excludes_far_cells() {
        let rig = two_cam_rig();
        let grid = PlacementGrid::new([-10.0, -10.0], 2.0, 10, 10, 0.0).unwrap().with_seed_points(vec![[0.0, 0.0]]).unwrap();
        let scores = score_cells(&grid, &rig, &[], &SamplerConfig::default()).unwrap();
        for s in &scores {
            let near = grid.cell_center(s.cell_index).norm() <= 3.0;
            assert_eq!(s.total.is_finite(), near);
        }
        assert!(PlacementGrid::new([0.0, 0.0], 1.0, 2, 2, 0.0).unwrap().with_seed_points(vec![[5.0, 0.0]]).is_err());
        assert!(PlacementGrid::new([0.0, 0.0], 0.0, 2, 2, 0.0).is_err());
    }

    #[test]
    fn invisible_cells_are_never_ranked() {
        let rig = two_cam_rig();
        let grid = PlacementGrid::new([-60.0, -60.0], 4.0, 30, 30, 0.0).unwrap();
        let scores = score_cells(&grid, &rig, &[], &SamplerConfig::default()).unwrap();
        assert!(scores.iter().any(|s| s.visible_cameras == 0 && s.visibility_term <= 0.0));
        assert!(ranked(&scores).iter().all(|s| s.visible_cameras > 0));
    }

    #[test]
    fn zero_requested_is_empty() {
        let rig = two_cam_rig();
        let grid = PlacementGrid::new([-10.0, -10.0], 2.0, 10, 10, 0.0).unwrap();
        let r = sample_placements(&grid, &rig, &[], 0, &[], 1, &SamplerConfig::default()).unwrap();
        assert!(r.placements.is_empty());
    }

    #[test]
    fn saturated_grid_returns_nothing() {
        let rig = two_cam_rig();
        let grid = PlacementGrid::new([-4.0, -4.0], 2.0, 4, 4, 0.0).unwrap();
        let blanket = Placement::real(Box3D::new(Vector3::new(0.0, 0.0, 1.0), BoxDims::new(12.0, 12.0, 2.0), 0.0, 0));
        let catalog = [CatalogAsset { asset_id: "car".into(), dims: BoxDims::new(4.5, 1.8, 1.5), class_id: 0 }];
        let r = sample_placements(&grid, &rig, &[blanket], 3, &catalog, 9, &SamplerConfig::default()).unwrap();
        assert!(r.placements.is_empty());
        assert_eq!(r.stop, StopReason::RetriesExhausted);
        assert_eq!(r.rejections.overlap, 50);
    }

    proptest! {
        #[test]
        fn dispersion_translation_invariant(
            pts in prop::collection::vec(prop::array::uniform3(-50.0..50.0f64), 1..12),
            c in prop::array::uniform3(-100.0..100.0f64),
        ) {
            let p: Vec<Vector3<f64>> = pts.iter().map(|a| Vector3::from(*a)).collect();
            let shifted: Vec<Vector3<f64>> = p.iter().map(|a| a + Vector3::from(c)).collect();
            let (d0, d1) = (dispersion_score(&p), dispersion_score(&shifted));
            prop_assert!((d0 - d1).abs() <= 1e-9 * d0.max(1.0));
        }

        #[test]
        fn marginal_gain_matches_definition_and_shrinks(
            pts in prop::collection::vec(prop::array::uniform3(-20.0..20.0f64), 0..10),
            q in prop::array::uniform3(-20.0..20.0f64),
        ) {
            let p: Vec<Vector3<f64>> = pts.iter().map(|a| Vector3::from(*a)).collect();
            let q = Vector3::from(q);
            let mut with_q = p.clone();
            with_q.push(q);
            let direct = dispersion_score(&with_q) - dispersion_score(&p);
            let gain = marginal_dispersion_gain(&q, &p);
            prop_assert!((direct - gain).abs() <= 1e-9 * direct.abs().max(1.0));
            prop_assert!(marginal_dispersion_gain(&q, &with_q) <= gain + 1e-12);
        }
    }
}
