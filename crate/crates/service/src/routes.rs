use crate::error::{ApiError, ApiResult};
use crate::state::{AppState, FlightGuard, Session};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use roadsim_core::dataset::{
    self, calib_path, image_path, list_cameras, list_frames, load_calib, load_keypoints, load_labels, to_json_bytes, CalibFile,
    DatasetError, LabelRecord,
};
use roadsim_core::extrinsics::{optimize, ExtrinsicError, Keypoint, KeypointSet, OptimizationReport};
use roadsim_core::geometry::{project, CameraExtrinsics, CameraIntrinsics, Projection};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::sync::Arc;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/frames", get(frames))
        .route("/frames/{frame}/cameras/{cam}/projection", get(projection))
        .route("/frames/{frame}/cameras/{cam}/image", get(image))
        .route("/sessions", post(open_session))
        .route("/sessions/{id}", get(session_state))
        .route("/sessions/{id}/keypoints", post(edit_keypoints))
        .route("/sessions/{id}/optimize", post(run_optimize))
        .route("/sessions/{id}/commit", post(commit))
        .with_state(state)
}

fn dataset_error(e: DatasetError) -> ApiError {
    match e {
        DatasetError::MissingFile(p) => ApiError::not_found("missing_file", format!("missing file: {}", p.display())),
        other => ApiError::internal("dataset_error", other.to_string()),
    }
}

/// Checks that the frame and camera exist, mapping absence to 404.
fn locate(state: &AppState, frame: &str, cam: &str) -> ApiResult<()> {
    let root = state.scene_root();
    if !dataset::frame_dir(root, frame).is_dir() {
        return Err(ApiError::not_found("unknown_frame", format!("unknown frame {frame:?}")));
    }
    let cams = list_cameras(root, frame).map_err(dataset_error)?;
    if !cams.iter().any(|c| c == cam) {
        return Err(ApiError::not_found("unknown_camera", format!("frame {frame:?} has no camera {cam:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub frame_id: String,
    pub cameras: Vec<String>,
    pub boxes: usize,
}

async fn frames(State(state): State<AppState>) -> ApiResult<Json<Vec<FrameSummary>>> {
    let root = state.scene_root();
    let ids = match list_frames(root) {
        Ok(ids) => ids,
        Err(DatasetError::MissingFile(_)) => vec![],
        Err(e) => return Err(dataset_error(e)),
    };
    let mut out = Vec::with_capacity(ids.len());
    for frame_id in ids {
        let cameras = list_cameras(root, &frame_id).map_err(dataset_error)?;
        let boxes = load_labels(root, &frame_id).map_err(dataset_error)?.len();
        out.push(FrameSummary { frame_id, cameras, boxes });
    }
    Ok(Json(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CornerProjection {
    InFront { u: f64, v: f64, depth: f64 },
    Behind,
}

impl From<Projection> for CornerProjection {
    fn from(p: Projection) -> Self {
        match p {
            Projection::InFront(px) => Self::InFront { u: px.u, v: px.v, depth: px.depth },
            Projection::Behind => Self::Behind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedBox {
    pub box_ref: usize,
    pub class_name: String,
    pub track_id: Option<i64>,
    /// In corner-index order.
    pub corners: Vec<CornerProjection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResponse {
    pub frame_id: String,
    pub camera_id: String,
    pub width: u32,
    pub height: u32,
    pub image_url: String,
    /// Session whose working extrinsics were used, if any.
    pub session_id: Option<String>,
    pub extrinsics: CameraExtrinsics,
    pub boxes: Vec<ProjectedBox>,
}

#[derive(Debug, Deserialize)]
struct ProjectionQuery {
    session: Option<String>,
}

fn project_labels(labels: &[LabelRecord], extr: &CameraExtrinsics, intr: &CameraIntrinsics) -> Vec<ProjectedBox> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| ProjectedBox {
            box_ref: i,
            class_name: l.class_name.clone(),
            track_id: l.bbox().track_id,
            corners: l.bbox().corners().iter().map(|c| project(c, extr, intr).into()).collect(),
        })
        .collect()
}

async fn projection(
    State(state): State<AppState>,
    UrlPath((frame, cam)): UrlPath<(String, String)>,
    Query(q): Query<ProjectionQuery>,
) -> ApiResult<Json<ProjectionResponse>> {
    locate(&state, &frame, &cam)?;
    let root = state.scene_root();
    let (calib, stored) = load_calib(&calib_path(root, &frame, &cam)).map_err(dataset_error)?;
    let extrinsics = match &q.session {
        None => stored,
        Some(id) => {
            let slot = state.get(id).ok_or_else(|| ApiError::not_found("unknown_session", format!("unknown session {id:?}")))?;
            let s = slot.session.lock().expect("session poisoned");
            if s.frame_id != frame || s.camera_id != cam {
                return Err(ApiError::new(
                    StatusCode::BAD_REQUEST,
                    "session_mismatch",
                    format!("session {id:?} is bound to {}/{}", s.frame_id, s.camera_id),
                ));
            }
            s.working
        }
    };
    let labels = load_labels(root, &frame).map_err(dataset_error)?;
    let intr = calib.intrinsics;
    Ok(Json(ProjectionResponse {
        image_url: format!("/frames/{frame}/cameras/{cam}/image"),
        boxes: project_labels(&labels, &extrinsics, &intr),
        frame_id: frame,
        camera_id: cam,
        width: intr.width,
        height: intr.height,
        session_id: q.session,
        extrinsics,
    }))
}

async fn image(State(state): State<AppState>, UrlPath((frame, cam)): UrlPath<(String, String)>, headers: HeaderMap) -> ApiResult<Response> {
    locate(&state, &frame, &cam)?;
    let path = image_path(state.scene_root(), &frame, &cam);
    let bytes = tokio::fs::read(&path).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ApiError::not_found("missing_file", format!("missing file: {}", path.display())),
        _ => ApiError::internal("dataset_error", format!("{}: {e}", path.display())),
    })?;
    let digest = Sha256::digest(&bytes);
    let etag = format!("\"{}\"", digest[..16].iter().map(|b| format!("{b:02x}")).collect::<String>());
    let etag_value = HeaderValue::from_str(&etag).expect("hex etag");
    let cache = HeaderValue::from_static("public, max-age=60, must-revalidate");
    if headers.get(header::IF_NONE_MATCH).is_some_and(|v| v.as_bytes() == etag.as_bytes()) {
        return Ok((StatusCode::NOT_MODIFIED, [(header::ETAG, etag_value), (header::CACHE_CONTROL, cache)]).into_response());
    }
    Ok((
        [(header::CONTENT_TYPE, HeaderValue::from_static("image/png")), (header::ETAG, etag_value), (header::CACHE_CONTROL, cache)],
        bytes,
    )
        .into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSession {
    pub frame_id: String,
    pub camera_id: String,
    /// Start from the frame's `keypoints.json` entries for this camera.
    #[serde(default)]
    pub import_keypoints: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub scene_root: PathBuf,
    pub frame_id: String,
    pub camera_id: String,
    pub intrinsics: CameraIntrinsics,
    pub working_extrinsics: CameraExtrinsics,
    pub keypoints: KeypointSet,
    pub identifiable: bool,
    pub history: Vec<OptimizationReport>,
    pub optimizing: bool,
    /// Calibration file written by the last commit.
    pub committed: Option<PathBuf>,
}

fn snapshot(state: &AppState, id: &str, s: &Session, optimizing: bool) -> SessionState {
    SessionState {
        session_id: id.to_string(),
        scene_root: state.scene_root().to_path_buf(),
        frame_id: s.frame_id.clone(),
        camera_id: s.camera_id.clone(),
        intrinsics: s.intrinsics,
        working_extrinsics: s.working,
        keypoints: s.keypoints.clone(),
        identifiable: s.keypoints.is_identifiable(),
        history: s.history.clone(),
        optimizing,
        committed: s.committed.clone(),
    }
}

fn slot(state: &AppState, id: &str) -> ApiResult<Arc<crate::state::SessionSlot>> {
    state.get(id).ok_or_else(|| ApiError::not_found("unknown_session", format!("unknown session {id:?}")))
}

async fn open_session(State(state): State<AppState>, Json(req): Json<OpenSession>) -> ApiResult<(StatusCode, Json<SessionState>)> {
    locate(&state, &req.frame_id, &req.camera_id)?;
    let root = state.scene_root();
    let (calib, working) = load_calib(&calib_path(root, &req.frame_id, &req.camera_id)).map_err(dataset_error)?;
    let boxes = load_labels(root, &req.frame_id).map_err(dataset_error)?.iter().map(|l| *l.bbox()).collect();
    let mut keypoints = KeypointSet::new(req.camera_id.clone());
    if req.import_keypoints {
        let path = dataset::keypoints_path(root, &req.frame_id);
        if path.exists() {
            let file = load_keypoints(&path).map_err(dataset_error)?;
            if let Some(set) = file.cameras.into_iter().find(|s| s.camera_id == req.camera_id) {
                keypoints = set;
            }
        }
    }
    let session = Session {
        frame_id: req.frame_id,
        camera_id: req.camera_id,
        intrinsics: calib.intrinsics,
        boxes,
        working,
        keypoints,
        history: vec![],
        committed: None,
    };
    let id = state.insert(session);
    let slot = slot(&state, &id)?;
    let s = slot.session.lock().expect("session poisoned");
    Ok((StatusCode::CREATED, Json(snapshot(&state, &id, &s, false))))
}

async fn session_state(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionState>> {
    let slot = slot(&state, &id)?;
    let busy = slot.optimizing.load(Ordering::Acquire);
    let s = slot.session.lock().expect("session poisoned");
    Ok(Json(snapshot(&state, &id, &s, busy)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeypointRemoval {
    pub box_ref: usize,
    pub corner_index: usize,
}

/// Upserts then removals, applied in that order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeypointEdits {
    #[serde(default)]
    pub upsert: Vec<Keypoint>,
    #[serde(default)]
    pub remove: Vec<KeypointRemoval>,
}

async fn edit_keypoints(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(edits): Json<KeypointEdits>,
) -> ApiResult<Json<KeypointSet>> {
    let slot = slot(&state, &id)?;
    let mut s = slot.session.lock().expect("session poisoned");
    let nboxes = s.boxes.len();
    for kp in &edits.upsert {
        if kp.box_ref >= nboxes {
            return Err(ApiError::unprocessable("invalid_keypoint", format!("box_ref {} out of range ({nboxes} boxes)", kp.box_ref)));
        }
        if kp.corner_index >= 8 {
            return Err(ApiError::unprocessable("invalid_keypoint", format!("corner_index {} out of range 0..8", kp.corner_index)));
        }
        if !kp.target.iter().all(|t| t.is_finite()) {
            return Err(ApiError::unprocessable("invalid_keypoint", "target must be finite"));
        }
    }
    for kp in edits.upsert {
        s.keypoints.upsert(kp);
    }
    for r in &edits.remove {
        s.keypoints.entries.retain(|k| !(k.box_ref == r.box_ref && k.corner_index == r.corner_index));
    }
    Ok(Json(s.keypoints.clone()))
}

async fn run_optimize(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<OptimizationReport>> {
    let slot = slot(&state, &id)?;
    if slot.optimizing.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_err() {
        return Err(ApiError::new(StatusCode::CONFLICT, "optimize_in_progress", format!("session {id:?} is already optimizing")));
    }
    let guard = FlightGuard(slot.clone());
    let (working, intr, keypoints, boxes) = {
        let s = slot.session.lock().expect("session poisoned");
        (s.working, s.intrinsics, s.keypoints.clone(), s.boxes.clone())
    };
    let cfg = state.inner.config.optimizer;
    let hook = state.inner.config.hooks.before_optimize.clone();
    let sid = id.clone();
    let result = tokio::task::spawn_blocking(move || {
        if let Some(h) = hook {
            h(&sid);
        }
        optimize(&working, &intr, &keypoints, &boxes, &cfg)
    })
    .await
    .map_err(|e| ApiError::internal("optimize_failed", format!("optimizer task failed: {e}")))?;
    let report = result.map_err(|e| match e {
        ExtrinsicError::InsufficientKeypoints { .. } => ApiError::unprocessable("insufficient_keypoints", e.to_string()),
        other => ApiError::unprocessable("optimize_failed", other.to_string()),
    })?;
    {
        let mut s = slot.session.lock().expect("session poisoned");
        s.working = report.optimized;
        s.history.push(report.clone());
    }
    drop(guard);
    Ok(Json(report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitResponse {
    pub path: PathBuf,
    pub calib: CalibFile,
}

async fn commit(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<CommitResponse>> {
    let slot = slot(&state, &id)?;
    let (frame, cam, calib) = {
        let s = slot.session.lock().expect("session poisoned");
        (s.frame_id.clone(), s.camera_id.clone(), CalibFile::new(s.camera_id.clone(), s.intrinsics, &s.working))
    };
    let path = calib_path(state.scene_root(), &frame, &cam);
    let bytes = to_json_bytes(&calib);
    let hook = state.inner.config.hooks.before_commit_rename.clone();
    let target = path.clone();
    tokio::task::spawn_blocking(move || {
        dataset::write_atomic_with(&target, &bytes, |tmp| match &hook {
            Some(h) => h(tmp),
            None => Ok(()),
        })
    })
    .await
    .map_err(|e| ApiError::internal("commit_failed", format!("commit task failed: {e}")))?
    .map_err(|e| ApiError::internal("commit_failed", e.to_string()))?;
    slot.session.lock().expect("session poisoned").committed = Some(path.clone());
    Ok(Json(CommitResponse { path, calib }))
}
