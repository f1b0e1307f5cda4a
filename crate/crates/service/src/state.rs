use roadsim_core::extrinsics::{KeypointSet, OptimizationReport, OptimizerConfig};
use roadsim_core::geometry::{Box3D, CameraExtrinsics, CameraIntrinsics};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

/// Runs between the temp-file write and the rename of a commit. Returning an
/// error aborts the commit as a crash would.
pub type CommitHook = Arc<dyn Fn(&Path) -> std::io::Result<()> + Send + Sync>;
/// Runs on the blocking pool just before an optimization starts.
pub type OptimizeHook = Arc<dyn Fn(&str) + Send + Sync>;

/// Test and fault-injection seams.
#[derive(Clone, Default)]
pub struct Hooks {
    pub before_commit_rename: Option<CommitHook>,
    pub before_optimize: Option<OptimizeHook>,
}

#[derive(Clone, Default)]
pub struct ServiceConfig {
    pub optimizer: OptimizerConfig,
    pub hooks: Hooks,
}

pub(crate) struct Session {
    pub frame_id: String,
    pub camera_id: String,
    pub intrinsics: CameraIntrinsics,
    pub boxes: Vec<Box3D>,
    pub working: CameraExtrinsics,
    pub keypoints: KeypointSet,
    pub history: Vec<OptimizationReport>,
    pub committed: Option<PathBuf>,
}

pub(crate) struct SessionSlot {
    pub session: Mutex<Session>,
    pub optimizing: AtomicBool,
}

/// Clears the single-flight flag even if the optimization panics.
pub(crate) struct FlightGuard(pub Arc<SessionSlot>);

impl Drop for FlightGuard {
    fn drop(&mut self) {
        self.0.optimizing.store(false, Ordering::Release);
    }
}

#[derive(Clone)]
pub struct AppState {
    pub(crate) inner: Arc<Inner>,
}

pub(crate) struct Inner {
    pub scene_root: PathBuf,
    pub config: ServiceConfig,
    pub sessions: RwLock<HashMap<String, Arc<SessionSlot>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(scene_root: impl Into<PathBuf>, config: ServiceConfig) -> Self {
        Self {
            inner: Arc::new(Inner {
                scene_root: scene_root.into(),
                config,
                sessions: RwLock::new(HashMap::new()),
                next_id: AtomicU64::new(1),
            }),
        }
    }

    pub fn scene_root(&self) -> &Path {
        &self.inner.scene_root
    }

    pub(crate) fn insert(&self, session: Session) -> String {
        let id = format!("s{}", self.inner.next_id.fetch_add(1, Ordering::Relaxed));
        let slot = Arc::new(SessionSlot { session: Mutex::new(session), optimizing: AtomicBool::new(false) });
        self.inner.sessions.write().expect("session map poisoned").insert(id.clone(), slot);
        id
    }

    pub(crate) fn get(&self, id: &str) -> Option<Arc<SessionSlot>> {
        self.inner.sessions.read().expect("session map poisoned").get(id).cloned()
    }
}
