//! HTTP/JSON service for the interactive calibration loop.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | GET | `/frames` | | `[FrameSummary]` |
//! | GET | `/frames/{id}/cameras/{cam}/projection?session=` | | `ProjectionResponse` |
//! | GET | `/frames/{id}/cameras/{cam}/image` | | PNG, `ETag` + `Cache-Control` |
//! | POST | `/sessions` | `OpenSession` | `SessionState` (201) |
//! | GET | `/sessions/{id}` | | `SessionState` |
//! | POST | `/sessions/{id}/keypoints` | `KeypointEdits` | `KeypointSet` |
//! | POST | `/sessions/{id}/optimize` | | `OptimizationReport` |
//! | POST | `/sessions/{id}/commit` | | `CommitResponse` |
//!
//! Errors are `{"code", "message"}` with codes such as `unknown_frame`,
//! `unknown_camera`, `unknown_session`, `invalid_keypoint`,
//! `insufficient_keypoints`, `optimize_in_progress`, `optimize_failed`,
//! `commit_failed` and `dataset_error`.
//!
//! Working extrinsics stay in the session until commit. Each session has its
//! own lock; optimization runs on the blocking pool so other sessions keep
//! moving.

mod error;
mod routes;
mod state;

pub use error::{ApiError, ErrorBody};
pub use routes::{
    router, CommitResponse, CornerProjection, FrameSummary, KeypointEdits, KeypointRemoval, OpenSession, ProjectedBox,
    ProjectionResponse, SessionState,
};
pub use state::{AppState, CommitHook, Hooks, OptimizeHook, ServiceConfig};

use std::net::SocketAddr;

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("calibration service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
