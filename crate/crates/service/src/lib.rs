//! Loopback annotation service.
//!
//! A browser client opens a session for one (annotator, video, dimension),
//! streams `(media time, value)` samples in batches, and closes the session,
//! which writes an `affwild-trace` file that the annotation pipeline reads.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | GET | `/videos` | | registered videos with frame timing |
//! | GET | `/videos/{id}/frames` | | per-frame media times in seconds |
//! | GET | `/media/{id}` | | the video file, with range support |
//! | GET | `/sessions` | | every session summary |
//! | POST | `/sessions` | `{annotator_id, video_id, dimension}` | new session summary |
//! | GET | `/sessions/{id}` | | session summary |
//! | POST | `/sessions/{id}/samples` | `{samples: [[t, v], ...]}` | accepted count and per-index rejections |
//! | POST | `/sessions/{id}/close` | | trace file path |
//! | GET | `/sessions/{id}/review` | | stored samples and video reference |
//!
//! Errors reply `{"error": message}` with 404 (unknown video or session),
//! 409 (wrong session state), 422 (invalid request) or 500.

mod http;
mod store;

use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;

use axum::http::StatusCode;

pub use http::{router, ClosedSession, FrameTiming, OpenRequest, PushRequest, Review, VideoInfo};
pub use store::{PushOutcome, Rejection, SessionMeta, SessionState, SessionStore, SessionSummary};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ServeOptions {
    /// Static files for the browser client, served at `/`.
    pub ui_dir: Option<PathBuf>,
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    store: Arc<SessionStore>,
    opts: ServeOptions,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(store, &opts))
        .with_graceful_shutdown(shutdown)
        .await
}
