use std::sync::Arc;

use affwild::annotation::{Dimension, VideoEntry};
use axum::body::Body;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Request, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower::ServiceExt;
use tower_http::services::{ServeDir, ServeFile};

use crate::{ServeOptions, ServiceError, SessionStore, SessionSummary};

type Shared = Arc<SessionStore>;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (
            self.status(),
            Json(serde_json::json!({ "error": self.to_string() })),
        )
            .into_response()
    }
}

/// JSON body extractor whose failures use the service error shape.
struct Body422<T>(T);

impl<T, S> axum::extract::FromRequest<S> for Body422<T>
where
    Json<T>: axum::extract::FromRequest<S, Rejection = JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ServiceError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| Body422(v))
            .map_err(|e| ServiceError::Validation(e.body_text()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoInfo {
    pub id: String,
    pub frame_rate: f64,
    pub frame_count: usize,
    pub duration: f64,
    /// Path under this service, when the manifest names a media file.
    pub media_url: Option<String>,
}

impl VideoInfo {
    fn of(v: &VideoEntry) -> Self {
        VideoInfo {
            id: v.id.clone(),
            frame_rate: v.frame_rate,
            frame_count: v.frame_count,
            duration: v.duration(),
            media_url: v.media.as_ref().map(|_| format!("/media/{}", v.id)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub video_id: String,
    pub frame_rate: f64,
    pub times: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenRequest {
    pub annotator_id: String,
    pub video_id: String,
    pub dimension: Dimension,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PushRequest {
    pub samples: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedSession {
    pub session_id: String,
    pub path: String,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Review {
    #[serde(flatten)]
    pub session: SessionSummary,
    pub video: VideoInfo,
    pub samples: Vec<(f64, f64)>,
}

fn video(store: &SessionStore, id: &str) -> Result<VideoEntry, ServiceError> {
    store
        .manifest()
        .video(id)
        .cloned()
        .ok_or_else(|| ServiceError::NotFound(format!("no video {id}")))
}

async fn list_videos(State(st): State<Shared>) -> Json<Vec<VideoInfo>> {
    Json(st.manifest().videos.iter().map(VideoInfo::of).collect())
}

async fn frame_timing(
    State(st): State<Shared>,
    Path(id): Path<String>,
) -> Result<Json<FrameTiming>, ServiceError> {
    let v = video(&st, &id)?;
    Ok(Json(FrameTiming {
        video_id: v.id,
        frame_rate: v.frame_rate,
        times: (0..v.frame_count)
            .map(|f| f as f64 / v.frame_rate)
            .collect(),
    }))
}

async fn media(
    State(st): State<Shared>,
    Path(id): Path<String>,
    req: Request,
) -> Result<Response, ServiceError> {
    let v = video(&st, &id)?;
    let path = v
        .media
        .map(|p| st.manifest().resolve(&p))
        .ok_or_else(|| ServiceError::NotFound(format!("video {id} has no media file")))?;
    let res = ServeFile::new(path)
        .oneshot(req)
        .await
        .map_err(|e| ServiceError::Io(e.to_string()))?;
    Ok(res.map(Body::new))
}

async fn list_sessions(State(st): State<Shared>) -> Json<Vec<SessionSummary>> {
    Json(st.sessions())
}

async fn open_session(
    State(st): State<Shared>,
    Body422(req): Body422<OpenRequest>,
) -> Result<(StatusCode, Json<SessionSummary>), ServiceError> {
    let s = st.open_session(&req.annotator_id, &req.video_id, req.dimension)?;
    Ok((StatusCode::CREATED, Json(s)))
}

async fn session(
    State(st): State<Shared>,
    Path(id): Path<String>,
) -> Result<Json<SessionSummary>, ServiceError> {
    st.summary(&id).map(Json)
}

async fn push(
    State(st): State<Shared>,
    Path(id): Path<String>,
    Body422(req): Body422<PushRequest>,
) -> Result<Json<crate::PushOutcome>, ServiceError> {
    st.push_samples(&id, &req.samples).map(Json)
}

async fn close(
    State(st): State<Shared>,
    Path(id): Path<String>,
) -> Result<Json<ClosedSession>, ServiceError> {
    let path = st.close_session(&id)?;
    let samples = st.summary(&id)?.sample_count;
    Ok(Json(ClosedSession {
        session_id: id,
        path: path.display().to_string(),
        samples,
    }))
}

async fn review(
    State(st): State<Shared>,
    Path(id): Path<String>,
) -> Result<Json<Review>, ServiceError> {
    let (session, samples) = st.review(&id)?;
    let video = VideoInfo::of(&video(&st, &session.meta.video_id)?);
    Ok(Json(Review {
        session,
        video,
        samples,
    }))
}

pub fn router(store: Arc<SessionStore>, opts: &ServeOptions) -> Router {
    let api = Router::new()
        .route("/videos", get(list_videos))
        .route("/videos/{id}/frames", get(frame_timing))
        .route("/media/{id}", get(media))
        .route("/sessions", get(list_sessions).post(open_session))
        .route("/sessions/{id}", get(session))
        .route("/sessions/{id}/samples", post(push))
        .route("/sessions/{id}/close", post(close))
        .route("/sessions/{id}/review", get(review))
        .with_state(store);
    match &opts.ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}
