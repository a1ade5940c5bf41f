use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, Method, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tower_http::cors::{Any, CorsLayer};

use super::{
    ApiError, AppState, FrameView, JobState, JobStatus, LinkCommand, LinkResponse, SceneSummary, TrajectoriesView,
};

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/scenes", get(list_scenes))
        .route("/scenes/{id}", get(scene_summary))
        .route("/scenes/{id}/frames/{k}", get(frame))
        .route("/scenes/{id}/trajectories", get(trajectories))
        .route("/scenes/{id}/links", post(link))
        .route("/scenes/{id}/refine", post(refine))
        .route("/jobs/{id}", get(job))
        .layer(cors)
        .with_state(state)
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn list_scenes(State(app): State<Arc<AppState>>) -> ApiResult<Vec<SceneSummary>> {
    let mut out = Vec::new();
    for id in app.scene_ids()? {
        out.push(app.scene(&id).await?.summary());
    }
    Ok(Json(out))
}

async fn scene_summary(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<SceneSummary> {
    Ok(Json(app.scene(&id).await?.summary()))
}

#[derive(Debug, Deserialize)]
struct FrameQuery {
    decimate: Option<usize>,
    revision: Option<u32>,
}

async fn frame(
    State(app): State<Arc<AppState>>,
    Path((id, k)): Path<(String, usize)>,
    Query(q): Query<FrameQuery>,
) -> ApiResult<FrameView> {
    let scene = app.scene(&id).await?;
    let n = q.decimate.unwrap_or(app.cfg.default_decimate);
    Ok(Json(blocking(move || scene.frame(k, n, q.revision)).await?))
}

#[derive(Debug, Deserialize)]
struct TrajectoryQuery {
    revision: Option<u32>,
}

async fn trajectories(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<TrajectoryQuery>,
) -> ApiResult<TrajectoriesView> {
    let scene = app.scene(&id).await?;
    let static_cfg = app.cfg.static_cfg.clone();
    Ok(Json(blocking(move || scene.trajectories(q.revision.unwrap_or(0), &static_cfg)).await?))
}

async fn link(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(cmd): Json<LinkCommand>,
) -> ApiResult<LinkResponse> {
    let scene = app.scene(&id).await?;
    let out = blocking(move || scene.link(&cmd)).await?;
    log::info!("scene {id}: edit {} merged into {}", out.seq, out.merged);
    Ok(Json(out))
}

async fn refine(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<(StatusCode, Json<JobStatus>), ApiError> {
    let models = app
        .cfg
        .models
        .clone()
        .ok_or_else(|| ApiError::Unavailable("the service was started without checkpoints".into()))?;
    let scene = app.scene(&id).await?;
    let job = app.new_job_id();
    let (trajectories, edits) = scene.begin_job(job)?;
    let queued = JobStatus {
        id: job,
        scene: id.clone(),
        state: JobState::Queued,
        edits,
        revision: None,
        before: None,
        after: None,
        delta: None,
        error: None,
    };
    app.publish(queued.clone());
    let worker = app.clone();
    let mut status = queued.clone();
    tokio::spawn(async move {
        status.state = JobState::Running;
        worker.publish(status.clone());
        let s = scene.clone();
        let res = blocking(move || s.refine(&models, &trajectories, job, edits)).await;
        match res {
            Ok((n, before, after)) => {
                status.state = JobState::Done;
                status.revision = Some(n);
                status.delta = Some(after.fractions.iter().zip(&before.fractions).map(|(a, b)| a - b).collect());
                status.before = Some(before);
                status.after = Some(after);
                log::info!("scene {}: job {job} wrote revision {n}", status.scene);
            }
            Err(e) => {
                status.state = JobState::Failed;
                status.error = Some(e.to_string());
                log::error!("scene {}: job {job} failed: {e}", status.scene);
            }
        }
        // free the scene first so a client that sees `done` can refine again
        scene.end_job();
        worker.publish(status);
    });
    Ok((StatusCode::ACCEPTED, Json(queued)))
}

async fn job(State(app): State<Arc<AppState>>, Path(id): Path<u64>) -> ApiResult<JobStatus> {
    app.job(id)
        .map(Json)
        .ok_or_else(|| ApiError::NotFound(format!("job {id}")))
}
