//! HTTP label service over a scene store.
//!
//! Scenes load lazily from `scene_<id>/` directories. Annotator links are
//! appended to `scene_<id>/edits.jsonl` before they are applied, and every
//! refinement job writes a new immutable `scene_<id>/revisions/rev_NNNN.json`.

mod error;
mod routes;
mod scene;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::Router;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use auto4d_core::eval::EvalTable;
use auto4d_core::path_branch::{PathBranchConfig, PathModel};
use auto4d_core::size_branch::SizeModel;
use auto4d_core::store::FrameRecord;

pub use error::ApiError;
pub use routes::router;
pub use scene::{apply_link, read_journal, SceneHandle, JOURNAL, REVISIONS};

/// Frozen models used by refinement jobs.
#[derive(Debug, Clone)]
pub struct RefineModels {
    pub size: SizeModel,
    pub path: PathModel,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub store: PathBuf,
    pub models: Option<RefineModels>,
    /// Ground-truth boxes with fewer returns are left out of every metric.
    pub min_points: usize,
    /// Static classification for the current (unrefined) trajectories.
    pub static_cfg: PathBranchConfig,
    /// Point decimation when the request does not give one.
    pub default_decimate: usize,
}

impl ServiceConfig {
    pub fn new(store: impl Into<PathBuf>) -> Self {
        Self {
            store: store.into(),
            models: None,
            min_points: auto4d_core::eval::BenchmarkConfig::default().min_points,
            static_cfg: PathBranchConfig::default(),
            default_decimate: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub id: String,
    pub frame_count: usize,
    /// Labelable ground-truth trajectories.
    pub gt_trajectories: usize,
    pub init_trajectories: usize,
    pub current_trajectories: usize,
    pub edits: usize,
    pub revisions: Vec<u32>,
    /// Current trajectories against ground truth.
    pub current: EvalTable,
    /// Latest refined revision against ground truth.
    pub latest: Option<EvalTable>,
}

/// Request body of `POST /scenes/{id}/links`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkCommand {
    /// Must match the path when given.
    #[serde(default)]
    pub scene: Option<String>,
    pub a: u64,
    pub b: u64,
    #[serde(default)]
    pub annotator: String,
    /// Milliseconds since the Unix epoch; filled in by the service when absent.
    #[serde(default)]
    pub timestamp_ms: Option<u64>,
}

/// One line of `edits.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: usize,
    pub a: u64,
    pub b: u64,
    pub merged: u64,
    pub annotator: String,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkResponse {
    pub merged: u64,
    pub trajectories: usize,
    pub seq: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: u64,
    pub scene: String,
    pub state: JobState,
    /// Journal length the job started from.
    pub edits: usize,
    pub revision: Option<u32>,
    pub before: Option<EvalTable>,
    pub after: Option<EvalTable>,
    /// `after - before` per threshold.
    pub delta: Option<Vec<f64>>,
    pub error: Option<String>,
}

/// Contents of `revisions/rev_NNNN.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionFile {
    pub revision: u32,
    pub job: u64,
    pub edits: usize,
    pub before: EvalTable,
    pub after: EvalTable,
    pub trajectories: Vec<auto4d_core::store::TrajectoryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxView {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub w: f64,
    pub l: f64,
    pub score: f64,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameView {
    pub scene: String,
    pub frame: usize,
    pub t: f64,
    pub ego: auto4d_core::Pose2D,
    pub decimate: usize,
    pub total_points: usize,
    /// `[x, y, z, t]` of every `decimate`-th return.
    pub points: Vec<[f64; 4]>,
    pub gt: Vec<BoxView>,
    /// Current trajectories: the initialization with annotator links applied.
    pub init: Vec<BoxView>,
    pub refined: Vec<BoxView>,
    pub refined_revision: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameIou {
    #[serde(flatten)]
    pub record: FrameRecord,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryView {
    pub id: u64,
    #[serde(rename = "static")]
    pub static_flag: Option<bool>,
    pub frames: Vec<FrameIou>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoriesView {
    pub scene: String,
    /// 0 for the current trajectories.
    pub revision: u32,
    pub trajectories: Vec<TrajectoryView>,
}

/// Shared service state.
pub struct AppState {
    pub cfg: ServiceConfig,
    scenes: Mutex<BTreeMap<String, Arc<SceneHandle>>>,
    jobs: RwLock<BTreeMap<u64, JobStatus>>,
    next_job: AtomicU64,
}

impl AppState {
    pub fn new(cfg: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            cfg,
            scenes: Mutex::new(BTreeMap::new()),
            jobs: RwLock::new(BTreeMap::new()),
            next_job: AtomicU64::new(1),
        })
    }

    /// Loads (once) and returns a scene; journal replay happens on load.
    pub async fn scene(&self, id: &str) -> Result<Arc<SceneHandle>, ApiError> {
        let valid = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !valid {
            return Err(ApiError::NotFound(format!("scene {id}")));
        }
        let mut scenes = self.scenes.lock().await;
        if let Some(s) = scenes.get(id) {
            return Ok(s.clone());
        }
        let dir = auto4d_core::store::scene_dir(&self.cfg.store, id);
        if !dir.join(auto4d_core::store::MANIFEST).is_file() {
            return Err(ApiError::NotFound(format!("scene {id}")));
        }
        let (id_owned, min_points) = (id.to_string(), self.cfg.min_points);
        let handle = tokio::task::spawn_blocking(move || SceneHandle::load(id_owned, dir, min_points))
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))??;
        let handle = Arc::new(handle);
        scenes.insert(id.to_string(), handle.clone());
        Ok(handle)
    }

    pub fn scene_ids(&self) -> Result<Vec<String>, ApiError> {
        Ok(auto4d_core::store::list_scenes(&self.cfg.store)?)
    }

    pub fn job(&self, id: u64) -> Option<JobStatus> {
        self.jobs.read().expect("job table lock").get(&id).cloned()
    }

    fn new_job_id(&self) -> u64 {
        self.next_job.fetch_add(1, Ordering::Relaxed)
    }

    fn publish(&self, status: JobStatus) {
        self.jobs.write().expect("job table lock").insert(status.id, status);
    }
}

/// Serves until ctrl-c.
pub async fn serve(cfg: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let state = AppState::new(cfg);
    let app: Router = router(state);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("label service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
