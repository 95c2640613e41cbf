//! HTTP annotation service. The service holds the state lock for its whole
//! lifetime and is the only writer; every mutation is applied to a copy,
//! persisted atomically, then swapped in.

use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use voxsel_core::model::{Annotation, IterationSummary};
use voxsel_core::pipeline::label_from_annotations;
use voxsel_core::sampling::QuotaRow;
use voxsel_core::store::{load_state, save_state, StateLock};
use voxsel_core::{ClusterId, Error, ErrorKind, PipelineState, Result, SampleId, Strategy};

pub struct Service {
    path: PathBuf,
    media_root: Option<PathBuf>,
    state: Mutex<PipelineState>,
    _lock: StateLock,
}

impl Service {
    pub fn open(path: impl AsRef<FsPath>, media_root: Option<PathBuf>) -> Result<Self> {
        let path = path.as_ref().to_owned();
        let lock = StateLock::acquire(&path)?;
        let state = load_state(&path)?;
        let media_root = match media_root {
            Some(root) => Some(std::fs::canonicalize(&root).map_err(|e| Error::io(&root, e))?),
            None => None,
        };
        Ok(Service {
            path,
            media_root,
            state: Mutex::new(state),
            _lock: lock,
        })
    }

    fn guard(&self) -> MutexGuard<'_, PipelineState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Persists `next` and makes it current.
    fn commit(&self, current: &mut PipelineState, next: PipelineState) -> Result<()> {
        save_state(&next, &self.path)?;
        *current = next;
        Ok(())
    }
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match (&self.0, self.0.kind()) {
            (Error::UnknownTask(_), _) => StatusCode::NOT_FOUND,
            (_, ErrorKind::Validation) => StatusCode::BAD_REQUEST,
            (_, ErrorKind::Conflict) => StatusCode::CONFLICT,
            (_, ErrorKind::Io) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = serde_json::json!({
            "error": { "code": self.0.code(), "message": self.0.to_string() }
        });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub iteration: u32,
    pub iterations: u32,
    pub strategy: Strategy,
    pub labeled: usize,
    pub unlabeled: usize,
    pub pending_iteration: Option<u32>,
    pub pending_batch_size: usize,
    pub pending_labeled: usize,
    pub complete: bool,
}

impl StateView {
    fn of(s: &PipelineState) -> Self {
        let pending = s.pending_batch.as_ref();
        StateView {
            iteration: s.iteration,
            iterations: s.config.iterations,
            strategy: s.config.strategy,
            labeled: s.labeled_ids.len(),
            unlabeled: s.unlabeled_ids.len(),
            pending_iteration: pending.map(|b| b.iteration),
            pending_batch_size: pending.map_or(0, |b| b.len()),
            pending_labeled: pending.map_or(0, |b| b.ids().filter(|id| s.annotations.contains_key(*id)).count()),
            complete: s.iteration > s.config.iterations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Labeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub sample_id: SampleId,
    pub audio_ref: Option<String>,
    pub cluster_id: Option<ClusterId>,
    pub score: Option<f64>,
    pub status: TaskStatus,
    pub submitted_text: Option<String>,
    pub submitted_at: Option<String>,
}

fn tasks_of(s: &PipelineState) -> Vec<AnnotationTask> {
    let Some(batch) = &s.pending_batch else {
        return Vec::new();
    };
    batch
        .chosen
        .iter()
        .map(|c| {
            let note = s.annotations.get(&c.id);
            AnnotationTask {
                sample_id: c.id.clone(),
                audio_ref: s.corpus.get(&c.id).and_then(|r| r.audio_ref.clone()),
                cluster_id: c.cluster,
                score: c.score,
                status: if note.is_some() { TaskStatus::Labeled } else { TaskStatus::Pending },
                submitted_text: note.map(|a| a.text.clone()),
                submitted_at: note.map(|a| a.submitted_at.clone()),
            }
        })
        .collect()
}

#[derive(Debug, Deserialize)]
pub struct TaskQuery {
    pub status: Option<TaskStatus>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelBody {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelResponse {
    pub task: AnnotationTask,
    /// False when an identical label was already recorded.
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterView {
    /// Absent for the noise group.
    pub cluster_id: Option<ClusterId>,
    pub size: usize,
    pub unlabeled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClustersView {
    pub clusters: Vec<ClusterView>,
    pub noise: ClusterView,
    pub include_noise: bool,
    /// Plan behind the pending batch, when it came from a quota draw.
    pub quota_plan: Option<Vec<QuotaRow>>,
}

async fn get_state(State(svc): State<Arc<Service>>) -> Json<StateView> {
    Json(StateView::of(&svc.guard()))
}

async fn get_tasks(State(svc): State<Arc<Service>>, Query(q): Query<TaskQuery>) -> Json<Vec<AnnotationTask>> {
    let mut tasks = tasks_of(&svc.guard());
    if let Some(status) = q.status {
        tasks.retain(|t| t.status == status);
    }
    Json(tasks)
}

async fn post_label(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    Json(body): Json<LabelBody>,
) -> ApiResult<LabelResponse> {
    let id = SampleId::new(id);
    let mut state = svc.guard();
    let batch = state.pending_batch.as_ref().ok_or(Error::NoPendingBatch)?;
    if !batch.ids().any(|x| *x == id) {
        return Err(Error::UnknownTask(id).into());
    }
    let changed = match state.annotations.get(&id) {
        Some(a) if a.text == body.text => false,
        Some(_) => return Err(Error::LabelConflict { id }.into()),
        None => {
            let mut next = state.clone();
            next.annotations.insert(
                id.clone(),
                Annotation {
                    text: body.text,
                    submitted_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                },
            );
            svc.commit(&mut state, next)?;
            true
        }
    };
    let task = tasks_of(&state)
        .into_iter()
        .find(|t| t.sample_id == id)
        .expect("task is in the pending batch");
    Ok(Json(LabelResponse { task, changed }))
}

async fn post_advance(State(svc): State<Arc<Service>>) -> ApiResult<StateView> {
    let mut state = svc.guard();
    let next = label_from_annotations(&state)?;
    svc.commit(&mut state, next)?;
    Ok(Json(StateView::of(&state)))
}

async fn get_report(State(svc): State<Arc<Service>>) -> Json<Vec<IterationSummary>> {
    Json(svc.guard().history.clone())
}

async fn get_clusters(State(svc): State<Arc<Service>>) -> ApiResult<ClustersView> {
    let state = svc.guard();
    let clusters = state.clusters.as_ref().ok_or(Error::MissingClusters)?;
    let view = |cluster_id, members: &std::collections::BTreeSet<SampleId>| ClusterView {
        cluster_id,
        size: members.len(),
        unlabeled: members.iter().filter(|id| state.unlabeled_ids.contains(*id)).count(),
    };
    Ok(Json(ClustersView {
        clusters: clusters.clusters.iter().map(|(k, m)| view(Some(*k), m)).collect(),
        noise: view(None, &clusters.noise),
        include_noise: state.config.cluster.include_noise,
        quota_plan: state
            .pending_batch
            .as_ref()
            .and_then(|b| b.quota_plan.as_ref())
            .map(|p| p.rows()),
    }))
}

/// Streams a sample's audio when its reference resolves inside the media
/// root.
async fn get_audio(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Response {
    let id = SampleId::new(id);
    let file = {
        let state = svc.guard();
        state.corpus.get(&id).and_then(|r| r.audio_ref.clone())
    };
    let (Some(root), Some(file)) = (&svc.media_root, file) else {
        return ApiError(Error::UnknownTask(id)).into_response();
    };
    let resolved = match std::fs::canonicalize(root.join(&file)) {
        Ok(p) if p.starts_with(root) => p,
        _ => return ApiError(Error::UnknownTask(id)).into_response(),
    };
    match std::fs::read(&resolved) {
        Ok(bytes) => ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response(),
        Err(e) => ApiError(Error::io(resolved, e)).into_response(),
    }
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/api/state", get(get_state))
        .route("/api/tasks", get(get_tasks))
        .route("/api/tasks/{id}/label", post(post_label))
        .route("/api/iterations/advance", post(post_advance))
        .route("/api/report", get(get_report))
        .route("/api/clusters", get(get_clusters))
        .route("/api/audio/{id}", get(get_audio))
        .with_state(svc)
}

pub fn run_blocking(state: &FsPath, host: &str, port: u16, media_root: Option<PathBuf>) -> Result<String> {
    let svc = Arc::new(Service::open(state, media_root)?);
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| Error::InvalidParameter(format!("bad listen address: {e}")))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io(state, e))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(state, e))?;
        eprintln!("serving {} on http://{addr}", state.display());
        axum::serve(listener, router(svc))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::io(state, e))
    })?;
    Ok(String::new())
}

