//! HTTP façade over the workspace. Every body is read from, or written to,
//! workspace artifacts; no pixel math happens here.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use recast_core::workspace::frame_file_name;
use recast_core::{ArtifactId, Error, Prompt, Workspace};
use recast_engine::pipeline::run_config;
use recast_engine::runlog::Observer;
use recast_engine::stub_service::DEFAULT_TAU;
use recast_engine::{plan, EventKind, PipelineConfig, RunError, RunOptions, StageKind, WorkerPool};
use serde::{Deserialize, Serialize};

use crate::ops::{self, OpError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Failed,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub state: JobState,
    pub current_stage: Option<StageKind>,
    pub progress: f64,
    pub message: Option<String>,
    /// Final sequence id once done.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<ArtifactId>,
    #[serde(skip)]
    output: String,
}

pub struct AppState {
    ws: Workspace,
    pool: WorkerPool,
    jobs: RwLock<HashMap<String, JobStatus>>,
    next_job: AtomicU64,
}

impl AppState {
    pub fn new(ws: Workspace, pool: WorkerPool) -> Arc<Self> {
        Arc::new(Self {
            ws,
            pool,
            jobs: RwLock::new(HashMap::new()),
            next_job: AtomicU64::new(1),
        })
    }

    fn job(&self, id: &str) -> Option<JobStatus> {
        self.jobs.read().unwrap_or_else(|p| p.into_inner()).get(id).cloned()
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut JobStatus)) {
        if let Some(j) = self.jobs.write().unwrap_or_else(|p| p.into_inner()).get_mut(id) {
            f(j);
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/sequences", get(list_sequences))
        .route("/api/sequences/{name}/frames/{i}", get(sequence_frame))
        .route("/api/prompt", post(prompt))
        .route("/api/masks/{id}/frames/{i}", get(mask_frame))
        .route("/api/jobs", post(create_job))
        .route("/api/jobs/{id}", get(job_status))
        .route("/api/jobs/{id}/result/frames/{i}", get(job_frame))
        .with_state(state)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

pub struct ApiError(StatusCode, ErrorBody);

impl ApiError {
    fn not_found(what: impl Into<String>) -> Self {
        ApiError(
            StatusCode::NOT_FOUND,
            ErrorBody {
                code: "not_found".into(),
                message: what.into(),
            },
        )
    }

    fn from_error(e: &Error) -> Self {
        let status = match e {
            Error::Prompt(_) | Error::Config(_) | Error::Json(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(
            status,
            ErrorBody {
                code: e.code().into(),
                message: e.to_string(),
            },
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], Body::from(bytes)).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.unwrap_or_else(|e| {
        Err(ApiError(
            StatusCode::INTERNAL_SERVER_ERROR,
            ErrorBody {
                code: "internal".into(),
                message: e.to_string(),
            },
        ))
    })
}

#[derive(Serialize)]
struct SequenceInfo {
    name: String,
    frames: usize,
    dims: (u32, u32),
    fps: recast_core::Fps,
    id: ArtifactId,
}

async fn list_sequences(State(st): State<Arc<AppState>>) -> ApiResult<Json<Vec<SequenceInfo>>> {
    let m = st.ws.manifest().map_err(|e| ApiError::from_error(&e))?;
    Ok(Json(
        m.sequences
            .into_iter()
            .map(|(name, e)| SequenceInfo {
                name,
                frames: e.frames,
                dims: e.dims,
                fps: e.fps,
                id: e.id,
            })
            .collect(),
    ))
}

fn frame_file(st: &AppState, name: &str, i: usize) -> ApiResult<Response> {
    let entry = st
        .ws
        .sequence_entry(name)
        .map_err(|e| ApiError::from_error(&e))?
        .ok_or_else(|| ApiError::not_found(format!("no sequence {name:?}")))?;
    if i >= entry.frames {
        return Err(ApiError::not_found(format!("{name} has {} frames", entry.frames)));
    }
    let bytes = std::fs::read(st.ws.seq_dir(name).join(frame_file_name(i)))
        .map_err(|_| ApiError::not_found(format!("frame {i} of {name} is missing")))?;
    Ok(png(bytes))
}

async fn sequence_frame(State(st): State<Arc<AppState>>, Path((name, i)): Path<(String, usize)>) -> ApiResult<Response> {
    blocking(move || frame_file(&st, &name, i)).await
}

#[derive(Deserialize)]
struct PromptQuery {
    sequence: Option<String>,
    tau: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PromptReply {
    pub mask_id: ArtifactId,
    pub frames: usize,
}

/// Track the prompt through the sequence (`?sequence=`, or the only one
/// ingested) and return the mask sequence id.
async fn prompt(
    State(st): State<Arc<AppState>>,
    Query(q): Query<PromptQuery>,
    body: String,
) -> ApiResult<Json<PromptReply>> {
    let prompt: Prompt = serde_json::from_str(&body).map_err(|e| ApiError::from_error(&Error::Json(e)))?;
    blocking(move || {
        let name = match q.sequence {
            Some(n) => n,
            None => {
                let m = st.ws.manifest().map_err(|e| ApiError::from_error(&e))?;
                let mut names = m.sequences.into_keys();
                match (names.next(), names.next()) {
                    (Some(only), None) => only,
                    _ => {
                        return Err(ApiError::from_error(&Error::Config(
                            "pass ?sequence= when the workspace holds several sequences".into(),
                        )))
                    }
                }
            }
        };
        if st.ws.sequence_entry(&name).ok().flatten().is_none() {
            return Err(ApiError::not_found(format!("no sequence {name:?}")));
        }
        let masks = ops::segment(&st.ws, &st.pool, &name, &prompt, q.tau.unwrap_or(DEFAULT_TAU)).map_err(|e| match e {
            OpError::Input(e) | OpError::Stage(_, e) => ApiError::from_error(&e),
        })?;
        Ok(Json(PromptReply {
            mask_id: masks.id(),
            frames: masks.len(),
        }))
    })
    .await
}

async fn mask_frame(State(st): State<Arc<AppState>>, Path((id, i)): Path<(String, usize)>) -> ApiResult<Response> {
    blocking(move || {
        let id: ArtifactId = id.parse().map_err(|_| ApiError::not_found("unknown mask id"))?;
        let masks = st
            .ws
            .get_masks(&id)
            .map_err(|e| ApiError::from_error(&e))?
            .ok_or_else(|| ApiError::not_found("unknown mask id"))?;
        let m = masks
            .masks()
            .get(i)
            .ok_or_else(|| ApiError::not_found(format!("mask sequence has {} frames", masks.len())))?;
        Ok(png(m.to_png().map_err(|e| ApiError::from_error(&e))?))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JobReply {
    pub job_id: String,
}

async fn create_job(State(st): State<Arc<AppState>>, body: String) -> ApiResult<Json<JobReply>> {
    let config: PipelineConfig = serde_json::from_str(&body).map_err(|e| ApiError::from_error(&Error::Json(e)))?;
    let st2 = st.clone();
    let total = blocking(move || {
        plan(&config, &st2.ws)
            .map(|p| (p.nodes.len(), config))
            .map_err(|e| ApiError::from_error(&e))
    })
    .await?;
    let (total, config) = total;
    let job_id = format!("job-{}", st.next_job.fetch_add(1, Ordering::Relaxed));
    st.jobs.write().unwrap_or_else(|p| p.into_inner()).insert(
        job_id.clone(),
        JobStatus {
            job_id: job_id.clone(),
            state: JobState::Queued,
            current_stage: None,
            progress: 0.0,
            message: None,
            result: None,
            output: config.output.clone(),
        },
    );
    let id = job_id.clone();
    std::thread::spawn(move || run_job(st, id, config, total));
    Ok(Json(JobReply { job_id }))
}

fn run_job(st: Arc<AppState>, id: String, config: PipelineConfig, total: usize) {
    st.update(&id, |j| j.state = JobState::Running);
    let completed = Arc::new(AtomicU64::new(0));
    let observer: Observer = {
        let st = st.clone();
        let id = id.clone();
        Arc::new(move |ev| {
            let finished = matches!(ev.event, EventKind::StageDone | EventKind::CacheHit);
            let n = if finished {
                completed.fetch_add(1, Ordering::SeqCst) + 1
            } else {
                completed.load(Ordering::SeqCst)
            };
            st.update(&id, |j| {
                j.current_stage = Some(ev.stage);
                j.progress = n as f64 / total as f64;
            });
        })
    };
    let opts = RunOptions {
        observer: Some(observer),
        ..RunOptions::default()
    };
    let result = run_config(&config, &st.ws, &opts);
    st.update(&id, |j| match result {
        Ok(report) => {
            j.state = JobState::Done;
            j.progress = 1.0;
            j.result = report.final_id;
        }
        Err(e) => {
            j.state = JobState::Failed;
            if let RunError::Stage { stage, .. } = &e {
                j.current_stage = Some(*stage);
            }
            j.message = Some(e.to_string());
        }
    });
}

async fn job_status(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<JobStatus>> {
    st.job(&id).map(Json).ok_or_else(|| ApiError::not_found(format!("no job {id:?}")))
}

async fn job_frame(State(st): State<Arc<AppState>>, Path((id, i)): Path<(String, usize)>) -> ApiResult<Response> {
    let job = st.job(&id).ok_or_else(|| ApiError::not_found(format!("no job {id:?}")))?;
    if job.state != JobState::Done {
        return Err(ApiError::not_found(format!("job {id} has no result yet")));
    }
    blocking(move || frame_file(&st, &job.output, i)).await
}
