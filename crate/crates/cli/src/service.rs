//! JSON-over-HTTP service around one loaded model.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use xinr::inverter::{Candidate, SearchOutcome};
use xinr::ExplorableModel;

use crate::engine::{self, DataInfo, SearchRequest};
use crate::error::ApiError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Done,
    Failed,
}

/// A search job; partial fields fill in as restarts finish.
#[derive(Clone, Debug, Serialize)]
pub struct Job {
    pub id: u64,
    pub status: JobStatus,
    pub restarts: usize,
    pub restarts_done: usize,
    /// Kept boxes so far, by increasing divergence.
    pub candidates: Vec<Candidate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<SearchOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
}

pub struct AppState {
    pub model: Option<Arc<ExplorableModel>>,
    pub data: Option<DataInfo>,
    jobs: Mutex<HashMap<u64, Job>>,
    next_job: AtomicU64,
}

impl AppState {
    pub fn new(model: Option<ExplorableModel>, data: Option<DataInfo>) -> Arc<Self> {
        Arc::new(Self { model: model.map(Arc::new), data, jobs: Mutex::new(HashMap::new()), next_job: AtomicU64::new(1) })
    }

    fn model(&self) -> Result<Arc<ExplorableModel>, ApiError> {
        self.model.clone().ok_or_else(ApiError::not_loaded)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type Reply = Result<Json<Value>, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    Ok(serde_json::from_slice(body)?)
}

fn to_json<T: Serialize>(v: T) -> Json<Value> {
    Json(serde_json::to_value(v).expect("serializable response"))
}

/// Parses the body and runs `f` on a blocking thread against the model.
async fn compute<T, R>(state: Arc<AppState>, body: Bytes, f: fn(&ExplorableModel, &T) -> Result<R, ApiError>) -> Reply
where
    T: DeserializeOwned + Send + 'static,
    R: Serialize + Send + 'static,
{
    let model = state.model()?;
    let req: T = parse(&body)?;
    let out = tokio::task::spawn_blocking(move || f(&model, &req))
        .await
        .map_err(|e| ApiError::new(500, "internal", e.to_string()))??;
    Ok(to_json(out))
}

async fn info(State(state): State<Arc<AppState>>) -> Reply {
    let model = state.model()?;
    Ok(to_json(engine::model_info(&model, state.data.clone())))
}

async fn point(State(state): State<Arc<AppState>>, body: Bytes) -> Reply {
    compute(state, body, engine::query_point).await
}

async fn dist(State(state): State<Arc<AppState>>, body: Bytes) -> Reply {
    compute(state, body, engine::query_dist).await
}

async fn slice(State(state): State<Arc<AppState>>, body: Bytes) -> Reply {
    compute(state, body, engine::field_slice).await
}

async fn start_search(State(state): State<Arc<AppState>>, body: Bytes) -> Result<(StatusCode, Json<Value>), ApiError> {
    let model = state.model()?;
    let req: SearchRequest = parse(&body)?;
    req.target.validate()?;
    let id = state.next_job.fetch_add(1, Ordering::Relaxed);
    let job = Job {
        id,
        status: JobStatus::Running,
        restarts: req.options().restarts,
        restarts_done: 0,
        candidates: vec![],
        result: None,
        error: None,
    };
    let reply = to_json(&job);
    state.jobs.lock().expect("job table").insert(id, job);
    let worker = state.clone();
    tokio::task::spawn_blocking(move || {
        let update = |f: &dyn Fn(&mut Job)| f(worker.jobs.lock().expect("job table").get_mut(&id).expect("job"));
        let outcome = engine::run_search(&model, &req, |_, kept, _| {
            update(&|j| {
                j.restarts_done += 1;
                j.candidates.extend_from_slice(kept);
                j.candidates.sort_by(|a, b| {
                    (a.divergence, a.restart, a.iteration).partial_cmp(&(b.divergence, b.restart, b.iteration)).expect("finite")
                });
            })
        });
        update(&|j| match &outcome {
            Ok(o) => {
                j.candidates = o.candidates.clone();
                j.result = Some(o.clone());
                j.status = JobStatus::Done;
            }
            Err(e) => {
                j.error = Some(e.clone());
                j.status = JobStatus::Failed;
            }
        });
    });
    Ok((StatusCode::ACCEPTED, reply))
}

async fn poll_search(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Reply {
    let id: u64 = id.parse().map_err(|_| ApiError::bad_request(format!("bad job id `{id}`"), Some("id")))?;
    let jobs = state.jobs.lock().expect("job table");
    let job = jobs.get(&id).ok_or_else(|| ApiError::not_found(format!("no search job {id}")))?;
    Ok(to_json(job))
}

async fn fallback() -> ApiError {
    ApiError::not_found("no such endpoint".into())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/model/info", get(info))
        .route("/query/point", post(point))
        .route("/query/dist", post(dist))
        .route("/field/slice", post(slice))
        .route("/search", post(start_search))
        .route("/search/{id}", get(poll_search))
        .fallback(fallback)
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("{}", serde_json::json!({ "listening": listener.local_addr()?.to_string() }));
    axum::serve(listener, router(state)).await
}
