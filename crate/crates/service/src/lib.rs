//! HTTP control plane for FSM-gated runs: start runs, follow their traces
//! over server-sent events, answer clarifications and halt runs.

mod error;
mod runs;

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::routing::{get, post};
use axum::{Json, Router};
use dvr_core::eval::{bundled_suite_dir, load_suite, ScriptMode, ScriptRef, TaskEnv, TaskSpec};
use dvr_core::fsm::{DecisionMatrix, EngineConfig, RunOutcome};
use dvr_core::planner::{Planner, PlannerScript, RemoteConfig, RemotePlanner};
use dvr_core::trace::JsonlSink;
use futures::stream::{self, Stream};
use serde::Deserialize;
use serde_json::{json, Value};

pub use error::ApiError;
pub use runs::{now_ms, Clarification, ClarificationHub, RunHandle, RunStatus};

use runs::{drive, BrokerClarifier, Run};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_concurrent_runs: usize,
    /// Directory that `task_id` requests and relative fixture paths resolve against.
    pub task_dir: PathBuf,
    /// Where each run's trace is written as `<run_id>.jsonl`, if set.
    pub trace_dir: Option<PathBuf>,
    /// Backend for runs that ask for the remote planner.
    pub remote: Option<RemoteConfig>,
    /// How long a halt request waits for the run to stop before answering 202.
    pub halt_wait: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_concurrent_runs: 8,
            task_dir: bundled_suite_dir(),
            trace_dir: None,
            remote: None,
            halt_wait: Duration::from_secs(10),
        }
    }
}

pub struct AppState {
    config: ServiceConfig,
    env: TaskEnv,
    runs: Mutex<BTreeMap<String, Arc<Run>>>,
    hub: Arc<ClarificationHub>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            config,
            env: TaskEnv::bundled(),
            runs: Mutex::new(BTreeMap::new()),
            hub: Arc::new(ClarificationHub::default()),
            next_id: AtomicU64::new(1),
        })
    }

    fn run(&self, id: &str) -> Result<Arc<Run>, ApiError> {
        self.runs
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::UnknownRun(id.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerChoice {
    #[default]
    Scripted,
    Remote,
}

/// Body of `POST /runs`. Exactly one of `task` and `task_id` is required.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRunRequest {
    #[serde(default)]
    pub task: Option<Value>,
    #[serde(default)]
    pub task_id: Option<String>,
    #[serde(default)]
    pub planner: PlannerChoice,
    #[serde(default)]
    pub mode: ScriptMode,
    /// Replaces the task's own script.
    #[serde(default)]
    pub script: Option<PlannerScript>,
    #[serde(default)]
    pub t_max: Option<u32>,
    /// Use the pass-through matrix instead of the verifying one.
    #[serde(default)]
    pub pass_through: bool,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/runs", post(start_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/trace", get(stream_trace))
        .route("/runs/{id}/world", get(get_world))
        .route("/runs/{id}/halt", post(halt_run))
        .route("/clarifications", get(list_clarifications))
        .route("/clarifications/{id}/answer", post(answer_clarification))
        .route("/registry", get(get_registry))
        .route("/fsm/matrix", get(get_matrix))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "control service listening");
    axum::serve(listener, router(AppState::new(config))).await
}

fn resolve_task(state: &AppState, req: &StartRunRequest) -> Result<TaskSpec, ApiError> {
    let invalid = |e: &dyn std::fmt::Display| ApiError::InvalidTask(e.to_string());
    let mut task = match (&req.task, &req.task_id) {
        (Some(v), None) => {
            let task: TaskSpec = serde_json::from_value(v.clone()).map_err(|e| invalid(&e))?;
            task.inline_refs(&state.config.task_dir).map_err(|e| invalid(&e))?
        }
        (None, Some(id)) => load_suite(&state.config.task_dir)
            .map_err(|e| invalid(&e))?
            .into_iter()
            .find(|t| &t.id == id)
            .ok_or_else(|| ApiError::InvalidTask(format!("no task '{id}' in {}", state.config.task_dir.display())))?,
        _ => return Err(ApiError::InvalidTask("give exactly one of 'task' and 'task_id'".into())),
    };
    if let Some(script) = &req.script {
        task.script = Some(ScriptRef::Inline(script.clone()));
    }
    Ok(task)
}

fn planner_for(state: &AppState, req: &StartRunRequest, task: &TaskSpec, run: &Run) -> Result<Box<dyn Planner>, ApiError> {
    match req.planner {
        PlannerChoice::Scripted => {
            Ok(Box::new(task.planner(req.mode).map_err(|e| ApiError::InvalidTask(e.to_string()))?))
        }
        PlannerChoice::Remote => {
            let config = state
                .config
                .remote
                .clone()
                .ok_or_else(|| ApiError::InvalidTask("no remote planner is configured".into()))?;
            Ok(Box::new(RemotePlanner::new(config).with_cancel(run.halt.clone())))
        }
    }
}

async fn start_run(State(state): State<Arc<AppState>>, body: String) -> Result<(StatusCode, Json<RunHandle>), ApiError> {
    let req: StartRunRequest = serde_json::from_str(&body).map_err(|e| ApiError::InvalidTask(e.to_string()))?;
    let task = resolve_task(&state, &req)?;

    let mut runs = state.runs.lock().unwrap_or_else(|e| e.into_inner());
    let running = runs.values().filter(|r| !r.status().is_terminal()).count();
    if running >= state.config.max_concurrent_runs {
        return Err(ApiError::CapacityExceeded { running, limit: state.config.max_concurrent_runs });
    }
    let id = format!("run-{:04}", state.next_id.fetch_add(1, Ordering::SeqCst));
    let run = Arc::new(Run::new(id.clone(), task.id.clone()));

    let matrix = if req.pass_through { DecisionMatrix::pass_through() } else { DecisionMatrix::standard() };
    let defaults = EngineConfig::default();
    let config = EngineConfig { run_id: id.clone(), matrix, t_max: req.t_max.unwrap_or(defaults.t_max), ..defaults };
    let planner = planner_for(&state, &req, &task, &run)?;
    let mut engine = task
        .engine(&state.env, planner, config)
        .map_err(|e| ApiError::InvalidTask(e.to_string()))?
        .with_clarifier(Box::new(BrokerClarifier { hub: state.hub.clone(), run: run.clone() }))
        .with_halt_flag(run.halt.clone());
    if let Some(dir) = &state.config.trace_dir {
        let sink = JsonlSink::create(&dir.join(format!("{id}.jsonl"))).map_err(|e| ApiError::Internal(e.to_string()))?;
        engine = engine.with_sink(Box::new(sink));
    }
    let publisher = run.clone();
    engine = engine.with_sink(Box::new(move |e: &dvr_core::trace::TraceEvent| publisher.push_event(e)));

    runs.insert(id.clone(), run.clone());
    drop(runs);
    tracing::info!(run = %id, task = %task.id, "run started");
    run.publish_world(engine.world().snapshot_json());
    let handle = run.handle();
    tokio::task::spawn_blocking(move || drive(run, engine));
    Ok((StatusCode::CREATED, Json(handle)))
}

async fn get_run(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<RunHandle>, ApiError> {
    Ok(Json(state.run(&id)?.handle()))
}

async fn get_world(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    Ok(Json(state.run(&id)?.world()))
}

/// Every trace event from t=0 as `trace` events carrying the JSON line, then
/// a closing `end` event with the final run handle.
async fn stream_trace(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let run = state.run(&id)?;
    let rx = run.subscribe();
    let events = stream::unfold((run, rx, 0usize, false), |(run, mut rx, next, ended)| async move {
        if ended {
            return None;
        }
        loop {
            rx.borrow_and_update();
            let (pending, done) = run.events_from(next);
            if let Some(e) = pending.first() {
                let event = Event::default().event("trace").id(e.t.to_string()).data(e.to_json_line());
                return Some((Ok(event), (run, rx, next + 1, false)));
            }
            if done || rx.changed().await.is_err() {
                let body = serde_json::to_string(&run.handle()).expect("handle serializes");
                return Some((Ok(Event::default().event("end").data(body)), (run, rx, next, true)));
            }
        }
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

/// Stops the run at its next step boundary and waits for it to finish.
async fn halt_run(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<(StatusCode, Json<RunHandle>), ApiError> {
    let run = state.run(&id)?;
    if run.status().is_terminal() {
        return Err(ApiError::AlreadyTerminal(id));
    }
    let mut rx = run.subscribe();
    run.halt.store(true, Ordering::SeqCst);
    state.hub.close_run(&id);
    let stopped = tokio::time::timeout(state.config.halt_wait, async {
        while !run.status().is_terminal() {
            if rx.changed().await.is_err() {
                break;
            }
        }
    })
    .await;
    let handle = run.handle();
    match (&handle.outcome, stopped) {
        (Some(RunOutcome::OperatorHalt), _) => Ok((StatusCode::OK, Json(handle))),
        (Some(_), _) => Err(ApiError::AlreadyTerminal(id)),
        (None, _) if handle.status.is_terminal() => Ok((StatusCode::OK, Json(handle))),
        (None, _) => Ok((StatusCode::ACCEPTED, Json(handle))),
    }
}

#[derive(Debug, Deserialize)]
struct ClarificationQuery {
    #[serde(default)]
    pending: bool,
}

async fn list_clarifications(
    State(state): State<Arc<AppState>>,
    Query(q): Query<ClarificationQuery>,
) -> Json<Vec<Clarification>> {
    Json(state.hub.list(q.pending))
}

#[derive(Debug, Deserialize)]
struct AnswerBody {
    answer: String,
}

async fn answer_clarification(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: String,
) -> Result<Json<Clarification>, ApiError> {
    let body: AnswerBody = serde_json::from_str(&body).map_err(|e| ApiError::InvalidRequest(e.to_string()))?;
    Ok(Json(state.hub.answer(&id, &body.answer)?))
}

async fn get_registry(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(serde_json::to_value(&*state.env.registry).expect("registry serializes"))
}

#[derive(Debug, Deserialize)]
struct MatrixQuery {
    #[serde(default)]
    variant: Option<String>,
}

async fn get_matrix(Query(q): Query<MatrixQuery>) -> Result<Json<Value>, ApiError> {
    let matrix = match q.variant.as_deref() {
        None | Some("standard") => DecisionMatrix::standard(),
        Some("pass_through") => DecisionMatrix::pass_through(),
        Some(other) => return Err(ApiError::InvalidRequest(format!("unknown matrix variant '{other}'"))),
    };
    Ok(Json(json!({ "variant": q.variant.unwrap_or_else(|| "standard".into()), "matrix": matrix.export() })))
}
