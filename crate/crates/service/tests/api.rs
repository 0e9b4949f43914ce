use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use dvr_core::eval::load_bundled_suite;
use dvr_core::fsm::FsmState;
use dvr_core::planner::{PlannerScript, ScriptStep, SymbolicAction};
use dvr_core::trace::TraceEvent;
use dvr_service::{router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(config: ServiceConfig) -> Router {
    router(AppState::new(config))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn wait_for(app: &Router, run: &str, pred: impl Fn(&Value) -> bool) -> Value {
    for _ in 0..500 {
        let (_, h) = call(app, "GET", &format!("/runs/{run}"), None).await;
        if pred(&h) {
            return h;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("run {run} never reached the expected status");
}

fn terminal(h: &Value) -> bool {
    matches!(h["status"].as_str(), Some("success" | "halted" | "failed"))
}

/// `(event name, data)` pairs of an SSE body.
fn sse_frames(text: &str) -> Vec<(String, String)> {
    text.split("\n\n")
        .filter_map(|block| {
            let mut name = None;
            let mut data = None;
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event:") {
                    name = Some(v.trim().to_string());
                }
                if let Some(v) = line.strip_prefix("data:") {
                    data = Some(v.strip_prefix(' ').unwrap_or(v).to_string());
                }
            }
            Some((name?, data?))
        })
        .collect()
}

async fn trace_text(app: &Router, run: &str) -> String {
    let req = Request::get(format!("/runs/{run}/trace")).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    String::from_utf8(resp.into_body().collect().await.unwrap().to_bytes().to_vec()).unwrap()
}

/// A script for an approved-draft task: ask first, then emit the reference code.
fn clarifying_script(task_id: &str) -> Value {
    let task = load_bundled_suite().into_iter().find(|t| t.id == task_id).unwrap();
    let script = PlannerScript::new(vec![
        ScriptStep::new(SymbolicAction::Clarify { question: "Which rotor is installed?".into() }),
        ScriptStep::new(SymbolicAction::EmitCode { code: task.ground_truth.code_ops.unwrap() }),
    ]);
    serde_json::to_value(script).unwrap()
}

async fn start_clarifying(app: &Router) -> String {
    let body = json!({"task_id": "b1_spin_plate", "script": clarifying_script("b1_spin_plate")});
    let (status, h) = call(app, "POST", "/runs", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{h}");
    let id = h["run_id"].as_str().unwrap().to_string();
    wait_for(app, &id, |h| h["status"] == "awaiting_clarification").await;
    id
}

#[tokio::test]
async fn golden_run_streams_its_full_trace() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(ServiceConfig { trace_dir: Some(dir.path().to_path_buf()), ..ServiceConfig::default() });
    let (status, h) = call(&app, "POST", "/runs", Some(json!({"task_id": "d1_centrifuge_overspeed"}))).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = h["run_id"].as_str().unwrap().to_string();
    let done = wait_for(&app, &id, terminal).await;
    assert_eq!(done["status"], "success");
    assert_eq!(done["outcome"]["kind"], "success");

    let frames = sse_frames(&trace_text(&app, &id).await);
    let (end, traces) = frames.split_last().unwrap();
    assert_eq!(end.0, "end");
    let events: Vec<TraceEvent> = traces.iter().map(|(_, d)| serde_json::from_str(d).unwrap()).collect();
    let states: Vec<FsmState> = events.iter().map(|e| e.state).collect();
    use FsmState::*;
    assert_eq!(states, vec![DesignCode, RectifyCode, DesignCode, Success]);
    assert!(events.iter().enumerate().all(|(i, e)| e.t as usize == i));

    let streamed: String = traces.iter().map(|(_, d)| format!("{d}\n")).collect();
    let file = std::fs::read_to_string(dir.path().join(format!("{id}.jsonl"))).unwrap();
    assert_eq!(streamed, file);

    let (_, world) = call(&app, "GET", &format!("/runs/{id}/world"), None).await;
    assert_eq!(world["state"]["executed_ops"], 3);
    assert_eq!(world["hash"].as_str().unwrap().len(), 64);
}

#[tokio::test]
async fn malformed_requests_use_the_error_shape() {
    let app = app(ServiceConfig::default());
    let (status, e) = call(&app, "POST", "/runs", Some(json!({"task": {"id": "x"}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(e["error"]["kind"], "InvalidTask");
    assert!(e["error"]["message"].as_str().unwrap().contains("missing field"));

    let (status, e) = call(&app, "POST", "/runs", Some(json!({"task_id": "nope"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(e["error"]["kind"], "InvalidTask");

    let (status, e) = call(&app, "POST", "/runs", Some(json!({}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(e["error"]["kind"], "InvalidTask");

    let (status, e) = call(&app, "POST", "/runs", Some(json!({"task_id": "d1_centrifuge_overspeed", "planner": "remote"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{e}");

    for (method, uri) in [("GET", "/runs/run-9999"), ("GET", "/runs/run-9999/world"), ("GET", "/runs/run-9999/trace"), ("POST", "/runs/run-9999/halt")] {
        let (status, e) = call(&app, method, uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(e["error"]["kind"], "UnknownRun");
    }

    let (status, e) = call(&app, "POST", "/clarifications/nope/answer", Some(json!({"answer": "x"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(e["error"]["kind"], "UnknownClarification");
    let (status, e) = call(&app, "POST", "/clarifications/nope/answer", Some(json!({"reply": "x"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(e["error"]["kind"], "InvalidRequest");
}

#[tokio::test]
async fn inline_tasks_resolve_fixture_paths() {
    let app = app(ServiceConfig::default());
    let path = dvr_core::eval::bundled_suite_dir().join("b1_spin_plate.json");
    let task: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert!(task["fixture"].is_string());
    let (status, h) = call(&app, "POST", "/runs", Some(json!({"task": task}))).await;
    assert_eq!(status, StatusCode::CREATED, "{h}");
    let done = wait_for(&app, h["run_id"].as_str().unwrap(), terminal).await;
    assert_eq!(done["status"], "success");
}

#[tokio::test]
async fn clarification_round_trip() {
    let app = app(ServiceConfig::default());
    let id = start_clarifying(&app).await;

    let (_, pending) = call(&app, "GET", "/clarifications?pending=true", None).await;
    let pending = pending.as_array().unwrap();
    assert_eq!(pending.len(), 1);
    let clar_id = pending[0]["clar_id"].as_str().unwrap().to_string();
    assert_eq!(clar_id, format!("{id}_c1"));
    assert_eq!(pending[0]["question"], "Which rotor is installed?");
    assert!(pending[0]["answer"].is_null());

    let uri = format!("/clarifications/{clar_id}/answer");
    let (status, c) = call(&app, "POST", &uri, Some(json!({"answer": "the fixed angle rotor"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(c["answer"], "the fixed angle rotor");
    let (status, e) = call(&app, "POST", &uri, Some(json!({"answer": "swing bucket"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(e["error"]["kind"], "AlreadyAnswered");

    let done = wait_for(&app, &id, terminal).await;
    assert_eq!(done["status"], "success");
    let frames = sse_frames(&trace_text(&app, &id).await);
    let events: Vec<TraceEvent> =
        frames.iter().filter(|(n, _)| n == "trace").map(|(_, d)| serde_json::from_str(d).unwrap()).collect();
    let states: Vec<FsmState> = events.iter().map(|e| e.state).collect();
    assert_eq!(states[..3], [FsmState::DesignCode, FsmState::AwaitClarify, FsmState::DesignCode]);
    assert_eq!(events[1].note.as_deref(), Some(format!("answer bound as clarify_{clar_id}").as_str()));

    let (_, all) = call(&app, "GET", "/clarifications", None).await;
    assert_eq!(all[0]["answer"], "the fixed angle rotor");
    let (_, pending) = call(&app, "GET", "/clarifications?pending=true", None).await;
    assert!(pending.as_array().unwrap().is_empty());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn exactly_one_concurrent_answer_wins() {
    let app = app(ServiceConfig::default());
    let id = start_clarifying(&app).await;
    let uri = format!("/clarifications/{id}_c1/answer");
    let attempts: Vec<_> = (0..8)
        .map(|i| {
            let app = app.clone();
            let uri = uri.clone();
            tokio::spawn(async move { call(&app, "POST", &uri, Some(json!({"answer": format!("answer {i}")}))).await.0 })
        })
        .collect();
    let mut codes = Vec::new();
    for a in attempts {
        codes.push(a.await.unwrap());
    }
    assert_eq!(codes.iter().filter(|c| **c == StatusCode::OK).count(), 1, "{codes:?}");
    assert_eq!(codes.iter().filter(|c| **c == StatusCode::CONFLICT).count(), 7);
    assert_eq!(wait_for(&app, &id, terminal).await["status"], "success");
}

#[tokio::test]
async fn halt_during_clarification_closes_it() {
    let app = app(ServiceConfig::default());
    let id = start_clarifying(&app).await;
    let (status, h) = call(&app, "POST", &format!("/runs/{id}/halt"), None).await;
    assert_eq!(status, StatusCode::OK, "{h}");
    assert_eq!(h["status"], "halted");
    assert_eq!(h["outcome"]["kind"], "operator_halt");

    let (_, pending) = call(&app, "GET", "/clarifications?pending=true", None).await;
    assert!(pending.as_array().unwrap().is_empty());
    let (status, e) = call(&app, "POST", &format!("/clarifications/{id}_c1/answer"), Some(json!({"answer": "late"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(e["error"]["kind"], "UnknownClarification");

    let (status, e) = call(&app, "POST", &format!("/runs/{id}/halt"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(e["error"]["kind"], "AlreadyTerminal");

    tokio::time::sleep(Duration::from_millis(50)).await;
    let (_, world) = call(&app, "GET", &format!("/runs/{id}/world"), None).await;
    assert_eq!(world["state"]["executed_ops"], 0);
    let frames = sse_frames(&trace_text(&app, &id).await);
    let last: TraceEvent = serde_json::from_str(&frames[frames.len() - 2].1).unwrap();
    assert_eq!(last.state, FsmState::Halt);
}

#[tokio::test]
async fn capacity_limit_rejects_extra_runs() {
    let app = app(ServiceConfig { max_concurrent_runs: 1, ..ServiceConfig::default() });
    let id = start_clarifying(&app).await;
    let (status, e) = call(&app, "POST", "/runs", Some(json!({"task_id": "d1_centrifuge_overspeed"}))).await;
    assert_eq!(status, StatusCode::TOO_MANY_REQUESTS);
    assert_eq!(e["error"]["kind"], "CapacityExceeded");

    call(&app, "POST", &format!("/runs/{id}/halt"), None).await;
    let (status, _) = call(&app, "POST", "/runs", Some(json!({"task_id": "d1_centrifuge_overspeed"}))).await;
    assert_eq!(status, StatusCode::CREATED);
}

#[tokio::test]
async fn late_subscriber_gets_backfill_then_live_events() {
    let app = app(ServiceConfig::default());
    let id = start_clarifying(&app).await;
    let req = Request::get(format!("/runs/{id}/trace")).body(Body::empty()).unwrap();
    let mut body = app.clone().oneshot(req).await.unwrap().into_body();

    let first = body.frame().await.unwrap().unwrap().into_data().unwrap();
    let first = String::from_utf8(first.to_vec()).unwrap();
    let frames = sse_frames(&first);
    assert_eq!(frames.len(), 1);
    let e: TraceEvent = serde_json::from_str(&frames[0].1).unwrap();
    assert_eq!((e.t, e.state), (0, FsmState::DesignCode));

    call(&app, "POST", &format!("/clarifications/{id}_c1/answer"), Some(json!({"answer": "fixed angle"}))).await;
    let rest = String::from_utf8(body.collect().await.unwrap().to_bytes().to_vec()).unwrap();
    let rest = sse_frames(&rest);
    let ts: Vec<u32> = rest
        .iter()
        .filter(|(n, _)| n == "trace")
        .map(|(_, d)| serde_json::from_str::<TraceEvent>(d).unwrap().t)
        .collect();
    assert_eq!(ts, (1..=ts.len() as u32).collect::<Vec<_>>());
    assert_eq!(rest.last().unwrap().0, "end");
}

#[tokio::test]
async fn registry_and_matrix_are_exported() {
    let app = app(ServiceConfig::default());
    let (status, reg) = call(&app, "GET", "/registry", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(reg["devices"].as_array().unwrap().iter().any(|d| d["id"] == "centrifuge_1"));

    let (_, m) = call(&app, "GET", "/fsm/matrix", None).await;
    assert_eq!(m["variant"], "standard");
    assert!(m["matrix"].is_object());
    let (status, m) = call(&app, "GET", "/fsm/matrix?variant=pass_through", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(m["variant"], "pass_through");
    let (status, e) = call(&app, "GET", "/fsm/matrix?variant=other", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(e["error"]["kind"], "InvalidRequest");
}

#[test]
fn app_state_is_shareable() {
    fn assert_send_sync<T: Send + Sync>() {}
    assert_send_sync::<Arc<AppState>>();
}
