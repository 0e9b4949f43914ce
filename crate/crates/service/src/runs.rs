//! Live run bookkeeping: per-run state shared between the engine worker
//! thread and HTTP handlers, and the clarification inbox.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use dvr_core::fsm::{ClarifyReply, Clarifier, Engine, FsmState, RunOutcome, StepOutcome};
use dvr_core::trace::TraceEvent;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use crate::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    AwaitingClarification,
    Success,
    Halted,
    Failed,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Success | RunStatus::Halted | RunStatus::Failed)
    }

    /// Runs that end in the HALT state report `halted`; runs that could not
    /// continue for lack of a planner or an answer report `failed`.
    pub fn from_outcome(outcome: &RunOutcome) -> Self {
        match outcome {
            RunOutcome::Success => RunStatus::Success,
            RunOutcome::OperatorHalt | RunOutcome::MatrixHalt | RunOutcome::Timeout => RunStatus::Halted,
            RunOutcome::PlannerFailure { .. } | RunOutcome::ClarificationUnavailable => RunStatus::Failed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHandle {
    pub run_id: String,
    pub task_id: String,
    pub status: RunStatus,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    /// State of the latest trace event.
    pub state: Option<FsmState>,
    pub events: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<RunOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clarification {
    pub clar_id: String,
    pub run_id: String,
    pub question: String,
    pub answer: Option<String>,
    pub asked_at: u64,
    pub answered_at: Option<u64>,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

struct RunInner {
    status: RunStatus,
    events: Vec<TraceEvent>,
    world: serde_json::Value,
    outcome: Option<RunOutcome>,
}

pub struct Run {
    pub id: String,
    pub task_id: String,
    pub created_at: u64,
    pub halt: Arc<AtomicBool>,
    inner: Mutex<RunInner>,
    version: watch::Sender<u64>,
}

impl Run {
    pub fn new(id: String, task_id: String) -> Self {
        Self {
            id,
            task_id,
            created_at: now_ms(),
            halt: Arc::new(AtomicBool::new(false)),
            inner: Mutex::new(RunInner {
                status: RunStatus::Running,
                events: Vec::new(),
                world: serde_json::Value::Null,
                outcome: None,
            }),
            version: watch::channel(0).0,
        }
    }

    pub fn handle(&self) -> RunHandle {
        let inner = lock(&self.inner);
        RunHandle {
            run_id: self.id.clone(),
            task_id: self.task_id.clone(),
            status: inner.status,
            created_at: self.created_at,
            state: inner.events.last().map(|e| e.state),
            events: inner.events.len(),
            outcome: inner.outcome.clone(),
        }
    }

    pub fn status(&self) -> RunStatus {
        lock(&self.inner).status
    }

    /// Events from index `from` on, and whether the run has finished.
    pub fn events_from(&self, from: usize) -> (Vec<TraceEvent>, bool) {
        let inner = lock(&self.inner);
        (inner.events.get(from..).unwrap_or_default().to_vec(), inner.status.is_terminal())
    }

    pub fn world(&self) -> serde_json::Value {
        lock(&self.inner).world.clone()
    }

    /// Notified after every change to the run.
    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.version.subscribe()
    }

    fn update(&self, f: impl FnOnce(&mut RunInner)) {
        f(&mut lock(&self.inner));
        self.version.send_modify(|v| *v += 1);
    }

    fn set_status_if_live(&self, status: RunStatus) {
        self.update(|i| {
            if !i.status.is_terminal() {
                i.status = status;
            }
        });
    }

    pub(crate) fn publish_world(&self, world: serde_json::Value) {
        self.update(|i| i.world = world);
    }

    pub(crate) fn push_event(&self, event: &TraceEvent) {
        self.update(|i| i.events.push(event.clone()));
    }
}

/// Steps `engine` to completion on the calling thread, publishing the world
/// after every step.
pub(crate) fn drive(run: Arc<Run>, mut engine: Engine) {
    let finished = catch_unwind(AssertUnwindSafe(|| loop {
        let outcome = engine.step();
        let world = engine.world().snapshot_json();
        match outcome {
            StepOutcome::Continue => run.update(|i| i.world = world),
            StepOutcome::Terminal(o) => {
                run.update(|i| {
                    i.world = world;
                    i.status = RunStatus::from_outcome(&o);
                    i.outcome = Some(o);
                });
                break;
            }
        }
    }));
    if finished.is_err() {
        tracing::error!(run = %run.id, "engine panicked");
        run.update(|i| i.status = RunStatus::Failed);
    } else {
        tracing::info!(run = %run.id, status = ?run.status(), "run finished");
    }
}

struct Entry {
    record: Clarification,
    closed: bool,
}

/// Questions asked by runs, answered over HTTP. Blocked engine threads wait
/// on the condition variable.
#[derive(Default)]
pub struct ClarificationHub {
    entries: Mutex<BTreeMap<String, Entry>>,
    answered: Condvar,
}

impl ClarificationHub {
    /// Open clarifications; with `pending_only`, only unanswered ones.
    pub fn list(&self, pending_only: bool) -> Vec<Clarification> {
        lock(&self.entries)
            .values()
            .filter(|e| !e.closed && (!pending_only || e.record.answer.is_none()))
            .map(|e| e.record.clone())
            .collect()
    }

    /// Accepts the first answer to an open clarification.
    pub fn answer(&self, clar_id: &str, answer: &str) -> Result<Clarification, ApiError> {
        let mut entries = lock(&self.entries);
        let entry = entries
            .get_mut(clar_id)
            .filter(|e| !e.closed)
            .ok_or_else(|| ApiError::UnknownClarification(clar_id.to_string()))?;
        if entry.record.answer.is_some() {
            return Err(ApiError::AlreadyAnswered(clar_id.to_string()));
        }
        entry.record.answer = Some(answer.to_string());
        entry.record.answered_at = Some(now_ms());
        let record = entry.record.clone();
        self.answered.notify_all();
        Ok(record)
    }

    /// Withdraws every unanswered question of `run_id`.
    pub fn close_run(&self, run_id: &str) {
        let mut entries = lock(&self.entries);
        for e in entries.values_mut().filter(|e| e.record.run_id == run_id && e.record.answer.is_none()) {
            e.closed = true;
        }
        self.answered.notify_all();
    }

    fn ask(&self, run: &Run, clar_id: &str, question: &str) -> ClarifyReply {
        let mut entries = lock(&self.entries);
        entries.insert(
            clar_id.to_string(),
            Entry {
                record: Clarification {
                    clar_id: clar_id.to_string(),
                    run_id: run.id.clone(),
                    question: question.to_string(),
                    answer: None,
                    asked_at: now_ms(),
                    answered_at: None,
                },
                closed: false,
            },
        );
        run.set_status_if_live(RunStatus::AwaitingClarification);
        loop {
            let entry = &entries[clar_id];
            if let Some(a) = &entry.record.answer {
                return ClarifyReply::Answered(a.clone());
            }
            if entry.closed || run.halt.load(Ordering::SeqCst) {
                return ClarifyReply::Closed;
            }
            entries = self.answered.wait(entries).unwrap_or_else(|e| e.into_inner());
        }
    }
}

/// Routes an engine's questions to the hub and blocks until answered.
pub(crate) struct BrokerClarifier {
    pub hub: Arc<ClarificationHub>,
    pub run: Arc<Run>,
}

impl Clarifier for BrokerClarifier {
    fn ask(&mut self, clar_id: &str, question: &str) -> ClarifyReply {
        let reply = self.hub.ask(&self.run, clar_id, question);
        if !self.run.halt.load(Ordering::SeqCst) {
            self.run.set_status_if_live(RunStatus::Running);
        }
        reply
    }
}
