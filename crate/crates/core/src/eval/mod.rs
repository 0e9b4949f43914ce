//! Benchmark tasks, metrics and the batch runner.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::fsm::{CannedClarifier, Engine, EngineConfig, RunResult, StartPoint};
use crate::grounding::{bundled_device_memory, GroundingError, SymbolEntry, SymbolKind, WorkingMemory, MAX_BRIEF_WORDS};
use crate::memory::KnowledgeStore;
use crate::planner::{
    inject_fault, rectifying_script, Exhaustion, FaultError, FaultSpec, Planner, PlannerScript, ScriptStep,
    ScriptedPlanner, SymbolicAction,
};
use crate::protocol::{DraftStep, ParsedCode, ProtocolCode, ProtocolDraft};
use crate::registry::HardwareRegistry;
use crate::simulator::{FixtureError, LabWorld, LabwareKind, WorldFixture};
use crate::verifier::{verify_scientific, JudgeInput, Rubric, RubricJudge};

pub mod bench;
pub mod metrics;

pub use bench::{
    aggregate, render_table, run_benchmark, write_report, Aggregate, BenchConfig, BenchmarkReport, CompressionStats,
    TaskReport,
};
pub use metrics::{
    align_ops, detect_loop, lcs_len, score_code, score_rouge_l, score_semantic, CodeScores, MetricsReport,
    DEFAULT_LOOP_THRESHOLD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subset {
    A,
    B,
    C,
    D,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::A => "A",
            Subset::B => "B",
            Subset::C => "C",
            Subset::D => "D",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartKind {
    #[default]
    Intent,
    ApprovedDraft,
    UnverifiedDraft,
}

/// Extra symbol bound into working memory for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSymbol {
    pub key: String,
    pub kind: SymbolKind,
    pub brief: String,
    pub payload: Value,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskContext {
    #[serde(default)]
    pub symbols: Vec<ContextSymbol>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub draft_reference: String,
    /// Structured reference draft; seeds draft start points and default scripts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft: Option<ProtocolDraft>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_ops: Option<ProtocolCode>,
}

/// A world fixture given inline or as a path relative to the task file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FixtureRef {
    Path(String),
    Inline(WorldFixture),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptRef {
    Path(String),
    Inline(PlannerScript),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub subset: Subset,
    pub intent: String,
    #[serde(default)]
    pub context: TaskContext,
    #[serde(default)]
    pub knowledge_refs: Vec<String>,
    #[serde(default)]
    pub rubric: Rubric,
    pub ground_truth: GroundTruth,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    pub fixture: FixtureRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<ScriptRef>,
    #[serde(default)]
    pub start: StartKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clarify_answers: Vec<String>,
}

#[derive(Debug, Error)]
pub enum TaskLoadError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed task {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid task '{id}': {reason}")]
    Invalid { id: String, reason: String },
    #[error("task '{id}': {source}")]
    Fixture { id: String, source: FixtureError },
    #[error("task '{id}': {source}")]
    Fault { id: String, source: FaultError },
    #[error("task '{id}': {source}")]
    Grounding { id: String, source: GroundingError },
}

/// Shared, read-only inputs of every run.
#[derive(Debug, Clone)]
pub struct TaskEnv {
    pub registry: Arc<HardwareRegistry>,
    pub knowledge: Arc<KnowledgeStore>,
    /// Device symbols every task starts with.
    pub devices: WorkingMemory,
}

impl TaskEnv {
    pub fn bundled() -> Self {
        Self {
            registry: Arc::new(HardwareRegistry::bundled()),
            knowledge: Arc::new(KnowledgeStore::bundled()),
            devices: bundled_device_memory(),
        }
    }
}

/// How the scripted planner treats a task's faults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptMode {
    /// Each faulty step is followed by its correction, emitted on feedback.
    #[default]
    Rectifying,
    /// Faults are injected and the planner repeats its last action forever.
    NonRectifying,
}

pub fn bundled_suite_dir() -> PathBuf {
    crate::bundled_data_dir().join("suite")
}

fn read(path: &Path) -> Result<String, TaskLoadError> {
    std::fs::read_to_string(path).map_err(|source| TaskLoadError::Io { path: path.to_path_buf(), source })
}

impl TaskSpec {
    pub fn from_json(text: &str) -> Result<Self, TaskLoadError> {
        let task: TaskSpec =
            serde_json::from_str(text).map_err(|e| TaskLoadError::Parse { path: PathBuf::new(), message: e.to_string() })?;
        task.validate()?;
        Ok(task)
    }

    /// Loads a task file, inlining fixture and script files it references.
    pub fn load(path: &Path) -> Result<Self, TaskLoadError> {
        let text = read(path)?;
        let task: TaskSpec =
            serde_json::from_str(&text).map_err(|e| TaskLoadError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        task.inline_refs(path.parent().unwrap_or(Path::new(".")))
    }

    /// Replaces fixture and script paths with their contents, resolving them
    /// against `base`, and validates the result.
    pub fn inline_refs(mut self, base: &Path) -> Result<Self, TaskLoadError> {
        if let FixtureRef::Path(p) = &self.fixture {
            let fixture = WorldFixture::load(&base.join(p))
                .map_err(|source| TaskLoadError::Fixture { id: self.id.clone(), source })?;
            self.fixture = FixtureRef::Inline(fixture);
        }
        if let Some(ScriptRef::Path(p)) = &self.script {
            let script = PlannerScript::load(&base.join(p))
                .map_err(|message| TaskLoadError::Parse { path: base.join(p), message })?;
            self.script = Some(ScriptRef::Inline(script));
        }
        self.validate()?;
        Ok(self)
    }

    fn invalid(&self, reason: impl Into<String>) -> TaskLoadError {
        TaskLoadError::Invalid { id: self.id.clone(), reason: reason.into() }
    }

    pub fn validate(&self) -> Result<(), TaskLoadError> {
        if self.id.trim().is_empty() {
            return Err(self.invalid("empty id"));
        }
        if self.subset == Subset::D && self.faults.is_empty() {
            return Err(self.invalid("subset D tasks need at least one fault"));
        }
        if self.subset != Subset::A && self.ground_truth.code_ops.is_none() {
            return Err(self.invalid("subsets B, C and D need ground_truth.code_ops"));
        }
        if self.start != StartKind::Intent && self.seed_draft().is_empty() {
            return Err(self.invalid("draft start points need a reference draft"));
        }
        if let FixtureRef::Inline(f) = &self.fixture {
            f.build().map_err(|source| TaskLoadError::Fixture { id: self.id.clone(), source })?;
        }
        Ok(())
    }

    /// Reference draft: the structured one if given, else one step per line
    /// of the reference text.
    pub fn seed_draft(&self) -> ProtocolDraft {
        if let Some(d) = &self.ground_truth.draft {
            return d.clone();
        }
        let mut lines = self.ground_truth.draft_reference.lines().map(str::trim).filter(|l| !l.is_empty());
        let title = lines.next().unwrap_or_default().to_string();
        let steps = lines.map(|l| DraftStep { kind: "step".into(), title: l.to_string(), rationale: String::new() }).collect();
        ProtocolDraft { title, steps }
    }

    pub fn start_point(&self) -> StartPoint {
        match self.start {
            StartKind::Intent => StartPoint::Intent,
            StartKind::ApprovedDraft => StartPoint::ApprovedDraft { draft: self.seed_draft() },
            StartKind::UnverifiedDraft => StartPoint::UnverifiedDraft { draft: self.seed_draft() },
        }
    }

    /// The task's own script, or one that replays the ground truth.
    pub fn base_script(&self) -> Result<PlannerScript, TaskLoadError> {
        match &self.script {
            Some(ScriptRef::Inline(s)) => return Ok(s.clone()),
            Some(ScriptRef::Path(p)) => return Err(self.invalid(format!("script '{p}' was not loaded"))),
            None => {}
        }
        let mut steps = Vec::new();
        if self.start == StartKind::Intent {
            steps.push(ScriptStep::new(SymbolicAction::RetrieveKnowledge { query: self.intent.clone() }));
            steps.push(ScriptStep::new(SymbolicAction::EmitDraft { draft: self.seed_draft() }));
        }
        let code = self.ground_truth.code_ops.clone().ok_or_else(|| self.invalid("no script and no ground-truth code"))?;
        steps.push(ScriptStep::new(SymbolicAction::EmitCode { code }));
        Ok(PlannerScript::new(steps))
    }

    pub fn planner(&self, mode: ScriptMode) -> Result<ScriptedPlanner, TaskLoadError> {
        let base = self.base_script()?;
        let fault = |source| TaskLoadError::Fault { id: self.id.clone(), source };
        Ok(match mode {
            ScriptMode::Rectifying => ScriptedPlanner::new(rectifying_script(&base, &self.faults).map_err(fault)?),
            ScriptMode::NonRectifying => {
                let mut script = base;
                for f in &self.faults {
                    script = inject_fault(&script, f).map_err(fault)?;
                }
                ScriptedPlanner::new(script).with_exhaustion(Exhaustion::RepeatLast)
            }
        })
    }

    pub fn world_fixture(&self) -> Result<WorldFixture, TaskLoadError> {
        match &self.fixture {
            FixtureRef::Inline(f) => Ok(f.clone()),
            FixtureRef::Path(p) => Err(self.invalid(format!("fixture '{p}' was not loaded"))),
        }
    }

    pub fn world(&self) -> Result<LabWorld, TaskLoadError> {
        self.world_fixture()?.build().map_err(|source| TaskLoadError::Fixture { id: self.id.clone(), source })
    }

    /// Device symbols, one labware symbol per fixture item, and the task's
    /// context symbols.
    pub fn memory(&self, env: &TaskEnv) -> Result<WorkingMemory, TaskLoadError> {
        let mut memory = env.devices.clone();
        let grounding = |source| TaskLoadError::Grounding { id: self.id.clone(), source };
        for lw in &self.world_fixture()?.labware {
            let kind = match lw.kind {
                LabwareKind::Plate => "plate",
                LabwareKind::Trough => "trough",
                LabwareKind::Tube => "tube",
            };
            let brief = lw.brief.clone().unwrap_or_else(|| format!("{kind} labware"));
            let brief = brief.split_whitespace().take(MAX_BRIEF_WORDS).collect::<Vec<_>>().join(" ");
            let payload = serde_json::to_value(lw).expect("fixture serializes");
            memory.bind(SymbolEntry::new(&lw.key, SymbolKind::Labware, &brief, payload), false).map_err(grounding)?;
        }
        for s in &self.context.symbols {
            memory.bind(SymbolEntry::new(&s.key, s.kind, &s.brief, s.payload.clone()), false).map_err(grounding)?;
        }
        Ok(memory)
    }

    /// A ready-to-run engine for this task.
    pub fn engine(&self, env: &TaskEnv, planner: Box<dyn Planner>, config: EngineConfig) -> Result<Engine, TaskLoadError> {
        let world = self.world()?;
        let memory = self.memory(env)?;
        Ok(Engine::new(config, env.registry.clone(), memory, world, planner)
            .with_task(&self.intent, self.rubric.clone())
            .with_knowledge(env.knowledge.clone(), self.knowledge_refs.clone())
            .with_clarifier(Box::new(CannedClarifier::new(self.clarify_answers.clone())))
            .start_from(self.start_point()))
    }

    /// Metrics of a finished run. Wall time is left at zero.
    pub fn score(&self, env: &TaskEnv, result: &RunResult, loop_threshold: usize) -> MetricsReport {
        let draft_text = result.draft.as_ref().map(ProtocolDraft::text).unwrap_or_default();
        let c_s = result
            .draft
            .as_ref()
            .and_then(|d| verify_scientific(d, &JudgeInput { intent: &self.intent, rubric: &self.rubric }, &RubricJudge).ok())
            .map_or(0.0, |r| r.compliance());
        let pred = match result.p_star.as_ref().or(result.code.as_ref()) {
            Some(c) => ParsedCode::Code(c.clone()),
            None => ParsedCode::ParseFailure("no code emitted".into()),
        };
        let empty = ProtocolCode::new(vec![]);
        let gt = self.ground_truth.code_ops.as_ref().unwrap_or(&empty);
        let code = score_code(
            &pred,
            gt,
            &env.registry,
            &result.memory,
            Some(&result.initial_world),
            &self.rubric.forbidden_orders,
        );
        MetricsReport {
            s_sem: score_semantic(&draft_text, &self.rubric.keyword_groups),
            rouge_l: score_rouge_l(&draft_text, &self.ground_truth.draft_reference),
            c_s,
            c_p: code.c_p,
            s_code: code.s_code,
            acc_seq: code.acc_seq,
            acc_param: code.acc_param,
            success: result.success(),
            loop_rate_flag: detect_loop(
                &result.trace,
                loop_threshold,
                result.outcome == crate::fsm::RunOutcome::Timeout,
            ),
            tokens_in: result.tokens_in(),
            tokens_out: result.tokens_out(),
            wall_time_s: 0.0,
        }
    }
}

/// Loads every `*.json` task in `dir`, sorted by id.
pub fn load_suite(dir: &Path) -> Result<Vec<TaskSpec>, TaskLoadError> {
    let entries = std::fs::read_dir(dir).map_err(|source| TaskLoadError::Io { path: dir.to_path_buf(), source })?;
    let mut paths = Vec::new();
    for e in entries {
        let path = e.map_err(|source| TaskLoadError::Io { path: dir.to_path_buf(), source })?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "json") {
            paths.push(path);
        }
    }
    let mut tasks = paths.iter().map(|p| TaskSpec::load(p)).collect::<Result<Vec<_>, _>>()?;
    tasks.sort_by(|a, b| a.id.cmp(&b.id));
    for w in tasks.windows(2) {
        if w[0].id == w[1].id {
            return Err(TaskLoadError::Invalid { id: w[0].id.clone(), reason: "duplicate task id".into() });
        }
    }
    Ok(tasks)
}

pub fn load_bundled_suite() -> Vec<TaskSpec> {
    load_suite(&bundled_suite_dir()).expect("bundled suite loads")
}
