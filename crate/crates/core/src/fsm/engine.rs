//! The gated run loop: one decision-matrix transition per step, planner
//! output checked against the action mask, drafts and code verified inline,
//! and approved code dispatched to the simulator through the interlock.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{allowed_actions, gate_execution, DecisionMatrix, ExecutionDecision, FsmState, SignalVector, Verdict};
use crate::grounding::{count_tokens, project, resolve, SymbolEntry, SymbolKind, WorkingMemory, MAX_BRIEF_WORDS};
use crate::memory::{KnowledgeDoc, KnowledgeStore, Trajectory, TrajectoryEntry};
use crate::planner::{render_prompt, Planner, PlannerContext, PromptTemplate, SymbolicAction};
use crate::protocol::{ProtocolCode, ProtocolDraft};
use crate::registry::HardwareRegistry;
use crate::simulator::LabWorld;
use crate::trace::{TraceEvent, TraceSink};
use crate::verifier::{
    signals_from, verify_scientific, JudgeError, JudgeInput, Layer, PhysicalCheck, Rubric, RubricJudge,
    ScientificJudge, VerificationReport, Violation, ViolationKind,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub t_max: u32,
    pub matrix: DecisionMatrix,
    /// Trajectory entries shown to the planner.
    pub history_window: usize,
    /// Documents returned per knowledge query.
    pub knowledge_k: usize,
    pub template: PromptTemplate,
    /// Prefix for clarification ids.
    pub run_id: String,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            t_max: 50,
            matrix: DecisionMatrix::standard(),
            history_window: 5,
            knowledge_k: 3,
            template: PromptTemplate::default(),
            run_id: "run".to_string(),
        }
    }
}

/// Where a run begins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "from", rename_all = "snake_case")]
pub enum StartPoint {
    /// Nothing known: retrieve knowledge, draft, then code.
    Intent,
    /// A scientifically approved draft is given; the run starts at code design.
    ApprovedDraft { draft: ProtocolDraft },
    /// A draft is given but still needs scientific verification.
    UnverifiedDraft { draft: ProtocolDraft },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunOutcome {
    Success,
    Timeout,
    PlannerFailure { message: String },
    OperatorHalt,
    /// The decision matrix selected HALT, by rule or fallback.
    MatrixHalt,
    ClarificationUnavailable,
}

impl RunOutcome {
    pub fn label(&self) -> &'static str {
        match self {
            RunOutcome::Success => "success",
            RunOutcome::Timeout => "timeout",
            RunOutcome::PlannerFailure { .. } => "planner_failure",
            RunOutcome::OperatorHalt => "operator_halt",
            RunOutcome::MatrixHalt => "matrix_halt",
            RunOutcome::ClarificationUnavailable => "clarification_unavailable",
        }
    }

    pub fn final_state(&self) -> FsmState {
        if *self == RunOutcome::Success {
            FsmState::Success
        } else {
            FsmState::Halt
        }
    }
}

pub enum ClarifyReply {
    Answered(String),
    /// No answer will come (run halted or clarification withdrawn).
    Closed,
}

/// Transport for clarification questions. `ask` blocks until answered.
pub trait Clarifier: Send {
    fn ask(&mut self, clar_id: &str, question: &str) -> ClarifyReply;
}

/// Answers questions from a fixed list, in order.
pub struct CannedClarifier {
    answers: std::collections::VecDeque<String>,
}

impl CannedClarifier {
    pub fn new(answers: Vec<String>) -> Self {
        Self { answers: answers.into() }
    }
}

impl Clarifier for CannedClarifier {
    fn ask(&mut self, _clar_id: &str, _question: &str) -> ClarifyReply {
        match self.answers.pop_front() {
            Some(a) => ClarifyReply::Answered(a),
            None => ClarifyReply::Closed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u32,
    pub state: FsmState,
    pub planner_called: bool,
    pub tokens_in: usize,
    pub tokens_out: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Continue,
    Terminal(RunOutcome),
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: RunOutcome,
    pub trace: Vec<TraceEvent>,
    pub steps: Vec<StepRecord>,
    pub draft: Option<ProtocolDraft>,
    /// Last code the planner emitted.
    pub code: Option<ProtocolCode>,
    /// Code that was approved and executed.
    pub p_star: Option<ProtocolCode>,
    pub last_scientific: Option<VerificationReport>,
    pub initial_world: LabWorld,
    pub world: LabWorld,
    pub memory: WorkingMemory,
    pub trajectory: Trajectory,
}

impl RunResult {
    pub fn success(&self) -> bool {
        self.outcome == RunOutcome::Success && self.p_star.as_ref().is_some_and(|p| !p.is_empty())
    }

    pub fn states(&self) -> Vec<FsmState> {
        self.trace.iter().map(|e| e.state).collect()
    }

    pub fn tokens_in(&self) -> usize {
        self.steps.iter().map(|s| s.tokens_in).sum()
    }

    pub fn tokens_out(&self) -> usize {
        self.steps.iter().map(|s| s.tokens_out).sum()
    }
}

/// Per-step bookkeeping assembled into one trace event.
struct Step {
    state: FsmState,
    action: Option<SymbolicAction>,
    verdict: Option<VerificationReport>,
    executed: bool,
    note: Option<String>,
    observation: String,
    record: StepRecord,
}

impl Step {
    fn new(t: u32, state: FsmState) -> Self {
        Self {
            state,
            action: None,
            verdict: None,
            executed: false,
            note: None,
            observation: String::new(),
            record: StepRecord { t, state, planner_called: false, tokens_in: 0, tokens_out: 0 },
        }
    }
}

pub struct Engine {
    config: EngineConfig,
    registry: Arc<HardwareRegistry>,
    knowledge: Arc<KnowledgeStore>,
    knowledge_refs: Vec<String>,
    judge: Arc<dyn ScientificJudge>,
    planner: Box<dyn Planner>,
    clarifier: Option<Box<dyn Clarifier>>,
    sinks: Vec<Box<dyn TraceSink>>,
    halt: Arc<AtomicBool>,
    intent: String,
    rubric: Rubric,

    memory: WorkingMemory,
    initial_world: LabWorld,
    world: LabWorld,
    trajectory: Trajectory,
    retrieved: Vec<KnowledgeDoc>,

    t: u32,
    signal: SignalVector,
    draft: Option<ProtocolDraft>,
    code: Option<ProtocolCode>,
    staged_draft: Option<ProtocolDraft>,
    staged_code: Option<ProtocolCode>,
    last_sci: Option<VerificationReport>,
    last_phys: Option<VerificationReport>,
    p_star: Option<ProtocolCode>,
    pending: Option<(String, String)>,
    clarifications: u32,

    trace: Vec<TraceEvent>,
    steps: Vec<StepRecord>,
    outcome: Option<RunOutcome>,
}

impl Engine {
    pub fn new(
        config: EngineConfig,
        registry: Arc<HardwareRegistry>,
        memory: WorkingMemory,
        world: LabWorld,
        planner: Box<dyn Planner>,
    ) -> Self {
        Self {
            config,
            registry,
            knowledge: Arc::new(KnowledgeStore::default()),
            knowledge_refs: Vec::new(),
            judge: Arc::new(RubricJudge),
            planner,
            clarifier: None,
            sinks: Vec::new(),
            halt: Arc::new(AtomicBool::new(false)),
            intent: String::new(),
            rubric: Rubric::default(),
            memory,
            initial_world: world.clone(),
            world,
            trajectory: Trajectory::new(),
            retrieved: Vec::new(),
            t: 0,
            signal: SignalVector::default(),
            draft: None,
            code: None,
            staged_draft: None,
            staged_code: None,
            last_sci: None,
            last_phys: None,
            p_star: None,
            pending: None,
            clarifications: 0,
            trace: Vec::new(),
            steps: Vec::new(),
            outcome: None,
        }
    }

    pub fn with_task(mut self, intent: &str, rubric: Rubric) -> Self {
        self.intent = intent.to_string();
        self.rubric = rubric;
        self
    }

    /// Knowledge store plus documents the task always includes.
    pub fn with_knowledge(mut self, store: Arc<KnowledgeStore>, refs: Vec<String>) -> Self {
        self.knowledge = store;
        self.knowledge_refs = refs;
        self
    }

    pub fn with_judge(mut self, judge: Arc<dyn ScientificJudge>) -> Self {
        self.judge = judge;
        self
    }

    pub fn with_clarifier(mut self, clarifier: Box<dyn Clarifier>) -> Self {
        self.clarifier = Some(clarifier);
        self
    }

    pub fn with_sink(mut self, sink: Box<dyn TraceSink>) -> Self {
        self.sinks.push(sink);
        self
    }

    /// Flag polled at every step boundary; setting it halts the run.
    pub fn with_halt_flag(mut self, flag: Arc<AtomicBool>) -> Self {
        self.halt = flag;
        self
    }

    pub fn start_from(mut self, start: StartPoint) -> Self {
        match start {
            StartPoint::Intent => {}
            StartPoint::ApprovedDraft { draft } => {
                self.draft = Some(draft);
                self.signal.know = true;
                self.signal.draft = true;
                self.signal.sci = Verdict::Pass;
            }
            StartPoint::UnverifiedDraft { draft } => {
                self.draft = Some(draft);
                self.signal.know = true;
                self.signal.draft = true;
            }
        }
        self
    }

    pub fn halt_flag(&self) -> Arc<AtomicBool> {
        self.halt.clone()
    }

    pub fn signal(&self) -> SignalVector {
        self.signal
    }

    pub fn world(&self) -> &LabWorld {
        &self.world
    }

    pub fn memory(&self) -> &WorkingMemory {
        &self.memory
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn outcome(&self) -> Option<&RunOutcome> {
        self.outcome.as_ref()
    }

    pub fn is_terminal(&self) -> bool {
        self.outcome.is_some()
    }

    /// Steps until terminal.
    pub fn run(mut self) -> RunResult {
        while let StepOutcome::Continue = self.step() {}
        self.into_result()
    }

    pub fn into_result(self) -> RunResult {
        RunResult {
            outcome: self.outcome.unwrap_or(RunOutcome::Timeout),
            trace: self.trace,
            steps: self.steps,
            draft: self.draft,
            code: self.code,
            p_star: self.p_star,
            last_scientific: self.last_sci,
            initial_world: self.initial_world,
            world: self.world,
            memory: self.memory,
            trajectory: self.trajectory,
        }
    }

    /// One loop iteration.
    pub fn step(&mut self) -> StepOutcome {
        if let Some(o) = &self.outcome {
            return StepOutcome::Terminal(o.clone());
        }
        if self.halt.load(Ordering::SeqCst) {
            return self.terminate(RunOutcome::OperatorHalt);
        }
        if self.t >= self.config.t_max {
            return self.terminate(RunOutcome::Timeout);
        }
        let state = self.config.matrix.transition(&self.signal);
        let mut step = Step::new(self.t, state);
        let terminal = match state {
            FsmState::RetrieveKnowledge
            | FsmState::DesignDraft
            | FsmState::RectifyDraft
            | FsmState::DesignCode
            | FsmState::RectifyCode => self.planning_step(&mut step),
            FsmState::VerifyDraft => {
                self.verify_draft(&mut step);
                None
            }
            FsmState::VerifyCode => self.verify_code(&mut step),
            FsmState::Approved => self.dispatch(&mut step),
            FsmState::AwaitClarify => self.await_clarify(&mut step),
            FsmState::Halt => return self.terminate(RunOutcome::MatrixHalt),
            FsmState::Init | FsmState::Success => unreachable!("matrix never targets {state}"),
        };
        self.commit(step);
        match terminal {
            Some(outcome) => self.terminate(outcome),
            None => StepOutcome::Continue,
        }
    }

    fn commit(&mut self, step: Step) {
        let event = TraceEvent {
            t: self.t,
            state: step.state,
            signal: self.signal,
            action: step.action.clone(),
            verdict: step.verdict,
            executed: step.executed,
            note: step.note,
            outcome: None,
        };
        let summary = step.action.as_ref().map(SymbolicAction::summary).unwrap_or_else(|| "-".to_string());
        self.trajectory
            .append(TrajectoryEntry {
                t: self.t,
                state: step.state,
                action_summary: summary,
                observation: step.observation,
                signal_after: self.signal,
            })
            .expect("engine appends consecutive steps");
        self.steps.push(step.record);
        self.emit(event);
        self.t += 1;
    }

    fn emit(&mut self, event: TraceEvent) {
        for s in &mut self.sinks {
            s.emit(&event);
        }
        self.trace.push(event);
    }

    fn terminate(&mut self, outcome: RunOutcome) -> StepOutcome {
        let event = TraceEvent {
            t: self.t,
            state: outcome.final_state(),
            signal: self.signal,
            action: None,
            verdict: None,
            executed: false,
            note: None,
            outcome: Some(outcome.clone()),
        };
        self.emit(event);
        self.outcome = Some(outcome.clone());
        StepOutcome::Terminal(outcome)
    }

    fn context(&self, state: FsmState) -> PlannerContext {
        let feedback = match state {
            FsmState::RectifyCode => self.last_phys.clone(),
            FsmState::RectifyDraft => self.last_sci.clone(),
            _ => None,
        };
        PlannerContext {
            state,
            intent: self.intent.clone(),
            digest: project(&self.memory),
            history: self.trajectory.window(self.config.history_window).to_vec(),
            feedback,
            allowed: allowed_actions(state).unwrap_or_default(),
            knowledge: self.retrieved.clone(),
        }
    }

    fn planning_step(&mut self, step: &mut Step) -> Option<RunOutcome> {
        let state = step.state;
        // A revision proposed while rectifying is consumed by the next design step.
        let staged = match state {
            FsmState::DesignCode => self.staged_code.take().map(|code| SymbolicAction::EmitCode { code }),
            FsmState::DesignDraft => self.staged_draft.take().map(|draft| SymbolicAction::EmitDraft { draft }),
            _ => None,
        };
        let action = match staged {
            Some(a) => a,
            None => {
                let ctx = self.context(state);
                let prompt = render_prompt(&ctx, &self.config.template).unwrap_or_default();
                step.record.planner_called = true;
                step.record.tokens_in = count_tokens(&prompt);
                match self.planner.propose(&ctx) {
                    Ok(a) => {
                        step.record.tokens_out = count_tokens(&a.to_json());
                        if !ctx.allowed.contains(&a.kind()) {
                            step.note = Some(format!("mask violation: {} not allowed in {state}", a.kind()));
                            step.observation = "action discarded".to_string();
                            step.action = Some(a);
                            return None;
                        }
                        a
                    }
                    Err(e) => {
                        step.note = Some(format!("planner error: {e}"));
                        step.observation = e.to_string();
                        return Some(RunOutcome::PlannerFailure { message: e.to_string() });
                    }
                }
            }
        };
        step.action = Some(action.clone());

        match action {
            SymbolicAction::RetrieveKnowledge { query } => {
                let mut docs: Vec<KnowledgeDoc> =
                    self.knowledge_refs.iter().filter_map(|id| self.knowledge.get(id).cloned()).collect();
                for d in self.knowledge.retrieve(&query, self.config.knowledge_k) {
                    if !docs.iter().any(|x| x.id == d.id) {
                        docs.push(d.clone());
                    }
                }
                step.observation = format!("retrieved {} documents", docs.len());
                self.retrieved = docs;
                self.signal.know = true;
                None
            }
            SymbolicAction::Clarify { question } => {
                self.clarifications += 1;
                let clar_id = format!("{}_c{}", self.config.run_id, self.clarifications);
                step.observation = format!("asked clarification {clar_id}");
                self.pending = Some((clar_id, question));
                self.signal.clarify_pending = true;
                None
            }
            SymbolicAction::EmitDraft { draft } => {
                if state == FsmState::RectifyDraft {
                    self.staged_draft = Some(draft);
                    self.retract_draft();
                    step.observation = "draft revision staged".to_string();
                    return None;
                }
                self.draft = Some(draft);
                self.signal.draft = true;
                self.signal.sci = Verdict::Unset;
                if self.config.matrix.is_gated() {
                    self.verify_draft(step);
                } else {
                    step.observation = "draft accepted unverified".to_string();
                }
                None
            }
            SymbolicAction::EmitCode { code } => {
                if state == FsmState::RectifyCode {
                    self.staged_code = Some(code);
                    self.retract_code();
                    step.observation = "code revision staged".to_string();
                    return None;
                }
                self.code = Some(code);
                self.signal.code = true;
                self.signal.phys = Verdict::Unset;
                self.signal.interlock = false;
                if self.config.matrix.is_gated() {
                    self.verify_code(step)
                } else {
                    self.dispatch_if_approved(step)
                }
            }
        }
    }

    fn retract_draft(&mut self) {
        self.draft = None;
        self.signal.draft = false;
        self.signal.sci = Verdict::Unset;
        self.retract_code();
    }

    fn retract_code(&mut self) {
        self.code = None;
        self.signal.code = false;
        self.signal.phys = Verdict::Unset;
        self.signal.interlock = false;
    }

    fn verify_draft(&mut self, step: &mut Step) {
        let Some(draft) = self.draft.clone() else { return };
        let input = JudgeInput { intent: &self.intent, rubric: &self.rubric };
        let report = match verify_scientific(&draft, &input, self.judge.as_ref()) {
            Ok(r) => r,
            Err(JudgeError::EmptyDraft) => VerificationReport::new(
                Layer::Scientific,
                vec![Violation {
                    op_index: 0,
                    constraint_path: "draft/steps".into(),
                    kind: ViolationKind::Critique,
                    observed: "0 steps".into(),
                    limit: ">= 1 step".into(),
                    message: "draft has no steps".into(),
                }],
                1,
            ),
            Err(e) => {
                // Verdict stays unset; the matrix retries verification next step.
                step.observation = e.to_string();
                return;
            }
        };
        self.signal = signals_from(&report, &self.signal);
        step.observation = format!("scientific check {}", if report.passed { "passed" } else { "failed" });
        self.last_sci = Some(report.clone());
        step.verdict = Some(report);
    }

    fn verify_code(&mut self, step: &mut Step) -> Option<RunOutcome> {
        let code = self.code.clone()?;
        let prior: Vec<String> = self.world.event_log().iter().map(|e| e.op.op_name.clone()).collect();
        let report = PhysicalCheck::new(&self.registry, &self.memory)
            .with_world(&self.world)
            .with_forbidden_orders(&self.rubric.forbidden_orders)
            .with_prior_ops(&prior)
            .run(&code);
        self.signal = signals_from(&report, &self.signal);
        step.observation = format!("physical check {}", if report.passed { "passed" } else { "failed, interlock" });
        self.last_phys = Some(report.clone());
        step.verdict = Some(report);
        self.dispatch_if_approved(step)
    }

    /// Enters the approved state within the current step when the matrix
    /// selects it.
    fn dispatch_if_approved(&mut self, step: &mut Step) -> Option<RunOutcome> {
        if !self.signal.clarify_pending && self.config.matrix.transition(&self.signal) == FsmState::Approved {
            self.dispatch(step)
        } else {
            None
        }
    }

    fn dispatch(&mut self, step: &mut Step) -> Option<RunOutcome> {
        let code = self.code.clone()?;
        let gated = self.config.matrix.is_gated();
        let mut failure: Option<Violation> = None;
        for (i, op) in code.ops.iter().enumerate() {
            let grounded = match resolve(op, &self.memory) {
                Ok(g) => g,
                Err(e) => {
                    failure = Some(Violation {
                        op_index: i,
                        constraint_path: format!("ops/{i}"),
                        kind: ViolationKind::Grounding,
                        observed: op.to_string(),
                        limit: "bound symbol".into(),
                        message: e.to_string(),
                    });
                    break;
                }
            };
            let decision = if gated {
                gate_execution(FsmState::Approved, &self.signal, &grounded)
            } else {
                ExecutionDecision::Execute
            };
            if let ExecutionDecision::Withheld { .. } = decision {
                step.note = Some("interlock withheld execution".to_string());
                self.signal.interlock = self.signal.phys == Verdict::Fail;
                return None;
            }
            match self.world.apply(&grounded) {
                Ok(_) => step.executed = true,
                Err(f) => {
                    failure = Some(f.to_violation(i));
                    break;
                }
            }
        }
        match failure {
            Some(v) => {
                let report = VerificationReport::new(Layer::Physical, vec![v], code.ops.len());
                step.observation = format!("runtime failure: {}", report.feedback_text());
                self.signal = signals_from(&report, &self.signal);
                self.last_phys = Some(report);
                None
            }
            None => {
                step.observation = format!("executed {} ops", code.ops.len());
                self.p_star = Some(code);
                Some(RunOutcome::Success)
            }
        }
    }

    fn await_clarify(&mut self, step: &mut Step) -> Option<RunOutcome> {
        let Some((clar_id, question)) = self.pending.clone() else {
            self.signal.clarify_pending = false;
            return None;
        };
        let Some(clarifier) = self.clarifier.as_mut() else {
            step.note = Some(format!("no clarification channel for {clar_id}"));
            return Some(RunOutcome::ClarificationUnavailable);
        };
        match clarifier.ask(&clar_id, &question) {
            ClarifyReply::Answered(answer) => {
                let key = format!("clarify_{clar_id}");
                let brief: String = answer.split_whitespace().take(MAX_BRIEF_WORDS).collect::<Vec<_>>().join(" ");
                let entry = SymbolEntry::new(
                    &key,
                    SymbolKind::Data,
                    &brief,
                    json!({"clar_id": clar_id, "question": question, "answer": answer}),
                );
                if let Err(e) = self.memory.bind(entry, true) {
                    step.note = Some(format!("cannot bind answer: {e}"));
                    return Some(RunOutcome::ClarificationUnavailable);
                }
                self.pending = None;
                self.signal.clarify_pending = false;
                step.note = Some(format!("answer bound as {key}"));
                step.observation = format!("clarification {clar_id} answered");
                None
            }
            ClarifyReply::Closed => {
                step.note = Some(format!("clarification {clar_id} closed"));
                if self.halt.load(Ordering::SeqCst) {
                    Some(RunOutcome::OperatorHalt)
                } else {
                    Some(RunOutcome::ClarificationUnavailable)
                }
            }
        }
    }
}
