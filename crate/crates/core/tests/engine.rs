use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use dvr_core::eval::{load_bundled_suite, ScriptMode, TaskEnv, TaskSpec};
use dvr_core::fsm::{DecisionMatrix, EngineConfig, FsmState, RunOutcome, RunResult, Verdict};
use dvr_core::planner::{
    Planner, PlannerContext, PlannerError, PlannerScript, ScriptStep, ScriptedPlanner, SymbolicAction,
};
use dvr_core::trace::{audit_run, to_jsonl, TraceEvent};
use dvr_core::verifier::{Layer, ViolationKind};

fn task(id: &str) -> TaskSpec {
    load_bundled_suite().into_iter().find(|t| t.id == id).expect("bundled task")
}

fn run(task: &TaskSpec, mode: ScriptMode, config: EngineConfig) -> RunResult {
    let env = TaskEnv::bundled();
    task.engine(&env, Box::new(task.planner(mode).unwrap()), config).unwrap().run()
}

fn run_with(task: &TaskSpec, planner: Box<dyn Planner>, config: EngineConfig) -> RunResult {
    task.engine(&TaskEnv::bundled(), planner, config).unwrap().run()
}

fn gt_code(task: &TaskSpec) -> SymbolicAction {
    SymbolicAction::EmitCode { code: task.ground_truth.code_ops.clone().unwrap() }
}

use FsmState::*;

#[test]
fn centrifuge_overspeed_is_rectified() {
    let t = task("d1_centrifuge_overspeed");
    let r = run(&t, ScriptMode::Rectifying, EngineConfig::default());
    assert_eq!(r.states(), vec![DesignCode, RectifyCode, DesignCode, Success]);
    assert_eq!(r.outcome, RunOutcome::Success);

    let first = &r.trace[0];
    let verdict = first.verdict.as_ref().unwrap();
    assert_eq!(verdict.layer, Layer::Physical);
    assert!(!verdict.passed);
    assert_eq!(verdict.violations.len(), 1);
    let v = &verdict.violations[0];
    assert_eq!(v.kind, ViolationKind::Range);
    assert!(v.message.contains("25000") && v.message.contains("15000"), "{}", v.message);
    assert!(first.signal.interlock);
    assert!(!first.executed);

    assert!(r.trace[2].verdict.as_ref().unwrap().passed);
    assert!(r.trace[2].executed);
    assert_eq!(r.world.event_log().len(), 3);
    assert_eq!(r.world.event_log()[2].op.number("speed"), Some(15000.0));
}

#[test]
fn hallucinated_plate_is_rectified() {
    let t = task("d2_unknown_plate");
    let r = run(&t, ScriptMode::Rectifying, EngineConfig::default());
    assert_eq!(r.states(), vec![DesignCode, RectifyCode, DesignCode, Success]);
    let v = &r.trace[0].verdict.as_ref().unwrap().violations;
    assert!(v.iter().all(|v| v.kind == ViolationKind::Grounding));
    assert!(v.iter().any(|v| v.observed.contains("new_plate") || v.message.contains("new_plate")));
    assert!(r.world.event_log().iter().all(|e| e.op.reference("dest").is_none_or(|(k, _)| k != "new_plate")));
}

#[test]
fn golden_traces_are_byte_identical_across_runs() {
    for id in ["d1_centrifuge_overspeed", "d2_unknown_plate"] {
        let t = task(id);
        let first = to_jsonl(&run(&t, ScriptMode::Rectifying, EngineConfig::default()).trace);
        for _ in 0..3 {
            assert_eq!(to_jsonl(&run(&t, ScriptMode::Rectifying, EngineConfig::default()).trace), first);
        }
    }
}

#[test]
fn trace_event_json_shape() {
    let r = run(&task("d1_centrifuge_overspeed"), ScriptMode::Rectifying, EngineConfig::default());
    let v: serde_json::Value = serde_json::from_str(&r.trace[0].to_json_line()).unwrap();
    assert_eq!(v["t"], 0);
    assert_eq!(v["state"], "DESIGN_CODE");
    assert_eq!(v["signal"]["phys"], "fail");
    assert_eq!(v["signal"]["interlock"], true);
    assert_eq!(v["action"]["kind"], "EmitCode");
    assert_eq!(v["verdict"]["layer"], "physical");
    assert_eq!(v["executed"], false);
    let last: serde_json::Value = serde_json::from_str(&r.trace[3].to_json_line()).unwrap();
    assert_eq!(last["action"], serde_json::Value::Null);
    assert_eq!(last["outcome"]["kind"], "success");
}

#[test]
fn draft_rectification_round_trip() {
    let r = run(&task("a3_growth_od"), ScriptMode::Rectifying, EngineConfig::default());
    assert_eq!(r.states(), vec![RetrieveKnowledge, DesignDraft, RectifyDraft, DesignDraft, DesignCode, Success]);
    let rejected = r.trace[1].verdict.as_ref().unwrap();
    assert_eq!(rejected.layer, Layer::Scientific);
    assert!(!rejected.passed);
    assert!(r.trace[3].verdict.as_ref().unwrap().passed);
    assert_eq!(r.draft.as_ref().unwrap().steps.len(), 3);
}

#[test]
fn order_swap_is_caught_before_anything_runs() {
    let r = run(&task("d3_seal_before_fill"), ScriptMode::Rectifying, EngineConfig::default());
    assert_eq!(r.states(), vec![DesignCode, RectifyCode, DesignCode, Success]);
    let kinds: Vec<ViolationKind> = r.trace[0].verdict.as_ref().unwrap().violations.iter().map(|v| v.kind).collect();
    assert!(kinds.contains(&ViolationKind::Order));
    assert!(kinds.contains(&ViolationKind::Guard));
}

#[test]
fn non_rectifying_planner_times_out_without_executing() {
    let t = task("d1_centrifuge_overspeed");
    let r = run(&t, ScriptMode::NonRectifying, EngineConfig { t_max: 12, ..EngineConfig::default() });
    assert_eq!(r.outcome, RunOutcome::Timeout);
    assert_eq!(r.trace.len(), 13);
    assert!(r.world.event_log().is_empty());
    assert!(r.trace.iter().all(|e| !e.executed));
}

#[test]
fn pass_through_matrix_executes_unverified_code() {
    let t = task("d1_centrifuge_overspeed");
    let config = EngineConfig { matrix: DecisionMatrix::pass_through(), ..EngineConfig::default() };
    let r = run(&t, ScriptMode::Rectifying, config);
    assert_eq!(r.states(), vec![DesignCode, Success]);
    assert!(r.trace.iter().all(|e| e.verdict.is_none()));
    let env = TaskEnv::bundled();
    let audit = audit_run(&r.trace, &r.initial_world, r.world.event_log(), &env.registry, &r.memory, &t.rubric.forbidden_orders);
    assert_eq!(audit.executed_ops, 3);
    assert_eq!(audit.violating_ops, 1);
    assert_eq!(audit.unverified_ops, 3);
}

#[test]
fn pass_through_halts_on_runtime_failure() {
    let t = task("d2_unknown_plate");
    let config = EngineConfig { matrix: DecisionMatrix::pass_through(), ..EngineConfig::default() };
    let r = run(&t, ScriptMode::Rectifying, config);
    assert_eq!(r.outcome, RunOutcome::MatrixHalt);
    assert_eq!(r.trace[0].signal.phys, Verdict::Fail);
    assert!(r.world.event_log().is_empty());
}

#[test]
fn gated_runs_pass_the_audit() {
    let env = TaskEnv::bundled();
    for t in load_bundled_suite() {
        let r = run(&t, ScriptMode::Rectifying, EngineConfig::default());
        let audit = audit_run(&r.trace, &r.initial_world, r.world.event_log(), &env.registry, &r.memory, &t.rubric.forbidden_orders);
        assert!(audit.is_clean(), "{}: {:?}", t.id, audit);
        assert!(audit.executed_ops > 0);
    }
}

#[test]
fn mask_violation_is_recorded_and_discarded() {
    let t = task("b1_spin_plate");
    let draft = SymbolicAction::EmitDraft { draft: t.seed_draft() };
    let script = PlannerScript::new(vec![ScriptStep::new(draft), ScriptStep::new(gt_code(&t))]);
    let r = run_with(&t, Box::new(ScriptedPlanner::new(script)), EngineConfig::default());
    assert_eq!(r.states(), vec![DesignCode, DesignCode, Success]);
    assert!(r.trace[0].note.as_deref().unwrap().starts_with("mask violation"));
    assert!(!r.trace[0].signal.code);
}

/// Records every context it is shown.
struct Recording {
    inner: ScriptedPlanner,
    seen: Arc<Mutex<Vec<PlannerContext>>>,
}

impl Planner for Recording {
    fn propose(&mut self, ctx: &PlannerContext) -> Result<SymbolicAction, PlannerError> {
        self.seen.lock().unwrap().push(ctx.clone());
        self.inner.propose(ctx)
    }
}

#[test]
fn clarification_answer_reaches_the_next_context() {
    let mut t = task("b1_spin_plate");
    t.clarify_answers = vec!["use plate_1 in well A1".into()];
    let script = PlannerScript::new(vec![
        ScriptStep::new(SymbolicAction::Clarify { question: "Which plate?".into() }),
        ScriptStep::new(gt_code(&t)),
    ]);
    let seen = Arc::new(Mutex::new(Vec::new()));
    let planner = Recording { inner: ScriptedPlanner::new(script), seen: seen.clone() };
    let config = EngineConfig { run_id: "r1".into(), ..EngineConfig::default() };
    let r = run_with(&t, Box::new(planner), config);
    assert_eq!(r.states(), vec![DesignCode, AwaitClarify, DesignCode, Success]);
    assert!(r.trace[0].signal.clarify_pending);
    assert!(!r.trace[1].signal.clarify_pending);
    let seen = seen.lock().unwrap();
    assert!(!seen[0].digest.contains_key("clarify_r1_c1"));
    assert!(seen[1].digest.contains_key("clarify_r1_c1"));
    assert_eq!(r.memory.get("clarify_r1_c1").unwrap().payload["answer"], "use plate_1 in well A1");
}

#[test]
fn unanswered_clarification_halts() {
    let t = task("b1_spin_plate");
    let script = PlannerScript::new(vec![ScriptStep::new(SymbolicAction::Clarify { question: "?".into() })]);
    let r = run_with(&t, Box::new(ScriptedPlanner::new(script)), EngineConfig::default());
    assert_eq!(r.outcome, RunOutcome::ClarificationUnavailable);
    assert_eq!(*r.states().last().unwrap(), Halt);
}

#[test]
fn halt_flag_stops_at_the_next_boundary() {
    let t = task("c1_plate_fill_60");
    let env = TaskEnv::bundled();
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    let engine = t
        .engine(&env, Box::new(t.planner(ScriptMode::Rectifying).unwrap()), EngineConfig::default())
        .unwrap()
        .with_halt_flag(flag)
        .with_sink(Box::new(move |e: &TraceEvent| {
            if e.state == RetrieveKnowledge {
                f.store(true, Ordering::SeqCst);
            }
        }));
    let r = engine.run();
    assert_eq!(r.outcome, RunOutcome::OperatorHalt);
    assert_eq!(r.states(), vec![RetrieveKnowledge, Halt]);
    assert!(r.world.event_log().is_empty());
}

#[test]
fn planner_failure_halts() {
    let t = task("b1_spin_plate");
    let r = run_with(&t, Box::new(ScriptedPlanner::new(PlannerScript::new(vec![]))), EngineConfig::default());
    assert!(matches!(r.outcome, RunOutcome::PlannerFailure { .. }));
    assert_eq!(*r.states().last().unwrap(), Halt);
}

#[test]
fn token_counts_cover_planner_steps_only() {
    let r = run(&task("d1_centrifuge_overspeed"), ScriptMode::Rectifying, EngineConfig::default());
    let called: Vec<bool> = r.steps.iter().map(|s| s.planner_called).collect();
    // The second DESIGN_CODE consumes the staged revision without a planner call.
    assert_eq!(called, vec![true, true, false]);
    for s in &r.steps {
        assert_eq!(s.planner_called, s.tokens_in > 0);
        assert_eq!(s.planner_called, s.tokens_out > 0);
    }
    assert_eq!(r.tokens_in(), r.steps.iter().map(|s| s.tokens_in).sum::<usize>());
}

#[test]
fn sixty_step_chain_executes_every_op() {
    let r = run(&task("c1_plate_fill_60"), ScriptMode::Rectifying, EngineConfig::default());
    assert_eq!(r.outcome, RunOutcome::Success);
    assert_eq!(r.world.event_log().len(), 60);
    assert_eq!(r.p_star.as_ref().unwrap().ops.len(), 60);
}
