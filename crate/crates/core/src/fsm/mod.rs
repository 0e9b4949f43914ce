//! Deterministic control: signal vector, priority decision matrix, the
//! execution interlock and per-state action masks. The run loop lives in
//! [`engine`].

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::GroundedAction;

pub mod engine;

pub use engine::{
    CannedClarifier, Clarifier, ClarifyReply, Engine, EngineConfig, RunOutcome, RunResult, StartPoint, StepOutcome, StepRecord,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FsmState {
    Init,
    RetrieveKnowledge,
    DesignDraft,
    VerifyDraft,
    RectifyDraft,
    DesignCode,
    VerifyCode,
    RectifyCode,
    AwaitClarify,
    Approved,
    Success,
    Halt,
}

impl FsmState {
    pub const ALL: [FsmState; 12] = [
        FsmState::Init,
        FsmState::RetrieveKnowledge,
        FsmState::DesignDraft,
        FsmState::VerifyDraft,
        FsmState::RectifyDraft,
        FsmState::DesignCode,
        FsmState::VerifyCode,
        FsmState::RectifyCode,
        FsmState::AwaitClarify,
        FsmState::Approved,
        FsmState::Success,
        FsmState::Halt,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, FsmState::Success | FsmState::Halt)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FsmState::Init => "INIT",
            FsmState::RetrieveKnowledge => "RETRIEVE_KNOWLEDGE",
            FsmState::DesignDraft => "DESIGN_DRAFT",
            FsmState::VerifyDraft => "VERIFY_DRAFT",
            FsmState::RectifyDraft => "RECTIFY_DRAFT",
            FsmState::DesignCode => "DESIGN_CODE",
            FsmState::VerifyCode => "VERIFY_CODE",
            FsmState::RectifyCode => "RECTIFY_CODE",
            FsmState::AwaitClarify => "AWAIT_CLARIFY",
            FsmState::Approved => "APPROVED",
            FsmState::Success => "SUCCESS",
            FsmState::Halt => "HALT",
        }
    }
}

impl fmt::Display for FsmState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Tri-state verification verdict.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    #[default]
    Unset,
    Pass,
    Fail,
}

impl Verdict {
    pub const ALL: [Verdict; 3] = [Verdict::Unset, Verdict::Pass, Verdict::Fail];

    fn as_str(self) -> &'static str {
        match self {
            Verdict::Unset => "unset",
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignalVector {
    pub know: bool,
    pub draft: bool,
    pub code: bool,
    pub sci: Verdict,
    pub phys: Verdict,
    pub interlock: bool,
    pub clarify_pending: bool,
}

impl SignalVector {
    /// Whether the cross-field invariants hold.
    pub fn is_consistent(&self) -> bool {
        (!self.interlock || self.phys == Verdict::Fail)
            && (self.code || self.phys == Verdict::Unset)
            && (self.draft || self.sci == Verdict::Unset)
    }

    /// All 144 combinations of the four booleans and two verdicts that drive
    /// the matrix, with `clarify_pending` false. Includes combinations that
    /// violate [`SignalVector::is_consistent`].
    pub fn enumerate_matrix_inputs() -> Vec<SignalVector> {
        let mut out = Vec::with_capacity(144);
        for bits in 0u8..16 {
            for sci in Verdict::ALL {
                for phys in Verdict::ALL {
                    out.push(SignalVector {
                        know: bits & 1 != 0,
                        draft: bits & 2 != 0,
                        code: bits & 4 != 0,
                        interlock: bits & 8 != 0,
                        sci,
                        phys,
                        clarify_pending: false,
                    });
                }
            }
        }
        out
    }
}

/// One literal of a rule condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "signal", content = "is", rename_all = "snake_case")]
pub enum Literal {
    Know(bool),
    Draft(bool),
    Code(bool),
    Sci(Verdict),
    Phys(Verdict),
    Interlock(bool),
}

impl Literal {
    pub fn matches(&self, s: &SignalVector) -> bool {
        match *self {
            Literal::Know(v) => s.know == v,
            Literal::Draft(v) => s.draft == v,
            Literal::Code(v) => s.code == v,
            Literal::Sci(v) => s.sci == v,
            Literal::Phys(v) => s.phys == v,
            Literal::Interlock(v) => s.interlock == v,
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = |f: &mut fmt::Formatter<'_>, name: &str, v: bool| {
            if v {
                f.write_str(name)
            } else {
                write!(f, "!{name}")
            }
        };
        match *self {
            Literal::Know(v) => flag(f, "know", v),
            Literal::Draft(v) => flag(f, "draft", v),
            Literal::Code(v) => flag(f, "code", v),
            Literal::Interlock(v) => flag(f, "interlock", v),
            Literal::Sci(v) => write!(f, "sci={}", v.as_str()),
            Literal::Phys(v) => write!(f, "phys={}", v.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorityRule {
    pub priority: u32,
    pub condition: Vec<Literal>,
    pub target: FsmState,
}

impl PriorityRule {
    pub fn new(priority: u32, condition: &[Literal], target: FsmState) -> Self {
        Self { priority, condition: condition.to_vec(), target }
    }

    pub fn matches(&self, s: &SignalVector) -> bool {
        self.condition.iter().all(|l| l.matches(s))
    }

    pub fn describe(&self) -> String {
        self.condition.iter().map(ToString::to_string).collect::<Vec<_>>().join(" & ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MatrixError {
    #[error("duplicate rule priority {0}")]
    DuplicatePriority(u32),
    #[error("rule priorities must be positive")]
    ZeroPriority,
}

/// The priority decision matrix. `gated` distinguishes the verifying matrix
/// from the pass-through ablation, which also disables the execution interlock.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionMatrix {
    rules: Vec<PriorityRule>,
    fallback: FsmState,
    gated: bool,
}

impl DecisionMatrix {
    pub fn new(mut rules: Vec<PriorityRule>, gated: bool) -> Result<Self, MatrixError> {
        let mut seen = BTreeSet::new();
        for r in &rules {
            if r.priority == 0 {
                return Err(MatrixError::ZeroPriority);
            }
            if !seen.insert(r.priority) {
                return Err(MatrixError::DuplicatePriority(r.priority));
            }
        }
        rules.sort_by_key(|r| r.priority);
        Ok(Self { rules, fallback: FsmState::Halt, gated })
    }

    /// The verifying design-verify-rectify matrix.
    pub fn standard() -> Self {
        use Literal::*;
        let rules = vec![
            PriorityRule::new(1, &[Phys(Verdict::Fail), Code(true)], FsmState::RectifyCode),
            PriorityRule::new(2, &[Sci(Verdict::Fail), Draft(true)], FsmState::RectifyDraft),
            PriorityRule::new(3, &[Draft(false), Know(true)], FsmState::DesignDraft),
            PriorityRule::new(4, &[Draft(true), Sci(Verdict::Pass), Code(false)], FsmState::DesignCode),
            PriorityRule::new(5, &[Draft(true), Sci(Verdict::Unset)], FsmState::VerifyDraft),
            PriorityRule::new(6, &[Code(true), Phys(Verdict::Pass)], FsmState::Approved),
            PriorityRule::new(7, &[Code(true), Phys(Verdict::Unset)], FsmState::VerifyCode),
            PriorityRule::new(8, &[Draft(false), Know(false)], FsmState::RetrieveKnowledge),
        ];
        Self::new(rules, true).expect("standard matrix is well-formed")
    }

    /// Ablation matrix without verification or rectification: any code goes
    /// straight to execution, and a runtime failure halts.
    pub fn pass_through() -> Self {
        use Literal::*;
        let rules = vec![
            PriorityRule::new(1, &[Code(true), Phys(Verdict::Fail)], FsmState::Halt),
            PriorityRule::new(2, &[Code(true)], FsmState::Approved),
            PriorityRule::new(3, &[Draft(true)], FsmState::DesignCode),
            PriorityRule::new(4, &[Know(true)], FsmState::DesignDraft),
            PriorityRule::new(5, &[Know(false)], FsmState::RetrieveKnowledge),
        ];
        Self::new(rules, false).expect("pass-through matrix is well-formed")
    }

    pub fn rules(&self) -> &[PriorityRule] {
        &self.rules
    }

    pub fn fallback(&self) -> FsmState {
        self.fallback
    }

    pub fn is_gated(&self) -> bool {
        self.gated
    }

    /// Selects the next state: clarification overrides everything, otherwise
    /// the matching rule with the smallest priority wins, else the fallback.
    pub fn transition(&self, signal: &SignalVector) -> FsmState {
        if signal.clarify_pending {
            return FsmState::AwaitClarify;
        }
        self.matching_rule(signal).map(|r| r.target).unwrap_or(self.fallback)
    }

    pub fn matching_rule(&self, signal: &SignalVector) -> Option<&PriorityRule> {
        self.rules.iter().filter(|r| r.matches(signal)).min_by_key(|r| r.priority)
    }

    /// JSON document describing the matrix, used by `fsm export-matrix` and
    /// `GET /fsm/matrix`.
    pub fn export(&self) -> serde_json::Value {
        let rules: Vec<serde_json::Value> = self
            .rules
            .iter()
            .map(|r| {
                serde_json::json!({
                    "priority": r.priority,
                    "condition": r.condition,
                    "condition_text": r.describe(),
                    "target": r.target,
                })
            })
            .collect();
        serde_json::json!({
            "gated": self.gated,
            "override": {"signal": "clarify_pending", "target": FsmState::AwaitClarify},
            "rules": rules,
            "fallback": self.fallback,
            "states": FsmState::ALL,
        })
    }
}

impl Default for DecisionMatrix {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecutionDecision {
    Execute,
    Withheld { interlock: bool },
}

/// The execution interlock: only an approved, physically verified action runs.
pub fn gate_execution(state: FsmState, signal: &SignalVector, _action: &GroundedAction) -> ExecutionDecision {
    if state == FsmState::Approved && signal.phys == Verdict::Pass {
        ExecutionDecision::Execute
    } else {
        ExecutionDecision::Withheld { interlock: signal.phys == Verdict::Fail }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionKind {
    EmitDraft,
    EmitCode,
    RetrieveKnowledge,
    Clarify,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::EmitDraft => "EmitDraft",
            ActionKind::EmitCode => "EmitCode",
            ActionKind::RetrieveKnowledge => "RetrieveKnowledge",
            ActionKind::Clarify => "Clarify",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("state {0} is terminal")]
pub struct TerminalState(pub FsmState);

/// Action kinds the planner may emit in `state`.
pub fn allowed_actions(state: FsmState) -> Result<BTreeSet<ActionKind>, TerminalState> {
    use ActionKind::*;
    let set: &[ActionKind] = match state {
        FsmState::Success | FsmState::Halt => return Err(TerminalState(state)),
        FsmState::DesignDraft | FsmState::RectifyDraft => &[EmitDraft, Clarify],
        FsmState::DesignCode | FsmState::RectifyCode => &[EmitCode, Clarify],
        FsmState::RetrieveKnowledge => &[RetrieveKnowledge],
        FsmState::Init
        | FsmState::VerifyDraft
        | FsmState::VerifyCode
        | FsmState::AwaitClarify
        | FsmState::Approved => &[],
    };
    Ok(set.iter().copied().collect())
}
