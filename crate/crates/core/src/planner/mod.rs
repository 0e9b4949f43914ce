//! Planner policies. The engine asks a [`Planner`] for one [`SymbolicAction`]
//! per planning step and enforces the action mask itself.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsm::{ActionKind, FsmState};
use crate::grounding::ContextDigest;
use crate::memory::{KnowledgeDoc, TrajectoryEntry};
use crate::protocol::{ProtocolCode, ProtocolDraft};
use crate::util::sha256_hex;
use crate::verifier::VerificationReport;

pub mod fault;
pub mod prompt;
pub mod remote;
pub mod script;

pub use fault::{apply_fault, inject_fault, rectifying_script, FaultError, FaultInjectingPlanner, FaultSpec};
pub use prompt::{render_prompt, PromptError, PromptTemplate};
pub use remote::{RemoteConfig, RemoteJudge, RemotePlanner};
pub use script::{Exhaustion, PlannerScript, ScriptStep, ScriptedPlanner};

/// One planner output. Exactly one payload, matching the kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SymbolicAction {
    EmitDraft { draft: ProtocolDraft },
    EmitCode { code: ProtocolCode },
    RetrieveKnowledge { query: String },
    Clarify { question: String },
}

impl SymbolicAction {
    pub fn kind(&self) -> ActionKind {
        match self {
            SymbolicAction::EmitDraft { .. } => ActionKind::EmitDraft,
            SymbolicAction::EmitCode { .. } => ActionKind::EmitCode,
            SymbolicAction::RetrieveKnowledge { .. } => ActionKind::RetrieveKnowledge,
            SymbolicAction::Clarify { .. } => ActionKind::Clarify,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("action serializes")
    }

    /// Kind plus content hash; equal signatures mean byte-identical actions.
    pub fn signature(&self) -> String {
        format!("{}:{}", self.kind(), &sha256_hex(self.to_json().as_bytes())[..16])
    }

    /// One-line description for the trajectory.
    pub fn summary(&self) -> String {
        match self {
            SymbolicAction::EmitDraft { draft } => format!("draft '{}' ({} steps)", draft.title, draft.steps.len()),
            SymbolicAction::EmitCode { code } => {
                let ops: Vec<String> = code.ops.iter().map(ToString::to_string).collect();
                format!("code [{}]", ops.join("; "))
            }
            SymbolicAction::RetrieveKnowledge { query } => format!("retrieve '{query}'"),
            SymbolicAction::Clarify { question } => format!("clarify '{question}'"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerContext {
    pub state: FsmState,
    pub intent: String,
    pub digest: ContextDigest,
    pub history: Vec<TrajectoryEntry>,
    /// Latest violation report or critique; set only in rectify states.
    pub feedback: Option<VerificationReport>,
    pub allowed: BTreeSet<ActionKind>,
    pub knowledge: Vec<KnowledgeDoc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlannerError {
    #[error("planner script exhausted after {0} steps")]
    ScriptExhausted(usize),
    #[error("policy unavailable: {0}")]
    PolicyUnavailable(String),
    #[error("planner request cancelled")]
    Cancelled,
}

pub trait Planner: Send {
    fn propose(&mut self, ctx: &PlannerContext) -> Result<SymbolicAction, PlannerError>;
}

impl<P: Planner + ?Sized> Planner for Box<P> {
    fn propose(&mut self, ctx: &PlannerContext) -> Result<SymbolicAction, PlannerError> {
        (**self).propose(ctx)
    }
}
