//! Deterministic script playback.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::fsm::ActionKind;

use super::{Planner, PlannerContext, PlannerError, SymbolicAction};

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptStep {
    /// Only emitted when the context carries verifier feedback; skipped otherwise.
    pub expect_feedback: bool,
    pub action: SymbolicAction,
}

impl ScriptStep {
    pub fn new(action: SymbolicAction) -> Self {
        Self { expect_feedback: false, action }
    }

    pub fn on_feedback(action: SymbolicAction) -> Self {
        Self { expect_feedback: true, action }
    }
}

#[derive(Serialize, Deserialize)]
struct RawStep {
    kind: ActionKind,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    expect_feedback: bool,
    payload: Value,
}

impl TryFrom<RawStep> for ScriptStep {
    type Error = String;

    fn try_from(raw: RawStep) -> Result<Self, String> {
        let text = |v: Value, field: &str| match v {
            Value::String(s) => Ok(s),
            Value::Object(mut m) => match m.remove(field) {
                Some(Value::String(s)) => Ok(s),
                _ => Err(format!("{} payload needs a '{field}' string", raw.kind)),
            },
            _ => Err(format!("{} payload must be a string", raw.kind)),
        };
        let action = match raw.kind {
            ActionKind::EmitDraft => SymbolicAction::EmitDraft {
                draft: serde_json::from_value(raw.payload).map_err(|e| format!("EmitDraft payload: {e}"))?,
            },
            ActionKind::EmitCode => SymbolicAction::EmitCode {
                code: serde_json::from_value(raw.payload).map_err(|e| format!("EmitCode payload: {e}"))?,
            },
            ActionKind::RetrieveKnowledge => SymbolicAction::RetrieveKnowledge { query: text(raw.payload, "query")? },
            ActionKind::Clarify => SymbolicAction::Clarify { question: text(raw.payload, "question")? },
        };
        Ok(ScriptStep { expect_feedback: raw.expect_feedback, action })
    }
}

impl From<ScriptStep> for RawStep {
    fn from(step: ScriptStep) -> Self {
        let kind = step.action.kind();
        let payload = match step.action {
            SymbolicAction::EmitDraft { draft } => serde_json::to_value(draft).expect("draft serializes"),
            SymbolicAction::EmitCode { code } => serde_json::to_value(code).expect("code serializes"),
            SymbolicAction::RetrieveKnowledge { query } => Value::String(query),
            SymbolicAction::Clarify { question } => Value::String(question),
        };
        RawStep { kind, expect_feedback: step.expect_feedback, payload }
    }
}

impl Serialize for ScriptStep {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        RawStep::from(self.clone()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for ScriptStep {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        ScriptStep::try_from(RawStep::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerScript {
    pub steps: Vec<ScriptStep>,
}

impl PlannerScript {
    pub fn new(steps: Vec<ScriptStep>) -> Self {
        Self { steps }
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// What the scripted planner does once the script runs out.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exhaustion {
    #[default]
    Error,
    /// Keep emitting the last action, ignoring feedback.
    RepeatLast,
}

#[derive(Debug, Clone)]
pub struct ScriptedPlanner {
    script: PlannerScript,
    cursor: usize,
    last: Option<SymbolicAction>,
    exhaustion: Exhaustion,
}

impl ScriptedPlanner {
    pub fn new(script: PlannerScript) -> Self {
        Self { script, cursor: 0, last: None, exhaustion: Exhaustion::Error }
    }

    pub fn with_exhaustion(mut self, exhaustion: Exhaustion) -> Self {
        self.exhaustion = exhaustion;
        self
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }
}

impl Planner for ScriptedPlanner {
    fn propose(&mut self, ctx: &PlannerContext) -> Result<SymbolicAction, PlannerError> {
        while let Some(step) = self.script.steps.get(self.cursor) {
            self.cursor += 1;
            if step.expect_feedback && ctx.feedback.is_none() {
                continue;
            }
            self.last = Some(step.action.clone());
            return Ok(step.action.clone());
        }
        match (self.exhaustion, &self.last) {
            (Exhaustion::RepeatLast, Some(last)) => Ok(last.clone()),
            _ => Err(PlannerError::ScriptExhausted(self.script.len())),
        }
    }
}
