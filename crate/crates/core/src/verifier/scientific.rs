//! Scientific verification of protocol drafts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::ProtocolDraft;
use crate::util::normalized_words;

use super::{Layer, VerificationReport, Violation, ViolationKind};

/// Task-supplied scientific rubric.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rubric {
    /// Each group is satisfied when the draft mentions any one member.
    #[serde(default)]
    pub keyword_groups: Vec<Vec<String>>,
    /// Step kinds the draft must contain.
    #[serde(default)]
    pub required_steps: Vec<String>,
    /// `[a, b]`: `a` must never come before `b`. Applies to draft step kinds
    /// and to protocol operation names.
    #[serde(default)]
    pub forbidden_orders: Vec<[String; 2]>,
}

/// What a judge sees of the task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgeInput<'a> {
    pub intent: &'a str,
    pub rubric: &'a Rubric,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JudgeError {
    #[error("draft has no steps")]
    EmptyDraft,
    #[error("judge unavailable: {0}")]
    JudgeUnavailable(String),
}

pub trait ScientificJudge: Send + Sync {
    fn judge(&self, draft: &ProtocolDraft, input: &JudgeInput<'_>) -> Result<VerificationReport, JudgeError>;
}

pub fn verify_scientific(
    draft: &ProtocolDraft,
    input: &JudgeInput<'_>,
    judge: &dyn ScientificJudge,
) -> Result<VerificationReport, JudgeError> {
    if draft.is_empty() {
        return Err(JudgeError::EmptyDraft);
    }
    judge.judge(draft, input)
}

/// Whether `words` contains any member of `group` as a contiguous word run.
pub fn group_covered(words: &[String], group: &[String]) -> bool {
    group.iter().any(|member| {
        let needle = normalized_words(member);
        !needle.is_empty() && words.windows(needle.len()).any(|w| w == needle.as_slice())
    })
}

/// Deterministic judge over the rubric.
#[derive(Debug, Clone, Copy, Default)]
pub struct RubricJudge;

impl ScientificJudge for RubricJudge {
    fn judge(&self, draft: &ProtocolDraft, input: &JudgeInput<'_>) -> Result<VerificationReport, JudgeError> {
        if draft.is_empty() {
            return Err(JudgeError::EmptyDraft);
        }
        let rubric = input.rubric;
        let words = normalized_words(&draft.text());
        let mut violations = Vec::new();
        let mut checked = 0;

        for (i, group) in rubric.keyword_groups.iter().enumerate() {
            checked += 1;
            if !group_covered(&words, group) {
                violations.push(Violation {
                    op_index: 0,
                    constraint_path: format!("rubric/keyword_groups/{i}"),
                    kind: ViolationKind::Critique,
                    observed: "absent".into(),
                    limit: group.join("|"),
                    message: format!("draft does not address any of: {}", group.join(", ")),
                });
            }
        }

        for step in &rubric.required_steps {
            checked += 1;
            if !draft.steps.iter().any(|s| &s.kind == step) {
                violations.push(Violation {
                    op_index: 0,
                    constraint_path: format!("rubric/required_steps/{step}"),
                    kind: ViolationKind::Critique,
                    observed: "absent".into(),
                    limit: step.clone(),
                    message: format!("missing required step '{step}'"),
                });
            }
        }

        for (r, [earlier, later]) in rubric.forbidden_orders.iter().enumerate() {
            for (j, _) in draft.steps.iter().enumerate().filter(|(_, s)| &s.kind == later) {
                checked += 1;
                if draft.steps[..j].iter().any(|s| &s.kind == earlier) {
                    violations.push(Violation {
                        op_index: j,
                        constraint_path: format!("rubric/forbidden_orders/{r}"),
                        kind: ViolationKind::Order,
                        observed: format!("{earlier} before {later}"),
                        limit: format!("{later} before {earlier}"),
                        message: format!("step '{later}' must not follow '{earlier}'"),
                    });
                }
            }
        }

        Ok(VerificationReport::new(Layer::Scientific, violations, checked))
    }
}
