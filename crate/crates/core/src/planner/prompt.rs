//! Prompt rendering for text-based planners.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::PlannerContext;

pub const PLACEHOLDERS: &[&str] = &["state", "intent", "digest", "history", "feedback", "allowed", "knowledge"];

const DEFAULT_TEMPLATE: &str = "\
You control a laboratory automation agent. Current state: {state}.
Allowed actions: {allowed}
Respond with exactly one JSON object {{\"kind\": <action>, ...}} using only allowed actions.
Refer to resources only by the symbol keys listed below.

## Intent
{intent}

## Symbols
{digest}

## Knowledge
{knowledge}

## History
{history}

## Verifier feedback
{feedback}
";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub text: String,
}

impl PromptTemplate {
    pub fn new(text: &str) -> Self {
        Self { text: text.to_string() }
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::new(DEFAULT_TEMPLATE)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("unknown placeholder '{{{0}}}'")]
    UnknownPlaceholder(String),
    #[error("unclosed '{{' at byte {0}")]
    Unclosed(usize),
    #[error("unmatched '}}' at byte {0}")]
    Unmatched(usize),
}

fn section(ctx: &PlannerContext, name: &str) -> Option<String> {
    Some(match name {
        "state" => ctx.state.to_string(),
        "intent" => ctx.intent.clone(),
        "digest" => ctx.digest.render(),
        "allowed" => ctx.allowed.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(", "),
        "feedback" => ctx.feedback.as_ref().map(|f| f.feedback_text()).unwrap_or_default(),
        "history" => {
            let mut out = String::new();
            for e in &ctx.history {
                let _ = writeln!(out, "t={} {} {} -> {}", e.t, e.state, e.action_summary, e.observation);
            }
            out.trim_end().to_string()
        }
        "knowledge" => {
            let mut out = String::new();
            for d in &ctx.knowledge {
                let _ = writeln!(out, "[{}] {}: {}", d.id, d.title, d.body);
            }
            out.trim_end().to_string()
        }
        _ => return None,
    })
}

/// Substitutes `{name}` placeholders; `{{` and `}}` are literal braces.
pub fn render_prompt(ctx: &PlannerContext, template: &PromptTemplate) -> Result<String, PromptError> {
    let text = &template.text;
    let mut out = String::with_capacity(text.len());
    let mut rest = text.as_str();
    let mut offset = 0;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        let consumed = if tail.starts_with("{{") {
            out.push('{');
            2
        } else if tail.starts_with("}}") {
            out.push('}');
            2
        } else if tail.starts_with('}') {
            return Err(PromptError::Unmatched(offset + pos));
        } else {
            let end = tail.find('}').ok_or(PromptError::Unclosed(offset + pos))?;
            let name = &tail[1..end];
            out.push_str(&section(ctx, name).ok_or_else(|| PromptError::UnknownPlaceholder(name.to_string()))?);
            end + 1
        };
        offset += pos + consumed;
        rest = &rest[pos + consumed..];
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fsm::{allowed_actions, FsmState};
    use crate::grounding::{project, SymbolEntry, SymbolKind, WorkingMemory};
    use crate::verifier::{Layer, VerificationReport, Violation, ViolationKind};
    use serde_json::json;

    fn ctx(state: FsmState) -> PlannerContext {
        let mut m = WorkingMemory::new();
        for (k, secret) in [("plate_1", "PAYLOAD-AAA"), ("trough_1", "PAYLOAD-BBB"), ("centrifuge_1", "PAYLOAD-CCC")] {
            m.bind(SymbolEntry::new(k, SymbolKind::Labware, "thing", json!({"secret": secret})), false).unwrap();
        }
        PlannerContext {
            state,
            intent: "spin the plate".into(),
            digest: project(&m),
            history: vec![],
            feedback: None,
            allowed: allowed_actions(state).unwrap(),
            knowledge: vec![],
        }
    }

    #[test]
    fn rectify_prompt_contains_violation_message() {
        let mut c = ctx(FsmState::RectifyCode);
        c.feedback = Some(VerificationReport::new(
            Layer::Physical,
            vec![Violation {
                op_index: 0,
                constraint_path: "params/speed".into(),
                kind: ViolationKind::Range,
                observed: "25000 g".into(),
                limit: "15000 g".into(),
                message: "'speed' = 25000 g exceeds maximum 15000 g".into(),
            }],
            4,
        ));
        let p = render_prompt(&c, &PromptTemplate::default()).unwrap();
        assert!(p.contains("exceeds maximum 15000 g"));
        assert!(p.contains("EmitCode, Clarify"));
    }

    #[test]
    fn empty_sections_still_render() {
        let p = render_prompt(&ctx(FsmState::DesignCode), &PromptTemplate::new("h:[{history}] k:[{knowledge}]")).unwrap();
        assert_eq!(p, "h:[] k:[]");
    }

    #[test]
    fn prompt_lists_keys_but_no_payloads() {
        let p = render_prompt(&ctx(FsmState::DesignCode), &PromptTemplate::default()).unwrap();
        for k in ["plate_1", "trough_1", "centrifuge_1"] {
            assert!(p.contains(k));
        }
        assert!(!p.contains("PAYLOAD-"));
        assert!(!p.contains("secret"));
    }

    #[test]
    fn template_errors() {
        let c = ctx(FsmState::DesignCode);
        assert_eq!(
            render_prompt(&c, &PromptTemplate::new("{payloads}")),
            Err(PromptError::UnknownPlaceholder("payloads".into()))
        );
        assert_eq!(render_prompt(&c, &PromptTemplate::new("ab {state")), Err(PromptError::Unclosed(3)));
        assert_eq!(render_prompt(&c, &PromptTemplate::new("a}b")), Err(PromptError::Unmatched(1)));
        assert_eq!(render_prompt(&c, &PromptTemplate::new("{{x}} {state}")).unwrap(), "{x} DESIGN_CODE");
    }
}
