//! Two verification layers: the physical rule engine over the hardware
//! registry and the scientific judge over protocol drafts.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::fsm::{SignalVector, Verdict};

pub mod physical;
pub mod scientific;

pub use physical::{verify_physical, PhysicalCheck};
pub use scientific::{group_covered, verify_scientific, JudgeError, JudgeInput, Rubric, RubricJudge, ScientificJudge};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Range,
    Enum,
    MissingParam,
    UnknownDevice,
    UnknownOperation,
    Grounding,
    Guard,
    Order,
    /// A scientific rubric check the draft did not satisfy.
    Critique,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub op_index: usize,
    pub constraint_path: String,
    pub kind: ViolationKind,
    pub observed: String,
    pub limit: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "op {} [{}]: {}", self.op_index, self.constraint_path, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Scientific,
    Physical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub layer: Layer,
    pub passed: bool,
    pub violations: Vec<Violation>,
    pub checked_constraints: usize,
}

impl VerificationReport {
    pub fn new(layer: Layer, violations: Vec<Violation>, checked_constraints: usize) -> Self {
        Self { layer, passed: violations.is_empty(), violations, checked_constraints }
    }

    /// Fraction of checks that held.
    pub fn compliance(&self) -> f64 {
        if self.checked_constraints == 0 {
            return if self.passed { 1.0 } else { 0.0 };
        }
        let failed = self.violations.len().min(self.checked_constraints);
        (self.checked_constraints - failed) as f64 / self.checked_constraints as f64
    }

    /// Violation messages, one per line, as fed back to the planner.
    pub fn feedback_text(&self) -> String {
        self.violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")
    }
}

/// Folds a verification outcome into the signal vector. A physical failure
/// raises the interlock; a physical pass clears it.
pub fn signals_from(report: &VerificationReport, signal: &SignalVector) -> SignalVector {
    let mut next = *signal;
    let verdict = if report.passed { Verdict::Pass } else { Verdict::Fail };
    match report.layer {
        Layer::Scientific => next.sci = verdict,
        Layer::Physical => {
            next.phys = verdict;
            next.interlock = !report.passed;
        }
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;

    fn violation() -> Violation {
        Violation {
            op_index: 0,
            constraint_path: "params/speed".into(),
            kind: ViolationKind::Range,
            observed: "25000 g".into(),
            limit: "15000 g".into(),
            message: "speed exceeds maximum".into(),
        }
    }

    #[test]
    fn physical_failure_raises_interlock() {
        let s = SignalVector { code: true, ..SignalVector::default() };
        let r = VerificationReport::new(Layer::Physical, vec![violation()], 3);
        let n = signals_from(&r, &s);
        assert_eq!(n.phys, Verdict::Fail);
        assert!(n.interlock);
        assert_eq!(n.sci, s.sci);
    }

    #[test]
    fn scientific_pass_leaves_interlock() {
        let s = SignalVector { draft: true, interlock: false, ..SignalVector::default() };
        let n = signals_from(&VerificationReport::new(Layer::Scientific, vec![], 2), &s);
        assert_eq!(n.sci, Verdict::Pass);
        assert!(!n.interlock);
    }

    #[test]
    fn physical_pass_clears_interlock() {
        let s = SignalVector { code: true, phys: Verdict::Fail, interlock: true, ..SignalVector::default() };
        let n = signals_from(&VerificationReport::new(Layer::Physical, vec![], 2), &s);
        assert_eq!(n.phys, Verdict::Pass);
        assert!(!n.interlock);
    }

    #[test]
    fn violation_serializes_with_snake_case_kind() {
        let v = serde_json::to_value(violation()).unwrap();
        assert_eq!(v["kind"], "range");
        let m = serde_json::to_value(ViolationKind::MissingParam).unwrap();
        assert_eq!(m, "missing_param");
    }
}
