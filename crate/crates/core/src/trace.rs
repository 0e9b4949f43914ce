//! Trace events, sinks and the post-run safety audit.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fsm::{FsmState, RunOutcome, SignalVector};
use crate::grounding::WorkingMemory;
use crate::planner::SymbolicAction;
use crate::protocol::{ProtocolCode, ProtocolOp};
use crate::registry::HardwareRegistry;
use crate::simulator::{ExecutedOp, LabWorld};
use crate::verifier::{Layer, PhysicalCheck, VerificationReport, Violation};

/// One line of the trace stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: u32,
    pub state: FsmState,
    pub signal: SignalVector,
    pub action: Option<SymbolicAction>,
    pub verdict: Option<VerificationReport>,
    pub executed: bool,
    /// Set on mask violations and clarification steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// Set on the terminal event only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<RunOutcome>,
}

impl TraceEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }

    /// `(state, action signature)` used by loop detection.
    pub fn signature(&self) -> (FsmState, String) {
        (self.state, self.action.as_ref().map(SymbolicAction::signature).unwrap_or_default())
    }
}

pub trait TraceSink: Send {
    fn emit(&mut self, event: &TraceEvent);
}

impl<F: FnMut(&TraceEvent) + Send> TraceSink for F {
    fn emit(&mut self, event: &TraceEvent) {
        self(event)
    }
}

/// Appends events to a JSON-lines file, flushing after every event.
pub struct JsonlSink {
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self { out: BufWriter::new(File::create(path)?) })
    }
}

impl TraceSink for JsonlSink {
    fn emit(&mut self, event: &TraceEvent) {
        // A failing trace file must not take the run down with it.
        let _ = writeln!(self.out, "{}", event.to_json_line());
        let _ = self.out.flush();
    }
}

pub fn to_jsonl(events: &[TraceEvent]) -> String {
    events.iter().map(|e| e.to_json_line() + "\n").collect()
}

pub fn parse_jsonl(text: &str) -> Result<Vec<TraceEvent>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

/// Human-readable timeline, one line per event.
pub fn timeline(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        let action = e.action.as_ref().map(SymbolicAction::summary).unwrap_or_else(|| "-".into());
        let verdict = match &e.verdict {
            Some(v) if v.passed => format!("{:?} PASS", v.layer),
            Some(v) => format!("{:?} FAIL ({} violations)", v.layer, v.violations.len()),
            None => String::new(),
        };
        let mut line = format!("t={:<3} {:<18} {action}", e.t, e.state.as_str());
        if !verdict.is_empty() {
            line.push_str(&format!(" | {verdict}"));
        }
        if e.signal.interlock {
            line.push_str(" | INTERLOCK");
        }
        if e.executed {
            line.push_str(" | executed");
        }
        if let Some(n) = &e.note {
            line.push_str(&format!(" | {n}"));
        }
        if let Some(o) = &e.outcome {
            line.push_str(&format!(" | outcome {}", o.label()));
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub executed_ops: usize,
    /// Executed ops that break a registry, grounding, guard or order constraint.
    pub violating_ops: usize,
    /// Executed ops not covered by any physically passed code revision.
    pub unverified_ops: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violating_ops == 0 && self.unverified_ops == 0
    }
}

/// Recomputes physical verification over everything the simulator executed,
/// replaying guards from the initial world, and checks every executed op
/// against the code revisions the trace shows as physically passed.
pub fn audit_run(
    trace: &[TraceEvent],
    initial: &LabWorld,
    executed: &[ExecutedOp],
    registry: &HardwareRegistry,
    memory: &WorkingMemory,
    forbidden_orders: &[[String; 2]],
) -> AuditReport {
    let ops: Vec<ProtocolOp> = executed.iter().map(|e| e.op.symbolic()).collect();
    let report = PhysicalCheck::new(registry, memory)
        .with_world(initial)
        .with_forbidden_orders(forbidden_orders)
        .run(&ProtocolCode::new(ops.clone()));
    let violating: BTreeSet<usize> = report.violations.iter().map(|v| v.op_index).collect();

    let passed: Vec<&ProtocolCode> = trace
        .iter()
        .filter(|e| matches!(&e.verdict, Some(v) if v.layer == Layer::Physical && v.passed))
        .filter_map(|e| match &e.action {
            Some(SymbolicAction::EmitCode { code }) => Some(code),
            _ => None,
        })
        .collect();
    let unverified = ops.iter().filter(|op| !passed.iter().any(|c| c.ops.contains(op))).count();

    AuditReport {
        executed_ops: ops.len(),
        violating_ops: violating.len(),
        unverified_ops: unverified,
        violations: report.violations,
    }
}
