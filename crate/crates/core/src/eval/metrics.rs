//! Pure scoring functions over drafts, code and traces.

use serde::{Deserialize, Serialize};

use crate::fsm::FsmState;
use crate::grounding::WorkingMemory;
use crate::protocol::{ParamValue, ParsedCode, ProtocolCode, ProtocolOp, Scalar};
use crate::registry::HardwareRegistry;
use crate::simulator::LabWorld;
use crate::trace::TraceEvent;
use crate::util::normalized_words;
use crate::verifier::{group_covered, PhysicalCheck};

/// Relative tolerance for numeric parameter matches.
pub const PARAM_REL_TOL: f64 = 1e-6;

/// Default repeat threshold for loop detection.
pub const DEFAULT_LOOP_THRESHOLD: usize = 3;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub s_sem: f64,
    pub rouge_l: f64,
    pub c_s: f64,
    pub c_p: f64,
    pub s_code: f64,
    pub acc_seq: f64,
    pub acc_param: f64,
    pub success: bool,
    pub loop_rate_flag: bool,
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub wall_time_s: f64,
}

/// Fraction of keyword groups with at least one member in the draft.
/// No groups scores 1.0.
pub fn score_semantic(draft: &str, keyword_groups: &[Vec<String>]) -> f64 {
    if keyword_groups.is_empty() {
        return 1.0;
    }
    let words = normalized_words(draft);
    let covered = keyword_groups.iter().filter(|g| group_covered(&words, g)).count();
    covered as f64 / keyword_groups.len() as f64
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS-based F1 over normalized tokens. Two empty texts score 1.0.
pub fn score_rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = normalized_words(candidate);
    let r = normalized_words(reference);
    if c.is_empty() && r.is_empty() {
        return 1.0;
    }
    let l = lcs_len(&c, &r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CodeScores {
    pub c_p: f64,
    pub acc_seq: f64,
    pub acc_param: f64,
    pub s_code: f64,
}

fn numbers_match(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= PARAM_REL_TOL * a.abs().max(b.abs())
}

/// Whether a predicted parameter reproduces the ground-truth one.
pub fn param_matches(pred: &ParamValue, gt: &ParamValue) -> bool {
    match (pred, gt) {
        (
            ParamValue::Quantity { value: Scalar::Number(a), unit: ua },
            ParamValue::Quantity { value: Scalar::Number(b), unit: ub },
        ) => ua == ub && numbers_match(*a, *b),
        _ => pred == gt,
    }
}

/// Ground-truth params of `gt` that `pred` reproduces.
pub fn matched_params(pred: &ProtocolOp, gt: &ProtocolOp) -> usize {
    gt.params
        .iter()
        .filter(|(name, v)| pred.params.get(*name).is_some_and(|p| param_matches(p, v)))
        .count()
}

fn same_step(a: &ProtocolOp, b: &ProtocolOp) -> bool {
    a.device_id == b.device_id && a.op_name == b.op_name
}

/// Best alignment of `pred` onto `gt`: longest common subsequence of
/// `(device, op)` pairs, ties broken by the most matched params.
/// Returns `(aligned pairs, matched params)`.
pub fn align_ops(pred: &[ProtocolOp], gt: &[ProtocolOp]) -> (usize, usize) {
    let (n, m) = (pred.len(), gt.len());
    let mut dp = vec![vec![(0usize, 0usize); m + 1]; n + 1];
    for i in 1..=n {
        for j in 1..=m {
            let mut best = dp[i - 1][j].max(dp[i][j - 1]);
            if same_step(&pred[i - 1], &gt[j - 1]) {
                let (l, p) = dp[i - 1][j - 1];
                best = best.max((l + 1, p + matched_params(&pred[i - 1], &gt[j - 1])));
            }
            dp[i][j] = best;
        }
    }
    dp[n][m]
}

/// Ops that take part in no violation of a sequential physical check.
pub fn compliant_ops(
    code: &ProtocolCode,
    registry: &HardwareRegistry,
    memory: &WorkingMemory,
    world: Option<&LabWorld>,
    forbidden_orders: &[[String; 2]],
) -> usize {
    let mut check = PhysicalCheck::new(registry, memory).with_forbidden_orders(forbidden_orders);
    if let Some(w) = world {
        check = check.with_world(w);
    }
    let report = check.run(code);
    (0..code.ops.len()).filter(|i| !report.violations.iter().any(|v| v.op_index == *i)).count()
}

/// Code metrics. A parse failure or empty prediction scores zero everywhere.
pub fn score_code(
    pred: &ParsedCode,
    gt: &ProtocolCode,
    registry: &HardwareRegistry,
    memory: &WorkingMemory,
    world: Option<&LabWorld>,
    forbidden_orders: &[[String; 2]],
) -> CodeScores {
    let code = match pred {
        ParsedCode::Code(c) if !c.is_empty() => c,
        _ => return CodeScores::default(),
    };
    let c_p = compliant_ops(code, registry, memory, world, forbidden_orders) as f64 / code.ops.len() as f64;
    let (aligned, matched) = align_ops(&code.ops, &gt.ops);
    let acc_seq = if gt.is_empty() { 0.0 } else { aligned as f64 / gt.ops.len() as f64 };
    let gt_params: usize = gt.ops.iter().map(|o| o.params.len()).sum();
    let acc_param = if gt_params == 0 { acc_seq } else { matched as f64 / gt_params as f64 };
    CodeScores { c_p, acc_seq, acc_param, s_code: (c_p + acc_seq + acc_param) / 3.0 }
}

/// Flags retry loops: within the events of any one state, the same action
/// signature `threshold` times in a row; or a timed-out run whose final
/// `threshold` events are identical by state and signature.
pub fn detect_loop(trace: &[TraceEvent], threshold: usize, timed_out: bool) -> bool {
    assert!(threshold >= 2, "loop threshold must be at least 2");
    let steps: Vec<_> = trace.iter().filter(|e| !e.state.is_terminal()).map(TraceEvent::signature).collect();
    for state in FsmState::ALL {
        let mut run = 0;
        let mut prev: Option<&str> = None;
        for (s, sig) in steps.iter().filter(|(s, sig)| *s == state && !sig.is_empty()) {
            debug_assert_eq!(*s, state);
            run = if prev == Some(sig.as_str()) { run + 1 } else { 1 };
            prev = Some(sig);
            if run >= threshold {
                return true;
            }
        }
    }
    timed_out && steps.len() >= threshold && steps[steps.len() - threshold..].windows(2).all(|w| w[0] == w[1])
}
