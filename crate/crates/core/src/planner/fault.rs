//! Fault injection over planner scripts and live planners.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{ParamValue, ProtocolCode};

use super::{Planner, PlannerContext, PlannerError, PlannerScript, ScriptStep, SymbolicAction};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FaultSpec {
    /// Sets `param` of the first op that has it to `value unit`.
    ParamOverrange { step: usize, param: String, value: String, unit: String },
    /// Replaces every reference to symbol `from` with `to`.
    UnknownSymbol { step: usize, from: String, to: String },
    /// Swaps the first `first` op with the first `second` op.
    OrderSwap { step: usize, first: String, second: String },
}

impl FaultSpec {
    pub fn step(&self) -> usize {
        match self {
            FaultSpec::ParamOverrange { step, .. }
            | FaultSpec::UnknownSymbol { step, .. }
            | FaultSpec::OrderSwap { step, .. } => *step,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            FaultSpec::ParamOverrange { .. } => "param_overrange",
            FaultSpec::UnknownSymbol { .. } => "unknown_symbol",
            FaultSpec::OrderSwap { .. } => "order_swap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FaultError {
    #[error("fault step {step} is outside a script of {len} steps")]
    StepOutOfRange { step: usize, len: usize },
    #[error("fault cannot apply: {0}")]
    NotApplicable(String),
}

fn perturb_code(code: &mut ProtocolCode, fault: &FaultSpec) -> Result<(), FaultError> {
    match fault {
        FaultSpec::ParamOverrange { param, value, unit, .. } => {
            let n: f64 = value
                .trim()
                .parse()
                .map_err(|_| FaultError::NotApplicable(format!("'{value}' is not a number")))?;
            let op = code
                .ops
                .iter_mut()
                .find(|op| op.params.contains_key(param))
                .ok_or_else(|| FaultError::NotApplicable(format!("no op has parameter '{param}'")))?;
            op.params.insert(param.clone(), ParamValue::number(n, unit));
            Ok(())
        }
        FaultSpec::UnknownSymbol { from, to, .. } => {
            let mut replaced = 0;
            for op in &mut code.ops {
                for v in op.params.values_mut() {
                    if let ParamValue::Ref { key, .. } = v {
                        if key == from {
                            *key = to.clone();
                            replaced += 1;
                        }
                    }
                }
                for t in &mut op.targets {
                    if t == from {
                        *t = to.clone();
                        replaced += 1;
                    }
                }
            }
            if replaced == 0 {
                return Err(FaultError::NotApplicable(format!("no reference to '{from}'")));
            }
            Ok(())
        }
        FaultSpec::OrderSwap { first, second, .. } => {
            let find = |name: &str| code.ops.iter().position(|op| op.op_name == name);
            match (find(first), find(second)) {
                (Some(i), Some(j)) if i != j => {
                    code.ops.swap(i, j);
                    Ok(())
                }
                _ => Err(FaultError::NotApplicable(format!("need both '{first}' and '{second}' ops"))),
            }
        }
    }
}

/// Applies `fault` to one action. Only code actions can be perturbed.
pub fn apply_fault(action: &SymbolicAction, fault: &FaultSpec) -> Result<SymbolicAction, FaultError> {
    match action {
        SymbolicAction::EmitCode { code } => {
            let mut code = code.clone();
            perturb_code(&mut code, fault)?;
            Ok(SymbolicAction::EmitCode { code })
        }
        other => Err(FaultError::NotApplicable(format!("step emits {}, not code", other.kind()))),
    }
}

/// Returns a copy of `script` with exactly one step perturbed.
pub fn inject_fault(script: &PlannerScript, fault: &FaultSpec) -> Result<PlannerScript, FaultError> {
    let step = fault.step();
    let target = script
        .steps
        .get(step)
        .ok_or(FaultError::StepOutOfRange { step, len: script.len() })?;
    let mut out = script.clone();
    out.steps[step] = ScriptStep { expect_feedback: target.expect_feedback, action: apply_fault(&target.action, fault)? };
    Ok(out)
}

/// Injects every fault and follows each faulty step with the original
/// action, guarded on verifier feedback, so the planner corrects itself in
/// one round.
pub fn rectifying_script(script: &PlannerScript, faults: &[FaultSpec]) -> Result<PlannerScript, FaultError> {
    let mut faulty = script.clone();
    for f in faults {
        faulty = inject_fault(&faulty, f)?;
    }
    let mut steps = Vec::with_capacity(script.len() + faults.len());
    for (i, original) in script.steps.iter().enumerate() {
        steps.push(faulty.steps[i].clone());
        if faults.iter().any(|f| f.step() == i) {
            steps.push(ScriptStep::on_feedback(original.action.clone()));
        }
    }
    Ok(PlannerScript::new(steps))
}

/// Wraps a planner and perturbs its output on the configured call indices.
pub struct FaultInjectingPlanner<P> {
    inner: P,
    faults: Vec<FaultSpec>,
    calls: usize,
}

impl<P: Planner> FaultInjectingPlanner<P> {
    pub fn new(inner: P, faults: Vec<FaultSpec>) -> Self {
        Self { inner, faults, calls: 0 }
    }
}

impl<P: Planner> Planner for FaultInjectingPlanner<P> {
    fn propose(&mut self, ctx: &PlannerContext) -> Result<SymbolicAction, PlannerError> {
        let call = self.calls;
        self.calls += 1;
        let mut action = self.inner.propose(ctx)?;
        for f in self.faults.iter().filter(|f| f.step() == call) {
            // A fault that does not fit this action leaves it untouched.
            if let Ok(perturbed) = apply_fault(&action, f) {
                action = perturbed;
            }
        }
        Ok(action)
    }
}
