//! Deterministic rule engine: every operation against every applicable
//! registry constraint, without short-circuiting.

use crate::grounding::{resolve, WorkingMemory};
use crate::protocol::{ParamValue, ProtocolCode, ProtocolOp, Scalar};
use crate::registry::{fmt_num, HardwareRegistry, LookupError, OperationSpec, ParamKind, ParamSpec};
use crate::simulator::LabWorld;

use super::{Layer, VerificationReport, Violation, ViolationKind};

/// Configurable physical verification. Guards need a world to preview
/// against; order rules come from the task rubric as `[earlier, later]`
/// operation-name pairs that must not occur in that order.
#[derive(Clone, Copy)]
pub struct PhysicalCheck<'a> {
    registry: &'a HardwareRegistry,
    memory: &'a WorkingMemory,
    world: Option<&'a LabWorld>,
    forbidden_orders: &'a [[String; 2]],
    prior_ops: &'a [String],
}

/// Static checks only: registry constraints and symbol grounding.
pub fn verify_physical(code: &ProtocolCode, registry: &HardwareRegistry, memory: &WorkingMemory) -> VerificationReport {
    PhysicalCheck::new(registry, memory).run(code)
}

impl<'a> PhysicalCheck<'a> {
    pub fn new(registry: &'a HardwareRegistry, memory: &'a WorkingMemory) -> Self {
        Self { registry, memory, world: None, forbidden_orders: &[], prior_ops: &[] }
    }

    pub fn with_world(mut self, world: &'a LabWorld) -> Self {
        self.world = Some(world);
        self
    }

    pub fn with_forbidden_orders(mut self, rules: &'a [[String; 2]]) -> Self {
        self.forbidden_orders = rules;
        self
    }

    /// Names of operations already executed before this code, in order.
    /// Order rules treat them as preceding every op of the code.
    pub fn with_prior_ops(mut self, names: &'a [String]) -> Self {
        self.prior_ops = names;
        self
    }

    pub fn run(&self, code: &ProtocolCode) -> VerificationReport {
        let mut violations = Vec::new();
        let mut checked = 0;
        let mut sim = self.world.cloned();

        for (i, op) in code.ops.iter().enumerate() {
            checked += 1;
            let spec = match self.registry.lookup(&op.device_id, &op.op_name) {
                Ok(spec) => Some(spec),
                Err(e) => {
                    violations.push(lookup_violation(i, &e));
                    None
                }
            };

            for (path, key) in op.symbol_refs() {
                checked += 1;
                if !self.memory.contains(key) {
                    violations.push(Violation {
                        op_index: i,
                        constraint_path: path,
                        kind: ViolationKind::Grounding,
                        observed: key.to_string(),
                        limit: "bound symbol".into(),
                        message: format!("unknown symbol '{key}'"),
                    });
                }
            }

            let Some(spec) = spec else { continue };
            for p in &spec.params {
                checked += 1;
                if let Some(v) = check_param(i, op, p) {
                    violations.push(v);
                }
            }

            if let Some(world) = sim.as_mut() {
                checked += spec.guards.len();
                violations.extend(self.check_guards(i, op, spec, world));
            }
        }

        for (r, [earlier, later]) in self.forbidden_orders.iter().enumerate() {
            for (j, op) in code.ops.iter().enumerate().filter(|(_, op)| &op.op_name == later) {
                checked += 1;
                if self.prior_ops.contains(earlier) || code.ops[..j].iter().any(|o| &o.op_name == earlier) {
                    violations.push(Violation {
                        op_index: j,
                        constraint_path: format!("rubric/forbidden_orders/{r}"),
                        kind: ViolationKind::Order,
                        observed: format!("{earlier} before {}", op.op_name),
                        limit: format!("{later} before {earlier}"),
                        message: format!("{} must not follow {earlier}", op.op_name),
                    });
                }
            }
        }

        VerificationReport::new(Layer::Physical, violations, checked)
    }

    /// Previews `op` on the running world copy and advances it when feasible.
    fn check_guards(&self, i: usize, op: &ProtocolOp, spec: &OperationSpec, world: &mut LabWorld) -> Vec<Violation> {
        let Ok(grounded) = resolve(op, self.memory) else { return Vec::new() };
        let failures = world.check(&grounded);
        if failures.is_empty() {
            // Feasible by construction, so apply cannot fail here.
            let _ = world.apply(&grounded);
            return Vec::new();
        }
        failures
            .iter()
            .filter(|f| f.kind.predicate().is_some_and(|p| spec.has_guard(&p)))
            .map(|f| {
                let mut v = f.to_violation(i);
                let guard = spec.guards.iter().find(|g| Some(&g.predicate) == f.kind.predicate().as_ref());
                if let Some(g) = guard {
                    v.message = format!("{}: {}", g.message, f.message);
                }
                v
            })
            .collect()
    }
}

fn lookup_violation(i: usize, e: &LookupError) -> Violation {
    match e {
        LookupError::UnknownDevice(dev) => Violation {
            op_index: i,
            constraint_path: format!("devices/{dev}"),
            kind: ViolationKind::UnknownDevice,
            observed: dev.clone(),
            limit: "registered device".into(),
            message: format!("device '{dev}' is not in the registry"),
        },
        LookupError::UnknownOperation { device, operation } => Violation {
            op_index: i,
            constraint_path: format!("devices/{device}/operations/{operation}"),
            kind: ViolationKind::UnknownOperation,
            observed: operation.clone(),
            limit: "registered operation".into(),
            message: format!("device '{device}' has no operation '{operation}'"),
        },
    }
}

fn with_unit(value: f64, unit: &str) -> String {
    if unit.is_empty() {
        fmt_num(value)
    } else {
        format!("{} {unit}", fmt_num(value))
    }
}

fn check_param(i: usize, op: &ProtocolOp, p: &ParamSpec) -> Option<Violation> {
    let path = format!("devices/{}/operations/{}/params/{}", op.device_id, op.op_name, p.name);
    let make = |kind, observed: String, limit: String, message: String| {
        Some(Violation { op_index: i, constraint_path: path.clone(), kind, observed, limit, message })
    };
    let Some(value) = op.params.get(&p.name) else {
        return if p.required {
            make(ViolationKind::MissingParam, "absent".into(), "required".into(), format!("missing required parameter '{}'", p.name))
        } else {
            None
        };
    };
    match p.kind {
        ParamKind::Numeric => {
            let (n, unit) = match value {
                ParamValue::Quantity { value: Scalar::Number(n), unit } => (*n, unit.as_str()),
                other => {
                    return make(
                        ViolationKind::Range,
                        other.to_string(),
                        p.describe_bounds(),
                        format!("'{}' must be a number, type mismatch", p.name),
                    )
                }
            };
            if unit != p.unit {
                return make(
                    ViolationKind::Range,
                    value.to_string(),
                    p.describe_bounds(),
                    format!("'{}' unit mismatch: expected '{}', got '{unit}'", p.name, p.unit),
                );
            }
            if let Some(max) = p.max.filter(|m| n.is_nan() || n > *m) {
                return make(
                    ViolationKind::Range,
                    with_unit(n, unit),
                    with_unit(max, &p.unit),
                    format!("'{}' = {} exceeds maximum {}", p.name, with_unit(n, unit), with_unit(max, &p.unit)),
                );
            }
            if let Some(min) = p.min.filter(|m| n.is_nan() || n < *m) {
                return make(
                    ViolationKind::Range,
                    with_unit(n, unit),
                    with_unit(min, &p.unit),
                    format!("'{}' = {} is below minimum {}", p.name, with_unit(n, unit), with_unit(min, &p.unit)),
                );
            }
            None
        }
        ParamKind::Enumerated => {
            let allowed = p.allowed.as_deref().unwrap_or_default();
            let ok = matches!(value, ParamValue::Quantity { value: Scalar::Text(s), .. } if allowed.contains(s));
            if ok {
                None
            } else {
                make(
                    ViolationKind::Enum,
                    value.to_string(),
                    allowed.join("|"),
                    format!("'{}' = {value} is not one of {}", p.name, allowed.join(", ")),
                )
            }
        }
        ParamKind::Boolean => {
            if matches!(value, ParamValue::Quantity { value: Scalar::Bool(_), .. }) {
                None
            } else {
                make(ViolationKind::Enum, value.to_string(), "true|false".into(), format!("'{}' must be a boolean", p.name))
            }
        }
        ParamKind::ResourceReference => {
            if value.ref_key().is_some() {
                None
            } else {
                make(
                    ViolationKind::Grounding,
                    value.to_string(),
                    "symbol reference".into(),
                    format!("'{}' must reference a bound symbol", p.name),
                )
            }
        }
    }
}
