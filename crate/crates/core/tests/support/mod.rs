//! Independent oracles and random generators shared by the property and
//! acceptance tests.
#![allow(dead_code)]

use dvr_core::grounding::WorkingMemory;
use dvr_core::planner::FaultSpec;
use dvr_core::protocol::{ParamValue, ProtocolCode, ProtocolOp, Scalar};
use dvr_core::registry::{DeviceCategory, DeviceSchema, HardwareRegistry, OperationSpec, ParamKind, ParamSpec};
use rand::seq::IndexedRandom;
use rand::Rng;

/// LCS length by enumerating every subsequence of `a`.
pub fn brute_lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    assert!(a.len() <= 16);
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&T> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if sub.len() <= best {
            continue;
        }
        let mut it = b.iter();
        if sub.iter().all(|x| it.any(|y| y == *x)) {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_oracle(c: &[String], r: &[String]) -> f64 {
    if c.is_empty() && r.is_empty() {
        return 1.0;
    }
    let l = brute_lcs(c, r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
    2.0 * p * rec / (p + rec)
}

fn params_matched(pred: &ProtocolOp, gt: &ProtocolOp) -> usize {
    gt.params
        .iter()
        .filter(|(k, v)| {
            pred.params.get(*k).is_some_and(|p| match (p, *v) {
                (
                    ParamValue::Quantity { value: Scalar::Number(a), unit: ua },
                    ParamValue::Quantity { value: Scalar::Number(b), unit: ub },
                ) => ua == ub && (a - b).abs() <= 1e-6 * a.abs().max(b.abs()),
                (a, b) => a == b,
            })
        })
        .count()
}

/// Best `(pairs, matched params)` over every monotone matching of equal
/// `(device, op)` pairs.
pub fn alignment_oracle(pred: &[ProtocolOp], gt: &[ProtocolOp]) -> (usize, usize) {
    fn go(pred: &[ProtocolOp], gt: &[ProtocolOp], i: usize, j: usize) -> (usize, usize) {
        let mut best = (0, 0);
        for a in i..pred.len() {
            for b in j..gt.len() {
                if pred[a].device_id == gt[b].device_id && pred[a].op_name == gt[b].op_name {
                    let (l, p) = go(pred, gt, a + 1, b + 1);
                    best = best.max((l + 1, p + params_matched(&pred[a], &gt[b])));
                }
            }
        }
        best
    }
    go(pred, gt, 0, 0)
}

/// Violation count of static physical verification, by direct enumeration
/// of every constraint each op is subject to.
pub fn physical_oracle(code: &ProtocolCode, registry: &HardwareRegistry, memory: &WorkingMemory) -> usize {
    let mut count = 0;
    for op in &code.ops {
        let device = registry.devices().iter().find(|d| d.id == op.device_id);
        let spec = device.and_then(|d| d.operations.iter().find(|o| o.name == op.op_name));
        if spec.is_none() {
            count += 1;
        }
        let refs = op
            .params
            .values()
            .filter_map(|v| match v {
                ParamValue::Ref { key, .. } => Some(key.as_str()),
                _ => None,
            })
            .chain(op.targets.iter().map(String::as_str));
        count += refs.filter(|k| !memory.contains(k)).count();
        let Some(spec) = spec else { continue };
        for p in &spec.params {
            let holds = match op.params.get(&p.name) {
                None => !p.required,
                Some(v) => match p.kind {
                    ParamKind::Numeric => match v {
                        ParamValue::Quantity { value: Scalar::Number(n), unit } => {
                            unit == &p.unit && p.max.is_none_or(|m| *n <= m) && p.min.is_none_or(|m| *n >= m)
                        }
                        _ => false,
                    },
                    ParamKind::Enumerated => match v {
                        ParamValue::Quantity { value: Scalar::Text(s), .. } => {
                            p.allowed.as_ref().is_some_and(|a| a.contains(s))
                        }
                        _ => false,
                    },
                    ParamKind::Boolean => matches!(v, ParamValue::Quantity { value: Scalar::Bool(_), .. }),
                    ParamKind::ResourceReference => matches!(v, ParamValue::Ref { .. }),
                },
            };
            if !holds {
                count += 1;
            }
        }
    }
    count
}

const UNITS: &[&str] = &["uL", "g", "s", "C"];
const WORDS: &[&str] = &["low", "medium", "high", "foil", "clear"];
pub const BOUND_KEYS: &[&str] = &["lab_a", "lab_b", "lab_c"];

fn random_param<R: Rng>(rng: &mut R, name: String) -> ParamSpec {
    let mut p = match rng.random_range(0..4) {
        0 => {
            let lo = rng.random_bool(0.7).then(|| rng.random_range(0..50) as f64);
            let hi = rng.random_bool(0.7).then(|| rng.random_range(100..20000) as f64);
            ParamSpec::numeric(&name, UNITS.choose(rng).unwrap(), lo, hi)
        }
        1 => {
            let k = rng.random_range(1..=3);
            let allowed: Vec<&str> = WORDS.choose_multiple(rng, k).copied().collect();
            ParamSpec::enumerated(&name, &allowed)
        }
        2 => ParamSpec::reference(&name),
        _ => ParamSpec::boolean(&name),
    };
    p.required = rng.random_bool(0.6);
    p
}

/// Up to three devices with one or two operations each.
pub fn random_registry<R: Rng>(rng: &mut R) -> HardwareRegistry {
    let devices = (0..rng.random_range(1..=3))
        .map(|d| DeviceSchema {
            id: format!("dev_{d}"),
            category: DeviceCategory::Other,
            operations: (0..rng.random_range(1..=2))
                .map(|o| OperationSpec {
                    name: format!("op_{o}"),
                    params: (0..rng.random_range(0..=4)).map(|i| random_param(rng, format!("p{i}"))).collect(),
                    guards: vec![],
                })
                .collect(),
        })
        .collect();
    HardwareRegistry::new("test", devices)
}

fn random_value<R: Rng>(rng: &mut R, p: &ParamSpec) -> ParamValue {
    let valid = rng.random_bool(0.6);
    match (p.kind, valid) {
        (ParamKind::Numeric, true) => {
            let lo = p.min.unwrap_or(0.0);
            let hi = p.max.unwrap_or(lo + 1000.0);
            ParamValue::number(rng.random_range(lo..=hi), &p.unit)
        }
        (ParamKind::Numeric, false) => match rng.random_range(0..4) {
            0 => ParamValue::number(p.max.unwrap_or(1e6) + rng.random_range(0.5..5000.0), &p.unit),
            1 => ParamValue::number(p.min.unwrap_or(0.0) - rng.random_range(0.5..100.0), &p.unit),
            2 => ParamValue::number(rng.random_range(0.0..100.0), "rpm"),
            _ => ParamValue::text("fast"),
        },
        (ParamKind::Enumerated, true) => ParamValue::text(p.allowed.as_ref().unwrap().choose(rng).unwrap()),
        (ParamKind::Enumerated, false) => {
            if rng.random_bool(0.5) {
                ParamValue::text("bogus")
            } else {
                ParamValue::number(1.0, "")
            }
        }
        (ParamKind::Boolean, true) => ParamValue::flag(rng.random_bool(0.5)),
        (ParamKind::Boolean, false) => ParamValue::text("yes"),
        (ParamKind::ResourceReference, true) => ParamValue::reference(BOUND_KEYS.choose(rng).unwrap()),
        (ParamKind::ResourceReference, false) => {
            if rng.random_bool(0.5) {
                ParamValue::reference("ghost_lab")
            } else {
                ParamValue::number(3.0, "")
            }
        }
    }
}

/// Up to six ops mixing compliant and broken calls.
pub fn random_protocol<R: Rng>(rng: &mut R, registry: &HardwareRegistry) -> ProtocolCode {
    let ops = (0..rng.random_range(0..=6))
        .map(|_| {
            let device = if rng.random_bool(0.85) {
                registry.devices().choose(rng).unwrap().clone()
            } else {
                DeviceSchema { id: "ghost_dev".into(), category: DeviceCategory::Other, operations: vec![] }
            };
            let spec = if rng.random_bool(0.9) { device.operations.choose(rng).cloned() } else { None };
            let name = spec.as_ref().map_or("ghost_op".to_string(), |s| s.name.clone());
            let mut op = ProtocolOp::new(&device.id, &name);
            for p in spec.iter().flat_map(|s| &s.params) {
                if rng.random_bool(0.85) {
                    op.params.insert(p.name.clone(), random_value(rng, p));
                }
            }
            if rng.random_bool(0.1) {
                op.params.insert("extra".into(), ParamValue::number(1.0, ""));
            }
            if rng.random_bool(0.2) {
                let key = if rng.random_bool(0.7) { BOUND_KEYS.choose(rng).unwrap() } else { &"ghost_lab" };
                op.targets.push(key.to_string());
            }
            op
        })
        .collect();
    ProtocolCode::new(ops)
}

/// A fault of the requested kind that applies to `code`, if one exists.
/// Kinds: 0 parameter over range, 1 unknown symbol, 2 order swap.
pub fn random_fault<R: Rng>(
    rng: &mut R,
    kind: usize,
    step: usize,
    code: &ProtocolCode,
    registry: &HardwareRegistry,
) -> Option<FaultSpec> {
    match kind {
        0 => {
            // Faults hit the first op carrying the parameter, so bounds come from that op.
            let mut candidates = Vec::new();
            let mut seen = std::collections::BTreeSet::new();
            for op in &code.ops {
                let Ok(spec) = registry.lookup(&op.device_id, &op.op_name) else { continue };
                for (name, v) in &op.params {
                    if !seen.insert(name.clone()) || v.as_number().is_none() {
                        continue;
                    }
                    if let Some(p) = spec.param(name).filter(|p| p.kind == ParamKind::Numeric) {
                        candidates.push(p.clone());
                    }
                }
            }
            let p = candidates.choose(rng)?;
            let value = match (p.max, p.min) {
                (Some(hi), _) if rng.random_bool(0.7) || p.min.is_none() => hi * rng.random_range(1.01..3.0) + 1.0,
                (_, Some(lo)) => lo - rng.random_range(1.0..100.0),
                _ => return None,
            };
            Some(FaultSpec::ParamOverrange { step, param: p.name.clone(), value: format!("{value}"), unit: p.unit.clone() })
        }
        1 => {
            let refs: Vec<String> =
                code.ops.iter().flat_map(|o| o.symbol_refs().into_iter().map(|(_, k)| k.to_string())).collect();
            let from = refs.choose(rng)?.clone();
            Some(FaultSpec::UnknownSymbol { step, from, to: format!("ghost_{}", rng.random_range(0..1000)) })
        }
        _ => {
            let mut names: Vec<&str> = code.ops.iter().map(|o| o.op_name.as_str()).collect();
            names.sort_unstable();
            names.dedup();
            if names.len() < 2 {
                return None;
            }
            let pair: Vec<&&str> = names.choose_multiple(rng, 2).collect();
            Some(FaultSpec::OrderSwap { step, first: pair[0].to_string(), second: pair[1].to_string() })
        }
    }
}

/// Tokens from a six-word vocabulary, so overlaps are common.
pub fn random_words<R: Rng>(rng: &mut R, max: usize) -> Vec<String> {
    const VOCAB: &[&str] = &["a", "b", "c", "d", "e", "f"];
    (0..rng.random_range(0..=max)).map(|_| VOCAB.choose(rng).unwrap().to_string()).collect()
}

/// Ops drawn from a small pool so that alignments are ambiguous.
pub fn random_ops<R: Rng>(rng: &mut R, max: usize) -> Vec<ProtocolOp> {
    (0..rng.random_range(0..=max))
        .map(|_| {
            let mut op = ProtocolOp::new(["dev_a", "dev_b"].choose(rng).unwrap(), ["x", "y"].choose(rng).unwrap());
            for name in ["p", "q"] {
                if rng.random_bool(0.7) {
                    op.params.insert(name.into(), ParamValue::number(rng.random_range(0..3) as f64, "s"));
                }
            }
            op
        })
        .collect()
}

/// A liquid-handling or plate-handling op over the bundled world's labware,
/// with volumes and wells that are sometimes infeasible.
pub fn random_lab_op<R: Rng>(rng: &mut R) -> ProtocolOp {
    const PLATES: &[&str] = &["plate_1", "plate_2", "pcr_plate_1", "sealed_plate_1", "assay_plate_384"];
    const BULK: &[&str] = &["trough_1", "trough_2", "master_mix_tube", "sample_tube_1", "waste_1"];
    const WELLS: &[&str] = &["A1", "A2", "B1", "B3", "H12", "P24"];
    let loc = |rng: &mut R| {
        if rng.random_bool(0.5) {
            ParamValue::well(PLATES.choose(rng).unwrap(), WELLS.choose(rng).unwrap())
        } else {
            ParamValue::reference(BULK.choose(rng).unwrap())
        }
    };
    match rng.random_range(0..6) {
        0 | 1 => ProtocolOp::new("liquid_handler_1", "transfer")
            .with("source", loc(rng))
            .with("dest", loc(rng))
            .with("volume", ParamValue::number(rng.random_range(0.001..400.0), "uL")),
        2 => ProtocolOp::new("reagent_dispenser_1", "dispense")
            .with("source", loc(rng))
            .with("dest", loc(rng))
            .with("volume", ParamValue::number(rng.random_range(1..5000) as f64, "uL")),
        3 => ProtocolOp::new("plate_sealer_1", "seal_plate").with("target", ParamValue::reference(PLATES.choose(rng).unwrap())),
        4 => ProtocolOp::new("plate_peeler_1", "unseal_plate").with("target", ParamValue::reference(PLATES.choose(rng).unwrap())),
        _ => ProtocolOp::new("centrifuge_1", "centrifuge")
            .with("target", ParamValue::reference(PLATES.choose(rng).unwrap()))
            .with("speed", ParamValue::number(rng.random_range(100..20000) as f64, "g"))
            .with("duration", ParamValue::number(rng.random_range(10..600) as f64, "s")),
    }
}
