//! Virtual lab world.
//!
//! Liquid volumes are stored as integer picoliters so transfers conserve the
//! total exactly. Simulated time only advances by declared durations.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::GroundedAction;
use crate::registry::{fmt_num, GuardPredicate};
use crate::util::sha256_hex;
use crate::verifier::{Violation, ViolationKind};

pub const PICOLITERS_PER_UL: f64 = 1_000_000.0;

/// Well used when a plate is referenced without an explicit address.
pub const DEFAULT_WELL: &str = "A1";
/// Single compartment of troughs and tubes.
pub const BULK_WELL: &str = "main";

pub fn ul_to_pl(ul: f64) -> u64 {
    (ul * PICOLITERS_PER_UL).round() as u64
}

pub fn pl_to_ul(pl: u64) -> f64 {
    pl as f64 / PICOLITERS_PER_UL
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabwareKind {
    Plate,
    Trough,
    Tube,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labware {
    pub kind: LabwareKind,
    /// Well count for plates; 1 otherwise.
    pub format: u32,
    pub sealed: bool,
    /// Picoliters per well. Plates list only wells that were ever filled.
    pub wells: BTreeMap<String, u64>,
}

impl Labware {
    pub fn total_pl(&self) -> u64 {
        self.wells.values().sum()
    }

    fn address(&self, well: Option<&str>) -> Option<String> {
        match self.kind {
            LabwareKind::Plate => {
                let w = well.unwrap_or(DEFAULT_WELL);
                valid_well(self.format, w).then(|| w.to_string())
            }
            LabwareKind::Trough | LabwareKind::Tube => match well {
                None => Some(BULK_WELL.to_string()),
                Some(w) if w == BULK_WELL => Some(BULK_WELL.to_string()),
                Some(_) => None,
            },
        }
    }
}

fn plate_dims(format: u32) -> Option<(u8, u32)> {
    match format {
        6 => Some((2, 3)),
        12 => Some((3, 4)),
        24 => Some((4, 6)),
        48 => Some((6, 8)),
        96 => Some((8, 12)),
        384 => Some((16, 24)),
        _ => None,
    }
}

/// Whether `name` (e.g. `B7`) addresses a well of a plate with `format` wells.
pub fn valid_well(format: u32, name: &str) -> bool {
    let Some((rows, cols)) = plate_dims(format) else { return false };
    let mut chars = name.chars();
    let Some(row) = chars.next() else { return false };
    let rest = chars.as_str();
    let row_ok = row.is_ascii_uppercase() && (row as u8 - b'A') < rows;
    let col_ok = !rest.starts_with('0') && rest.parse::<u32>().is_ok_and(|c| (1..=cols).contains(&c));
    row_ok && col_ok
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    pub busy: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature_c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotor_speed_g: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureKind {
    SealedTarget,
    InsufficientVolume,
    UnknownLabware,
    DeviceBusy,
    /// A parameter the simulator needs is missing, negative or not finite.
    InvalidParameter,
}

impl FailureKind {
    pub fn predicate(self) -> Option<GuardPredicate> {
        match self {
            FailureKind::SealedTarget => Some(GuardPredicate::TargetUnsealed),
            FailureKind::InsufficientVolume => Some(GuardPredicate::VolumeAvailable),
            FailureKind::UnknownLabware => Some(GuardPredicate::TargetExists),
            FailureKind::DeviceBusy => Some(GuardPredicate::DeviceIdle),
            FailureKind::InvalidParameter => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{kind:?}: {message}")]
pub struct RuntimeFailure {
    pub kind: FailureKind,
    /// Labware key, device id or parameter name the failure is about.
    pub subject: String,
    pub message: String,
}

impl RuntimeFailure {
    fn new(kind: FailureKind, subject: &str, message: String) -> Self {
        Self { kind, subject: subject.to_string(), message }
    }

    pub fn to_violation(&self, op_index: usize) -> Violation {
        let (path, limit, kind) = match self.kind.predicate() {
            Some(p) => (format!("guards/{}", p.as_str()), p.as_str().to_string(), ViolationKind::Guard),
            None => (format!("params/{}", self.subject), "finite non-negative".to_string(), ViolationKind::Range),
        };
        Violation {
            op_index,
            constraint_path: path,
            kind,
            observed: self.subject.clone(),
            limit,
            message: self.message.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeChange {
    pub labware: String,
    pub well: String,
    pub before_pl: u64,
    pub after_pl: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorldDelta {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub volumes: Vec<VolumeChange>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sealed: BTreeMap<String, bool>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub devices: BTreeMap<String, DeviceState>,
    pub clock_advance_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutedOp {
    pub seq: u64,
    pub op: GroundedAction,
    pub world_delta: WorldDelta,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub op: GroundedAction,
    pub failure: RuntimeFailure,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub seq: u64,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("cannot read world fixture: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed world fixture: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid world fixture: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabwareFixture {
    pub key: String,
    pub kind: LabwareKind,
    #[serde(default)]
    pub format: Option<u32>,
    #[serde(default)]
    pub sealed: bool,
    /// Per-well microliters (plates).
    #[serde(default)]
    pub wells: BTreeMap<String, f64>,
    /// Bulk microliters (troughs, tubes).
    #[serde(default)]
    pub volume_ul: Option<f64>,
    #[serde(default)]
    pub brief: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceFixture {
    pub id: String,
    #[serde(default)]
    pub busy: bool,
    #[serde(default)]
    pub temperature_c: Option<f64>,
}

/// World fixture file: labware inventory with initial volumes and device states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFixture {
    pub labware: Vec<LabwareFixture>,
    #[serde(default)]
    pub devices: Vec<DeviceFixture>,
}

impl WorldFixture {
    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn bundled() -> Self {
        serde_json::from_str(include_str!("../data/world.json")).expect("bundled world parses")
    }

    pub fn build(&self) -> Result<LabWorld, FixtureError> {
        let mut world = LabWorld::default();
        for lw in &self.labware {
            if world.labware.contains_key(&lw.key) {
                return Err(FixtureError::Invalid(format!("duplicate labware '{}'", lw.key)));
            }
            let check = |ul: f64, what: &str| {
                if ul.is_finite() && ul >= 0.0 {
                    Ok(ul_to_pl(ul))
                } else {
                    Err(FixtureError::Invalid(format!("{what}: volume must be finite and non-negative")))
                }
            };
            let (format, wells) = match lw.kind {
                LabwareKind::Plate => {
                    let format = lw.format.unwrap_or(96);
                    if plate_dims(format).is_none() {
                        return Err(FixtureError::Invalid(format!("{}: unsupported plate format {format}", lw.key)));
                    }
                    let mut wells = BTreeMap::new();
                    for (name, ul) in &lw.wells {
                        if !valid_well(format, name) {
                            return Err(FixtureError::Invalid(format!("{}: no well {name}", lw.key)));
                        }
                        wells.insert(name.clone(), check(*ul, &lw.key)?);
                    }
                    (format, wells)
                }
                LabwareKind::Trough | LabwareKind::Tube => {
                    let pl = check(lw.volume_ul.unwrap_or(0.0), &lw.key)?;
                    (1, BTreeMap::from([(BULK_WELL.to_string(), pl)]))
                }
            };
            world.labware.insert(lw.key.clone(), Labware { kind: lw.kind, format, sealed: lw.sealed, wells });
        }
        for d in &self.devices {
            world
                .devices
                .insert(d.id.clone(), DeviceState { busy: d.busy, temperature_c: d.temperature_c, rotor_speed_g: None });
        }
        Ok(world)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabWorld {
    pub labware: BTreeMap<String, Labware>,
    pub devices: BTreeMap<String, DeviceState>,
    pub clock_s: f64,
    event_log: Vec<ExecutedOp>,
    #[serde(default)]
    failures: Vec<FailureEvent>,
}

/// Canonical serialized world state with its content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub state: String,
    pub hash: String,
}

#[derive(Serialize)]
struct CanonicalState<'a> {
    clock_s: f64,
    devices: &'a BTreeMap<String, DeviceState>,
    executed_ops: usize,
    labware: &'a BTreeMap<String, Labware>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("event {index} has sequence number {got}, expected {expected}")]
    Sequence { index: usize, expected: u64, got: u64 },
    #[error("event {index} failed on replay: {failure}")]
    Failed { index: usize, failure: RuntimeFailure },
}

const LIQUID_OPS: &[&str] = &["transfer", "dispense", "mix", "wash", "pick_colonies"];
const VOLUME_OPS: &[&str] = &["transfer", "dispense"];

enum Effect {
    Move { src: (String, String), dst: (String, String), pl: u64 },
    Seal(String, bool),
    None,
}

struct Plan {
    effect: Effect,
    device: DeviceState,
    advance_s: f64,
    message: String,
}

impl LabWorld {
    pub fn event_log(&self) -> &[ExecutedOp] {
        &self.event_log
    }

    pub fn failures(&self) -> &[FailureEvent] {
        &self.failures
    }

    pub fn total_volume_pl(&self) -> u64 {
        self.labware.values().map(Labware::total_pl).sum()
    }

    pub fn volume_pl(&self, key: &str, well: Option<&str>) -> Option<u64> {
        let lw = self.labware.get(key)?;
        let addr = lw.address(well)?;
        Some(lw.wells.get(&addr).copied().unwrap_or(0))
    }

    /// Every runtime failure `apply` would raise for `action`, without
    /// touching the world.
    pub fn check(&self, action: &GroundedAction) -> Vec<RuntimeFailure> {
        match self.plan(action) {
            Ok(_) => Vec::new(),
            Err(failures) => failures,
        }
    }

    /// Guard violations `apply` would raise, as verification violations.
    pub fn preview(&self, action: &GroundedAction) -> Vec<Violation> {
        self.check(action).iter().map(|f| f.to_violation(0)).collect()
    }

    fn plan(&self, action: &GroundedAction) -> Result<Plan, Vec<RuntimeFailure>> {
        let mut failures = Vec::new();
        let op = action.op_name.as_str();
        let device = self.devices.get(&action.device_id).cloned().unwrap_or_default();
        if device.busy {
            failures.push(RuntimeFailure::new(
                FailureKind::DeviceBusy,
                &action.device_id,
                format!("device {} is busy", action.device_id),
            ));
        }

        // Every referenced labware must exist and be addressable.
        let mut refs: Vec<(&str, Option<&str>)> = action
            .params
            .keys()
            .filter_map(|name| action.reference(name))
            .collect();
        refs.extend(action.targets.iter().map(|t| (t.key.as_str(), None)));
        let mut addressed = BTreeMap::new();
        for (key, well) in &refs {
            match self.labware.get(*key) {
                None => failures.push(RuntimeFailure::new(
                    FailureKind::UnknownLabware,
                    key,
                    format!("labware {key} does not exist"),
                )),
                Some(lw) => match lw.address(*well) {
                    None => failures.push(RuntimeFailure::new(
                        FailureKind::UnknownLabware,
                        key,
                        format!("labware {key} has no well {}", well.unwrap_or("")),
                    )),
                    Some(addr) => {
                        addressed.insert(key.to_string(), addr);
                        if lw.sealed && LIQUID_OPS.contains(&op) {
                            failures.push(RuntimeFailure::new(
                                FailureKind::SealedTarget,
                                key,
                                format!("labware {key} is sealed"),
                            ));
                        }
                    }
                },
            }
        }

        let mut next_device = device.clone();
        let mut advance_s = 0.0;
        let mut effect = Effect::None;
        let number = |name: &str, required: bool, failures: &mut Vec<RuntimeFailure>| -> Option<f64> {
            match action.number(name) {
                Some(v) if v.is_finite() && v >= -273.15 => Some(v),
                None if !required => None,
                _ => {
                    failures.push(RuntimeFailure::new(
                        FailureKind::InvalidParameter,
                        name,
                        format!("{op} needs a finite numeric '{name}'"),
                    ));
                    None
                }
            }
        };

        match op {
            _ if VOLUME_OPS.contains(&op) => {
                let volume = number("volume", true, &mut failures);
                let src = action.reference("source");
                let dst = action.reference("dest");
                if src.is_none() || dst.is_none() {
                    failures.push(RuntimeFailure::new(
                        FailureKind::InvalidParameter,
                        "source",
                        format!("{op} needs source and dest references"),
                    ));
                }
                if let (Some(ul), Some((sk, _)), Some((dk, _))) = (volume, src, dst) {
                    if ul <= 0.0 {
                        failures.push(RuntimeFailure::new(
                            FailureKind::InvalidParameter,
                            "volume",
                            format!("{op} volume must be positive, got {}", fmt_num(ul)),
                        ));
                    } else if let (Some(sw), Some(dw)) = (addressed.get(sk), addressed.get(dk)) {
                        let pl = ul_to_pl(ul);
                        let available = self.labware[sk].wells.get(sw).copied().unwrap_or(0);
                        if available < pl {
                            failures.push(RuntimeFailure::new(
                                FailureKind::InsufficientVolume,
                                sk,
                                format!(
                                    "{sk}:{sw} holds {} uL, {} uL requested",
                                    fmt_num(pl_to_ul(available)),
                                    fmt_num(ul)
                                ),
                            ));
                        }
                        effect = Effect::Move { src: (sk.to_string(), sw.clone()), dst: (dk.to_string(), dw.clone()), pl };
                    }
                }
            }
            "seal_plate" | "unseal_plate" => {
                if let Some((key, _)) = action.reference("target") {
                    effect = Effect::Seal(key.to_string(), op == "seal_plate");
                }
                advance_s = number("duration", false, &mut failures).unwrap_or(0.0);
            }
            "centrifuge" => {
                next_device.rotor_speed_g = number("speed", true, &mut failures);
                advance_s = number("duration", true, &mut failures).unwrap_or(0.0);
                if let Some(t) = number("temperature", false, &mut failures) {
                    next_device.temperature_c = Some(t);
                }
            }
            "thermocycle" => {
                let cycles = number("cycles", true, &mut failures).unwrap_or(0.0);
                let per_cycle: f64 = ["denature_time", "anneal_time", "extend_time"]
                    .iter()
                    .map(|p| number(p, true, &mut failures).unwrap_or(0.0))
                    .sum();
                advance_s = cycles * per_cycle;
                next_device.temperature_c = Some(number("hold_temp", false, &mut failures).unwrap_or(4.0));
            }
            "incubate" | "set_temperature" | "store" => {
                next_device.temperature_c = number("temperature", true, &mut failures);
                advance_s = number("duration", false, &mut failures).unwrap_or(0.0);
            }
            _ => {
                advance_s = number("duration", false, &mut failures).unwrap_or(0.0);
            }
        }
        if advance_s < 0.0 {
            failures.push(RuntimeFailure::new(
                FailureKind::InvalidParameter,
                "duration",
                format!("{op} duration must not be negative"),
            ));
        }

        if failures.is_empty() {
            Ok(Plan { effect, device: next_device, advance_s, message: format!("{}.{} done", action.device_id, op) })
        } else {
            Err(failures)
        }
    }

    /// Executes `action`. On failure the world is unchanged apart from a
    /// recorded failure event.
    pub fn apply(&mut self, action: &GroundedAction) -> Result<Observation, RuntimeFailure> {
        let plan = match self.plan(action) {
            Ok(plan) => plan,
            Err(mut failures) => {
                let failure = failures.swap_remove(0);
                self.failures.push(FailureEvent { op: action.clone(), failure: failure.clone(), timestamp: self.clock_s });
                return Err(failure);
            }
        };
        let mut delta = WorldDelta { clock_advance_s: plan.advance_s, ..WorldDelta::default() };
        match plan.effect {
            Effect::Move { src, dst, pl } => {
                let mut change = |(key, well): &(String, String), add: bool| {
                    let slot = self.labware.get_mut(key).expect("planned labware exists").wells.entry(well.clone()).or_insert(0);
                    let before = *slot;
                    *slot = if add { before + pl } else { before - pl };
                    delta.volumes.push(VolumeChange { labware: key.clone(), well: well.clone(), before_pl: before, after_pl: *slot });
                };
                change(&src, false);
                change(&dst, true);
            }
            Effect::Seal(key, sealed) => {
                if let Some(lw) = self.labware.get_mut(&key) {
                    lw.sealed = sealed;
                    delta.sealed.insert(key, sealed);
                }
            }
            Effect::None => {}
        }
        let before = self.devices.get(&action.device_id).cloned().unwrap_or_default();
        if before != plan.device {
            delta.devices.insert(action.device_id.clone(), plan.device.clone());
            self.devices.insert(action.device_id.clone(), plan.device);
        }
        self.clock_s += plan.advance_s;
        let seq = self.event_log.len() as u64;
        self.event_log.push(ExecutedOp { seq, op: action.clone(), world_delta: delta, timestamp: self.clock_s });
        Ok(Observation { seq, message: plan.message })
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        let canonical = CanonicalState {
            clock_s: self.clock_s,
            devices: &self.devices,
            executed_ops: self.event_log.len(),
            labware: &self.labware,
        };
        let state = serde_json::to_string(&canonical).expect("world serializes");
        let hash = sha256_hex(state.as_bytes());
        WorldSnapshot { state, hash }
    }

    /// JSON view of the world for display: snapshot state plus hash.
    pub fn snapshot_json(&self) -> serde_json::Value {
        let snap = self.snapshot();
        serde_json::json!({
            "hash": snap.hash,
            "state": serde_json::from_str::<serde_json::Value>(&snap.state).expect("snapshot is JSON"),
        })
    }

    /// Re-applies an event log on top of `initial`.
    pub fn replay(initial: &LabWorld, events: &[ExecutedOp]) -> Result<LabWorld, ReplayError> {
        let mut world = initial.clone();
        for (index, ev) in events.iter().enumerate() {
            let expected = world.event_log.len() as u64;
            if ev.seq != expected {
                return Err(ReplayError::Sequence { index, expected, got: ev.seq });
            }
            world.apply(&ev.op).map_err(|failure| ReplayError::Failed { index, failure })?;
        }
        Ok(world)
    }

    /// Event log as JSON lines.
    pub fn event_log_jsonl(&self) -> String {
        self.event_log
            .iter()
            .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
            .collect()
    }
}

impl fmt::Display for LabWorld {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} labware, {} executed ops, t={}s", self.labware.len(), self.event_log.len(), fmt_num(self.clock_s))
    }
}
