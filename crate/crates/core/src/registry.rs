//! Hardware registry: the machine-readable catalog of devices, their
//! operations, typed parameter bounds and world-state guards.
//!
//! The registry is the ground truth for physical verification. It is loaded
//! once, validated, and then shared read-only.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Numeric,
    Enumerated,
    ResourceReference,
    Boolean,
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamKind::Numeric => "numeric",
            ParamKind::Enumerated => "enumerated",
            ParamKind::ResourceReference => "resource-reference",
            ParamKind::Boolean => "boolean",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    #[serde(default)]
    pub unit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed: Option<Vec<String>>,
    pub required: bool,
}

impl ParamSpec {
    pub fn numeric(name: &str, unit: &str, min: Option<f64>, max: Option<f64>) -> Self {
        Self {
            name: name.to_string(),
            kind: ParamKind::Numeric,
            unit: unit.to_string(),
            min,
            max,
            allowed: None,
            required: true,
        }
    }

    pub fn enumerated(name: &str, allowed: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: ParamKind::Enumerated,
            unit: String::new(),
            min: None,
            max: None,
            allowed: Some(allowed.iter().map(|s| s.to_string()).collect()),
            required: true,
        }
    }

    pub fn reference(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: ParamKind::ResourceReference,
            unit: String::new(),
            min: None,
            max: None,
            allowed: None,
            required: true,
        }
    }

    pub fn boolean(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: ParamKind::Boolean,
            unit: String::new(),
            min: None,
            max: None,
            allowed: None,
            required: false,
        }
    }

    pub fn optional(mut self) -> Self {
        self.required = false;
        self
    }

    /// Human-readable limit, e.g. `"100..15000 g"`.
    pub fn describe_bounds(&self) -> String {
        let unit = if self.unit.is_empty() { String::new() } else { format!(" {}", self.unit) };
        match (self.min, self.max) {
            (Some(lo), Some(hi)) => format!("{}..{}{unit}", fmt_num(lo), fmt_num(hi)),
            (Some(lo), None) => format!(">= {}{unit}", fmt_num(lo)),
            (None, Some(hi)) => format!("<= {}{unit}", fmt_num(hi)),
            (None, None) => "unbounded".to_string(),
        }
    }
}

/// Formats a number without a trailing `.0` for integral values.
pub(crate) fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// World-state predicates a guard may reference.
///
/// Unrecognised predicate strings are kept as [`GuardPredicate::Unknown`] so
/// that validation can report them with a path instead of failing the parse.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum GuardPredicate {
    TargetUnsealed,
    TargetExists,
    VolumeAvailable,
    DeviceIdle,
    Unknown(String),
}

impl GuardPredicate {
    pub fn as_str(&self) -> &str {
        match self {
            GuardPredicate::TargetUnsealed => "target-unsealed",
            GuardPredicate::TargetExists => "target-exists",
            GuardPredicate::VolumeAvailable => "volume-available",
            GuardPredicate::DeviceIdle => "device-idle",
            GuardPredicate::Unknown(s) => s,
        }
    }
}

impl From<String> for GuardPredicate {
    fn from(s: String) -> Self {
        match s.as_str() {
            "target-unsealed" => GuardPredicate::TargetUnsealed,
            "target-exists" => GuardPredicate::TargetExists,
            "volume-available" => GuardPredicate::VolumeAvailable,
            "device-idle" => GuardPredicate::DeviceIdle,
            _ => GuardPredicate::Unknown(s),
        }
    }
}

impl From<GuardPredicate> for String {
    fn from(p: GuardPredicate) -> Self {
        p.as_str().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardRule {
    pub predicate: GuardPredicate,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationSpec {
    pub name: String,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    #[serde(default)]
    pub guards: Vec<GuardRule>,
}

impl OperationSpec {
    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn has_guard(&self, predicate: &GuardPredicate) -> bool {
        self.guards.iter().any(|g| &g.predicate == predicate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeviceCategory {
    #[serde(rename = "LH")]
    LiquidHandling,
    #[serde(rename = "TC")]
    ThermalControl,
    #[serde(rename = "CF")]
    Centrifugation,
    #[serde(rename = "OTHER")]
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSchema {
    pub id: String,
    pub category: DeviceCategory,
    #[serde(default)]
    pub operations: Vec<OperationSpec>,
}

impl DeviceSchema {
    pub fn operation(&self, name: &str) -> Option<&OperationSpec> {
        self.operations.iter().find(|o| o.name == name)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistryFile {
    version: String,
    devices: Vec<DeviceSchema>,
}

/// The registry of devices. Device order is preserved from the source file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "RegistryFile", into = "RegistryFile")]
pub struct HardwareRegistry {
    version: String,
    devices: Vec<DeviceSchema>,
    index: HashMap<String, usize>,
}

impl PartialEq for HardwareRegistry {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version && self.devices == other.devices
    }
}

impl From<RegistryFile> for HardwareRegistry {
    fn from(f: RegistryFile) -> Self {
        HardwareRegistry::new(f.version, f.devices)
    }
}

impl From<HardwareRegistry> for RegistryFile {
    fn from(r: HardwareRegistry) -> Self {
        RegistryFile { version: r.version, devices: r.devices }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SchemaError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("registry parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("registry schema invalid: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Schema(Vec<SchemaError>),
    #[error("failed to read registry: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LookupError {
    #[error("unknown device '{0}'")]
    UnknownDevice(String),
    #[error("unknown operation '{operation}' on device '{device}'")]
    UnknownOperation { device: String, operation: String },
}

impl HardwareRegistry {
    /// Builds a registry without validating it; see [`validate_registry`].
    pub fn new(version: impl Into<String>, devices: Vec<DeviceSchema>) -> Self {
        let mut index = HashMap::with_capacity(devices.len());
        for (i, d) in devices.iter().enumerate() {
            // first declaration wins; duplicates are reported by validation
            index.entry(d.id.clone()).or_insert(i);
        }
        Self { version: version.into(), devices, index }
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn devices(&self) -> &[DeviceSchema] {
        &self.devices
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn device(&self, id: &str) -> Option<&DeviceSchema> {
        self.index.get(id).map(|&i| &self.devices[i])
    }

    pub fn lookup(&self, device_id: &str, op_name: &str) -> Result<&OperationSpec, LookupError> {
        let device = self
            .device(device_id)
            .ok_or_else(|| LookupError::UnknownDevice(device_id.to_string()))?;
        device.operation(op_name).ok_or_else(|| LookupError::UnknownOperation {
            device: device_id.to_string(),
            operation: op_name.to_string(),
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    /// The 22-device registry shipped with the crate.
    pub fn bundled() -> Self {
        load_registry(BUNDLED_REGISTRY.as_bytes()).expect("bundled registry is valid")
    }
}

pub const BUNDLED_REGISTRY: &str = include_str!("../data/registry.json");

/// Parses and validates a registry file.
pub fn load_registry<R: Read>(mut source: R) -> Result<HardwareRegistry, RegistryError> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let registry: HardwareRegistry = serde_json::from_str(&text).map_err(|e| RegistryError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let errors = validate_registry(&registry);
    if errors.is_empty() {
        Ok(registry)
    } else {
        Err(RegistryError::Schema(errors))
    }
}

/// Checks every structural invariant; an empty result means the registry is valid.
pub fn validate_registry(registry: &HardwareRegistry) -> Vec<SchemaError> {
    let mut errors = Vec::new();
    let mut push = |path: String, message: String| errors.push(SchemaError { path, message });

    if registry.devices.is_empty() {
        push("devices".into(), "registry declares no devices".into());
    }

    let mut seen_devices = HashSet::new();
    for device in &registry.devices {
        let dpath = format!("devices/{}", device.id);
        if device.id.is_empty() {
            push(dpath.clone(), "device id is empty".into());
        }
        if !seen_devices.insert(device.id.as_str()) {
            push(dpath.clone(), "duplicate device id".into());
        }

        let mut seen_ops = HashSet::new();
        for op in &device.operations {
            let opath = format!("{dpath}/operations/{}", op.name);
            if !seen_ops.insert(op.name.as_str()) {
                push(opath.clone(), "duplicate operation name".into());
            }

            let mut seen_params = HashSet::new();
            for p in &op.params {
                let ppath = format!("{opath}/params/{}", p.name);
                if !seen_params.insert(p.name.as_str()) {
                    push(ppath.clone(), "duplicate parameter name".into());
                }
                match p.kind {
                    ParamKind::Numeric => {
                        if p.min.is_none() && p.max.is_none() {
                            push(ppath.clone(), "numeric parameter needs min or max".into());
                        }
                        if let (Some(lo), Some(hi)) = (p.min, p.max) {
                            if lo > hi {
                                push(ppath.clone(), format!("min {} exceeds max {}", fmt_num(lo), fmt_num(hi)));
                            }
                        }
                        if p.min.is_some_and(f64::is_nan) || p.max.is_some_and(f64::is_nan) {
                            push(ppath.clone(), "bound is NaN".into());
                        }
                    }
                    ParamKind::Enumerated => {
                        if p.allowed.as_ref().is_none_or(|a| a.is_empty()) {
                            push(ppath.clone(), "enumerated parameter needs a non-empty allowed list".into());
                        }
                        if p.min.is_some() || p.max.is_some() {
                            push(ppath.clone(), "enumerated parameter must not declare min/max".into());
                        }
                    }
                    ParamKind::ResourceReference => {
                        if p.min.is_some() || p.max.is_some() || p.allowed.is_some() {
                            push(ppath.clone(), "resource-reference parameter must not declare min/max/allowed".into());
                        }
                    }
                    ParamKind::Boolean => {}
                }
            }

            for (i, g) in op.guards.iter().enumerate() {
                if let GuardPredicate::Unknown(name) = &g.predicate {
                    push(format!("{opath}/guards/{i}"), format!("undeclared world-state predicate '{name}'"));
                }
            }
        }
    }
    errors
}
