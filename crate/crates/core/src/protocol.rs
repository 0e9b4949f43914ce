//! Protocol artifacts produced by a planner: scientific drafts and device code.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::registry::fmt_num;
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Number(n) => f.write_str(&fmt_num(*n)),
            Scalar::Text(s) => f.write_str(s),
        }
    }
}

/// A parameter value: either a literal with a unit, or a reference to a
/// working-memory symbol (optionally addressing a well of that labware).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Ref {
        #[serde(rename = "ref")]
        key: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        well: Option<String>,
    },
    Quantity {
        value: Scalar,
        #[serde(default, skip_serializing_if = "String::is_empty")]
        unit: String,
    },
}

impl ParamValue {
    pub fn number(value: f64, unit: &str) -> Self {
        ParamValue::Quantity { value: Scalar::Number(value), unit: unit.to_string() }
    }

    pub fn text(value: &str) -> Self {
        ParamValue::Quantity { value: Scalar::Text(value.to_string()), unit: String::new() }
    }

    pub fn flag(value: bool) -> Self {
        ParamValue::Quantity { value: Scalar::Bool(value), unit: String::new() }
    }

    pub fn reference(key: &str) -> Self {
        ParamValue::Ref { key: key.to_string(), well: None }
    }

    pub fn well(key: &str, well: &str) -> Self {
        ParamValue::Ref { key: key.to_string(), well: Some(well.to_string()) }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            ParamValue::Quantity { value: Scalar::Number(n), .. } => Some(*n),
            _ => None,
        }
    }

    pub fn unit(&self) -> &str {
        match self {
            ParamValue::Quantity { unit, .. } => unit,
            ParamValue::Ref { .. } => "",
        }
    }

    pub fn ref_key(&self) -> Option<&str> {
        match self {
            ParamValue::Ref { key, .. } => Some(key),
            _ => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Ref { key, well: Some(w) } => write!(f, "{key}:{w}"),
            ParamValue::Ref { key, well: None } => f.write_str(key),
            ParamValue::Quantity { value, unit } if unit.is_empty() => write!(f, "{value}"),
            ParamValue::Quantity { value, unit } => write!(f, "{value} {unit}"),
        }
    }
}

/// One symbolic device operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOp {
    pub device_id: String,
    pub op_name: String,
    #[serde(default)]
    pub params: BTreeMap<String, ParamValue>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<String>,
}

impl ProtocolOp {
    pub fn new(device_id: &str, op_name: &str) -> Self {
        Self {
            device_id: device_id.to_string(),
            op_name: op_name.to_string(),
            params: BTreeMap::new(),
            targets: Vec::new(),
        }
    }

    pub fn with(mut self, name: &str, value: ParamValue) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    pub fn target(mut self, key: &str) -> Self {
        self.targets.push(key.to_string());
        self
    }

    /// Every symbol key this op references, with the location it came from.
    pub fn symbol_refs(&self) -> Vec<(String, &str)> {
        let mut refs: Vec<(String, &str)> = self
            .params
            .iter()
            .filter_map(|(name, v)| v.ref_key().map(|k| (format!("params/{name}"), k)))
            .collect();
        refs.extend(self.targets.iter().enumerate().map(|(i, k)| (format!("targets/{i}"), k.as_str())));
        refs
    }
}

impl fmt::Display for ProtocolOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}(", self.device_id, self.op_name)?;
        let mut first = true;
        for (name, v) in &self.params {
            if !first {
                f.write_str(", ")?;
            }
            first = false;
            write!(f, "{name}={v}")?;
        }
        for t in &self.targets {
            if !first {
                f.write_str(", ")?;
            }
            first = false;
            write!(f, "@{t}")?;
        }
        f.write_str(")")
    }
}

fn default_schema_version() -> String {
    "1".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolCode {
    #[serde(default = "default_schema_version")]
    pub schema_version: String,
    pub ops: Vec<ProtocolOp>,
}

impl ProtocolCode {
    pub fn new(ops: Vec<ProtocolOp>) -> Self {
        Self { schema_version: default_schema_version(), ops }
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Content hash of the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("code serializes").as_bytes())
    }
}

/// Outcome of parsing planner output into protocol code. Parse failures are
/// scored as zero by the code metrics.
#[derive(Debug, Clone, PartialEq)]
pub enum ParsedCode {
    Code(ProtocolCode),
    ParseFailure(String),
}

impl ParsedCode {
    pub fn parse(text: &str) -> Self {
        match serde_json::from_str::<ProtocolCode>(text) {
            Ok(code) => ParsedCode::Code(code),
            Err(e) => ParsedCode::ParseFailure(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftStep {
    /// Step type, e.g. `transfer`, `negative_control`.
    pub kind: String,
    pub title: String,
    #[serde(default)]
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolDraft {
    pub title: String,
    pub steps: Vec<DraftStep>,
}

impl ProtocolDraft {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Flattened draft text used by semantic metrics.
    pub fn text(&self) -> String {
        let mut out = self.title.clone();
        for s in &self.steps {
            out.push('\n');
            out.push_str(&s.title);
            if !s.rationale.is_empty() {
                out.push_str(". ");
                out.push_str(&s.rationale);
            }
        }
        out
    }
}
