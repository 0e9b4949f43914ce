//! Semantic symbol grounding.
//!
//! Physical entities live in [`WorkingMemory`] as symbol/payload pairs. The
//! planner only ever sees the [`ContextDigest`] produced by [`project`]
//! (keys, kinds and short briefs). Before execution, [`resolve`] maps the
//! symbolic references of an operation back to their payloads.

use std::collections::BTreeMap;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::protocol::{ParamValue, ProtocolCode, ProtocolOp};

pub const MAX_BRIEF_WORDS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolKind {
    Reagent,
    Labware,
    Device,
    Data,
    Derived,
}

impl fmt::Display for SymbolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SymbolKind::Reagent => "reagent",
            SymbolKind::Labware => "labware",
            SymbolKind::Device => "device",
            SymbolKind::Data => "data",
            SymbolKind::Derived => "derived",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolEntry {
    pub key: String,
    pub kind: SymbolKind,
    pub brief: String,
    pub payload: Value,
}

impl SymbolEntry {
    pub fn new(key: &str, kind: SymbolKind, brief: &str, payload: Value) -> Self {
        Self { key: key.to_string(), kind, brief: brief.to_string(), payload }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GroundingError {
    #[error("symbol '{0}' is already bound")]
    DuplicateKey(String),
    #[error("symbol key must not be empty")]
    EmptyKey,
    #[error("symbol '{0}' has a null payload")]
    NullPayload(String),
    #[error("brief for '{key}' has {words} words (max {MAX_BRIEF_WORDS})")]
    BriefTooLong { key: String, words: usize },
    #[error("unknown symbol '{0}'")]
    UnknownSymbol(String),
}

/// Ordered symbol table. Bindings are never silently overwritten.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WorkingMemory {
    entries: IndexMap<String, SymbolEntry>,
    revision: u64,
}

/// JSON export of a memory, as embedded in traces and fixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub revision: u64,
    pub entries: Vec<SymbolEntry>,
}

impl WorkingMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds `entry`. Re-binding an existing key fails unless `overwrite` is set.
    pub fn bind(&mut self, entry: SymbolEntry, overwrite: bool) -> Result<u64, GroundingError> {
        if entry.key.is_empty() {
            return Err(GroundingError::EmptyKey);
        }
        if entry.payload.is_null() {
            return Err(GroundingError::NullPayload(entry.key));
        }
        let words = entry.brief.split_whitespace().count();
        if words > MAX_BRIEF_WORDS {
            return Err(GroundingError::BriefTooLong { key: entry.key, words });
        }
        if !overwrite && self.entries.contains_key(&entry.key) {
            return Err(GroundingError::DuplicateKey(entry.key));
        }
        // IndexMap::insert keeps the original position on overwrite.
        self.entries.insert(entry.key.clone(), entry);
        self.revision += 1;
        Ok(self.revision)
    }

    pub fn get(&self, key: &str) -> Option<&SymbolEntry> {
        self.entries.get(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn entries(&self) -> impl Iterator<Item = &SymbolEntry> {
        self.entries.values()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot { revision: self.revision, entries: self.entries.values().cloned().collect() }
    }

    pub fn from_snapshot(snapshot: MemorySnapshot) -> Result<Self, GroundingError> {
        let mut memory = WorkingMemory::new();
        for entry in snapshot.entries {
            memory.bind(entry, false)?;
        }
        memory.revision = memory.revision.max(snapshot.revision);
        Ok(memory)
    }

    /// Sum of payload tokens under [`count_tokens`], payloads encoded as compact JSON.
    pub fn payload_tokens(&self) -> usize {
        self.entries
            .values()
            .map(|e| count_tokens(&serde_json::to_string(&e.payload).expect("payload serializes")))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DigestItem {
    pub key: String,
    pub kind: SymbolKind,
    pub brief: String,
}

/// What the planner sees of working memory: pointers, never payloads.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextDigest {
    pub items: Vec<DigestItem>,
    pub token_count: usize,
}

impl ContextDigest {
    pub fn render(&self) -> String {
        render_items(&self.items)
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.items.iter().any(|i| i.key == key)
    }
}

fn render_items(items: &[DigestItem]) -> String {
    items
        .iter()
        .map(|i| format!("{} [{}]: {}", i.key, i.kind, i.brief))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Compresses working memory to the list of bound symbols.
pub fn project(memory: &WorkingMemory) -> ContextDigest {
    let items: Vec<DigestItem> = memory
        .entries
        .values()
        .map(|e| DigestItem { key: e.key.clone(), kind: e.kind, brief: e.brief.clone() })
        .collect();
    let token_count = count_tokens(&render_items(&items));
    ContextDigest { items, token_count }
}

/// Counts maximal alphanumeric runs plus every other non-whitespace character.
pub fn count_tokens(text: &str) -> usize {
    let mut count = 0;
    let mut in_run = false;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if !in_run {
                count += 1;
                in_run = true;
            }
        } else {
            in_run = false;
            if !c.is_whitespace() {
                count += 1;
            }
        }
    }
    count
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroundedParam {
    Resolved {
        #[serde(rename = "ref")]
        key: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        well: Option<String>,
        payload: Value,
    },
    Literal(ParamValue),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedSymbol {
    pub key: String,
    pub payload: Value,
}

/// An operation whose symbolic references have been replaced by payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedAction {
    pub device_id: String,
    pub op_name: String,
    pub params: BTreeMap<String, GroundedParam>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<ResolvedSymbol>,
}

impl GroundedAction {
    /// The symbolic operation this action was grounded from.
    pub fn symbolic(&self) -> ProtocolOp {
        let params = self
            .params
            .iter()
            .map(|(name, p)| {
                let v = match p {
                    GroundedParam::Resolved { key, well, .. } => ParamValue::Ref { key: key.clone(), well: well.clone() },
                    GroundedParam::Literal(v) => v.clone(),
                };
                (name.clone(), v)
            })
            .collect();
        ProtocolOp {
            device_id: self.device_id.clone(),
            op_name: self.op_name.clone(),
            params,
            targets: self.targets.iter().map(|t| t.key.clone()).collect(),
        }
    }

    pub fn param(&self, name: &str) -> Option<&GroundedParam> {
        self.params.get(name)
    }

    pub fn number(&self, name: &str) -> Option<f64> {
        match self.params.get(name)? {
            GroundedParam::Literal(v) => v.as_number(),
            GroundedParam::Resolved { .. } => None,
        }
    }

    /// `(key, well)` of a resolved reference parameter.
    pub fn reference(&self, name: &str) -> Option<(&str, Option<&str>)> {
        match self.params.get(name)? {
            GroundedParam::Resolved { key, well, .. } => Some((key.as_str(), well.as_deref())),
            GroundedParam::Literal(_) => None,
        }
    }
}

/// Grounds one symbolic operation against working memory.
pub fn resolve(op: &ProtocolOp, memory: &WorkingMemory) -> Result<GroundedAction, GroundingError> {
    let mut params = BTreeMap::new();
    for (name, value) in &op.params {
        let grounded = match value {
            ParamValue::Ref { key, well } => {
                let entry = memory.get(key).ok_or_else(|| GroundingError::UnknownSymbol(key.clone()))?;
                GroundedParam::Resolved { key: key.clone(), well: well.clone(), payload: entry.payload.clone() }
            }
            literal => GroundedParam::Literal(literal.clone()),
        };
        params.insert(name.clone(), grounded);
    }
    let targets = op
        .targets
        .iter()
        .map(|key| {
            memory
                .get(key)
                .map(|e| ResolvedSymbol { key: key.clone(), payload: e.payload.clone() })
                .ok_or_else(|| GroundingError::UnknownSymbol(key.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GroundedAction { device_id: op.device_id.clone(), op_name: op.op_name.clone(), params, targets })
}

pub fn resolve_code(code: &ProtocolCode, memory: &WorkingMemory) -> Result<Vec<GroundedAction>, GroundingError> {
    code.ops.iter().map(|op| resolve(op, memory)).collect()
}

/// The 22-device payload fixture: one device symbol per registry entry, each
/// carrying the device's full API schema as payload.
pub fn bundled_device_memory() -> WorkingMemory {
    let snapshot: MemorySnapshot =
        serde_json::from_str(include_str!("../data/device_payloads.json")).expect("bundled payloads parse");
    WorkingMemory::from_snapshot(snapshot).expect("bundled payloads bind")
}
