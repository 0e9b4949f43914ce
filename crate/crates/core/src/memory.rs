//! Episodic trajectory and long-term knowledge store.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsm::{FsmState, SignalVector};
use crate::util::normalized_words;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub t: u32,
    pub state: FsmState,
    pub action_summary: String,
    pub observation: String,
    pub signal_after: SignalVector,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trajectory step {got} does not follow {expected}")]
pub struct NonMonotonicStep {
    pub expected: u32,
    pub got: u32,
}

/// Append-only record of the active run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<TrajectoryEntry>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, entry: TrajectoryEntry) -> Result<(), NonMonotonicStep> {
        let expected = self.entries.last().map_or(0, |e| e.t + 1);
        if entry.t != expected {
            return Err(NonMonotonicStep { expected, got: entry.t });
        }
        self.entries.push(entry);
        Ok(())
    }

    /// The last `n` entries, oldest first.
    pub fn window(&self, n: usize) -> &[TrajectoryEntry] {
        &self.entries[self.entries.len().saturating_sub(n)..]
    }

    pub fn entries(&self) -> &[TrajectoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeDoc {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub tags: Vec<String>,
    pub body: String,
}

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("cannot read knowledge store: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed knowledge store: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate document id '{0}'")]
    DuplicateId(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct KnowledgeFile {
    docs: Vec<KnowledgeDoc>,
}

/// Immutable document store ranked by token overlap.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeStore {
    docs: Vec<KnowledgeDoc>,
    vocab: Vec<BTreeSet<String>>,
}

impl KnowledgeStore {
    pub fn new(docs: Vec<KnowledgeDoc>) -> Result<Self, KnowledgeError> {
        let mut ids = BTreeSet::new();
        for d in &docs {
            if !ids.insert(d.id.as_str()) {
                return Err(KnowledgeError::DuplicateId(d.id.clone()));
            }
        }
        let vocab = docs
            .iter()
            .map(|d| {
                let text = format!("{} {} {}", d.title, d.tags.join(" "), d.body);
                normalized_words(&text).into_iter().collect()
            })
            .collect();
        Ok(Self { docs, vocab })
    }

    pub fn from_json(text: &str) -> Result<Self, KnowledgeError> {
        let file: KnowledgeFile = serde_json::from_str(text)?;
        Self::new(file.docs)
    }

    pub fn load(path: &Path) -> Result<Self, KnowledgeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn bundled() -> Self {
        Self::from_json(include_str!("../data/knowledge.json")).expect("bundled knowledge parses")
    }

    pub fn get(&self, id: &str) -> Option<&KnowledgeDoc> {
        self.docs.iter().find(|d| d.id == id)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Number of distinct query words that occur in the document.
    pub fn score(&self, index: usize, query: &str) -> usize {
        let q: BTreeSet<String> = normalized_words(query).into_iter().collect();
        q.iter().filter(|w| self.vocab[index].contains(*w)).count()
    }

    /// Top `k` documents by descending overlap, ties by ascending id.
    /// Documents sharing no word with the query are never returned.
    pub fn retrieve(&self, query: &str, k: usize) -> Vec<&KnowledgeDoc> {
        let mut scored: Vec<(usize, &KnowledgeDoc)> = (0..self.docs.len())
            .map(|i| (self.score(i, query), &self.docs[i]))
            .filter(|(s, _)| *s > 0)
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        scored.into_iter().take(k).map(|(_, d)| d).collect()
    }
}
