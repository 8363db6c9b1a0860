//! Prefix knowledge base.
//!
//! Every solved problem with steps `a_1..a_n` contributes `n` entries, entry
//! `j` holding the embedded text `problem + a_1 + ... + a_j`. A node's
//! retrieval score is the best cosine between its own state-action text and
//! any stored entry, floored at zero.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_with_norms, Embedder, EmbeddingError, EmbeddingVector};
use crate::par::{self, Strategy};
use crate::problem::{concat_state_action, prefix_text, Step};

pub const KB_VERSION: u32 = 1;

/// Category labels shipped by default. The set is configuration data.
pub const DEFAULT_CATEGORIES: [&str; 14] = [
    "greedy",
    "dp",
    "graphs",
    "trees",
    "math",
    "strings",
    "sorting",
    "searching",
    "two-pointers",
    "data-structures",
    "geometry",
    "bit-manipulation",
    "simulation",
    "constructive",
];

pub fn default_categories() -> Vec<String> {
    DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect()
}

const EMBED_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("problem `{0}` has no solution steps")]
    EmptySteps(String),
    #[error("problem `{problem_id}` uses unknown category `{category}`")]
    UnknownCategory { problem_id: String, category: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("I/O error on {}{}: {message}", path.display(), offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Io {
        path: PathBuf,
        offset: Option<u64>,
        message: String,
    },
    #[error("schema mismatch: {0}")]
    SchemaVersion(String),
}

/// A solved problem ready for ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub problem_id: String,
    pub statement: String,
    pub category: String,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbEntry {
    pub category: String,
    pub prefix_text: String,
    pub vector: EmbeddingVector,
    pub source_problem_id: String,
    pub step_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Indexed {
    entry: KbEntry,
    norm: f64,
}

impl Indexed {
    fn new(entry: KbEntry) -> Self {
        let norm = entry.vector.norm();
        Indexed { entry, norm }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    dim: usize,
    embedder_id: String,
    entries: usize,
}

/// Immutable, category-sharded prefix store with exhaustive-scan retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    shards: BTreeMap<String, Vec<Indexed>>,
    embedder_id: String,
    dim: usize,
}

impl KnowledgeBase {
    pub fn empty(embedder_id: impl Into<String>, dim: usize) -> Self {
        KnowledgeBase {
            shards: BTreeMap::new(),
            embedder_id: embedder_id.into(),
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.shards.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn categories(&self) -> impl Iterator<Item = (&str, usize)> {
        self.shards.iter().map(|(c, v)| (c.as_str(), v.len()))
    }

    /// Entries in storage order: by category, then insertion order.
    pub fn entries(&self) -> impl Iterator<Item = &KbEntry> {
        self.shards.values().flatten().map(|i| &i.entry)
    }

    fn push(&mut self, entry: KbEntry) {
        self.shards
            .entry(entry.category.clone())
            .or_default()
            .push(Indexed::new(entry));
    }

    /// Best cosine between `query` and any entry (restricted to one category
    /// when `category` is set), floored at zero. Zero when nothing matches.
    pub fn max_similarity(
        &self,
        query: &EmbeddingVector,
        category: Option<&str>,
        strategy: Strategy,
    ) -> Result<f64, KbError> {
        if query.dim() != self.dim {
            return Err(EmbeddingError::DimensionMismatch(query.dim(), self.dim).into());
        }
        let q_norm = query.norm();
        let scan = |shard: &[Indexed]| {
            par::max_f64(shard, strategy, |i| {
                cosine_with_norms(query, q_norm, &i.entry.vector, i.norm)
            })
        };
        let best = match category {
            Some(c) => self.shards.get(c).and_then(|s| scan(s)),
            None => self.shards.values().filter_map(|s| scan(s)).reduce(f64::max),
        };
        Ok(best.unwrap_or(0.0).max(0.0))
    }

    /// Retrieval score of a state-action pair.
    pub fn retrieval_score(
        &self,
        embedder: &dyn Embedder,
        state_text: &str,
        action_text: &str,
        category: Option<&str>,
    ) -> Result<f64, KbError> {
        if self.is_empty() {
            return Ok(0.0);
        }
        let query = embedder.embed(&concat_state_action(state_text, action_text))?;
        self.max_similarity(&query, category, Strategy::default())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KbError> {
        let path = path.as_ref();
        let io = |e: std::io::Error| KbError::Io {
            path: path.to_path_buf(),
            offset: None,
            message: e.to_string(),
        };
        let mut out = Vec::new();
        let header = Header {
            version: KB_VERSION,
            dim: self.dim,
            embedder_id: self.embedder_id.clone(),
            entries: self.len(),
        };
        serde_json::to_writer(&mut out, &header).expect("header serializes");
        out.push(b'\n');
        for entry in self.entries() {
            serde_json::to_writer(&mut out, entry).expect("entry serializes");
            out.push(b'\n');
        }
        let mut file = fs::File::create(path).map_err(io)?;
        file.write_all(&out).map_err(io)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KbError> {
        let path = path.as_ref();
        let corrupt = |offset: usize, message: String| KbError::Io {
            path: path.to_path_buf(),
            offset: Some(offset as u64),
            message,
        };
        let bytes = fs::read(path).map_err(|e| KbError::Io {
            path: path.to_path_buf(),
            offset: None,
            message: e.to_string(),
        })?;
        if bytes.last() != Some(&b'\n') {
            return Err(corrupt(bytes.len(), "truncated: missing final newline".into()));
        }
        let mut offset = 0usize;
        let mut lines = Vec::new();
        for line in bytes[..bytes.len() - 1].split(|b| *b == b'\n') {
            lines.push((offset, line));
            offset += line.len() + 1;
        }
        let (_, header_line) = lines[0];
        let header: Header = serde_json::from_slice(header_line)
            .map_err(|e| KbError::SchemaVersion(format!("bad header: {e}")))?;
        if header.version != KB_VERSION {
            return Err(KbError::SchemaVersion(format!(
                "unsupported version {} (expected {KB_VERSION})",
                header.version
            )));
        }
        let mut kb = KnowledgeBase::empty(header.embedder_id, header.dim);
        for &(offset, line) in &lines[1..] {
            let entry: KbEntry = serde_json::from_slice(line)
                .map_err(|e| corrupt(offset, format!("unreadable entry: {e}")))?;
            if entry.vector.dim() != header.dim {
                return Err(KbError::SchemaVersion(format!(
                    "entry at byte {offset} has dim {}, header says {}",
                    entry.vector.dim(),
                    header.dim
                )));
            }
            kb.push(entry);
        }
        if kb.len() != header.entries {
            return Err(corrupt(
                bytes.len(),
                format!("truncated: header promises {} entries, found {}", header.entries, kb.len()),
            ));
        }
        Ok(kb)
    }
}

/// Builds the knowledge base: one entry per step prefix of every item.
pub fn build_kb(
    corpus: &[CorpusItem],
    embedder: &dyn Embedder,
    categories: &[String],
) -> Result<KnowledgeBase, KbError> {
    let allowed: BTreeSet<&str> = categories.iter().map(String::as_str).collect();
    for item in corpus {
        if item.steps.is_empty() {
            return Err(KbError::EmptySteps(item.problem_id.clone()));
        }
        if !allowed.contains(item.category.as_str()) {
            return Err(KbError::UnknownCategory {
                problem_id: item.problem_id.clone(),
                category: item.category.clone(),
            });
        }
    }
    let pending: Vec<(&CorpusItem, usize, String)> = corpus
        .iter()
        .flat_map(|item| {
            (1..=item.steps.len())
                .map(move |j| (item, j, prefix_text(&item.statement, &item.steps[..j])))
        })
        .collect();
    let texts: Vec<String> = pending.iter().map(|(_, _, t)| t.clone()).collect();
    let mut vectors = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(EMBED_CHUNK) {
        vectors.extend(embedder.embed_batch(chunk)?);
    }
    let mut kb = KnowledgeBase::empty(embedder.id(), embedder.dim());
    for ((item, j, text), vector) in pending.into_iter().zip(vectors) {
        kb.push(KbEntry {
            category: item.category.clone(),
            prefix_text: text,
            vector,
            source_problem_id: item.problem_id.clone(),
            step_index: j,
        });
    }
    Ok(kb)
}
