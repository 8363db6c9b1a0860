//! Scripted replay backend.
//!
//! A script is a JSON list of records:
//!
//! ```json
//! [{"kind": "expand", "match_digest": "*", "match_contains": ["sorted"],
//!   "response": "STEP: sort the input", "repeat": false}]
//! ```
//!
//! A request is answered by the most specific unconsumed record of the same
//! kind: exact digest first, then substring matches, then wildcards, each in
//! file order. Records are consumed once unless `repeat` is set. A request no
//! record matches is an error.

use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::backend::{BackendError, ChatBackend, ChatReply, ChatRequest};
use crate::tokens::CallKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRecord {
    pub kind: CallKind,
    /// Hex request digest, `"*"` or absent for any request of this kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_digest: Option<String>,
    /// Every listed substring must occur in the system or user prompt.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub match_contains: Vec<String>,
    pub response: String,
    #[serde(default)]
    pub repeat: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<MockUsage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl MockRecord {
    pub fn new(kind: CallKind, response: impl Into<String>) -> Self {
        MockRecord {
            kind,
            match_digest: None,
            match_contains: Vec::new(),
            response: response.into(),
            repeat: false,
            usage: None,
        }
    }

    pub fn when(mut self, needle: impl Into<String>) -> Self {
        self.match_contains.push(needle.into());
        self
    }

    pub fn digest(mut self, digest: impl Into<String>) -> Self {
        self.match_digest = Some(digest.into());
        self
    }

    pub fn repeat(mut self) -> Self {
        self.repeat = true;
        self
    }

    /// 0 = exact digest, 1 = substring, 2 = wildcard; `None` if no match.
    fn specificity(&self, req: &ChatRequest, digest: &str) -> Option<u8> {
        if self.kind != req.kind {
            return None;
        }
        let contains_ok = self
            .match_contains
            .iter()
            .all(|n| req.user.contains(n.as_str()) || req.system.contains(n.as_str()));
        if !contains_ok {
            return None;
        }
        match self.match_digest.as_deref() {
            Some(d) if d != "*" => (d == digest).then_some(0),
            _ if !self.match_contains.is_empty() => Some(1),
            _ => Some(2),
        }
    }
}

pub struct ScriptedMock {
    model: String,
    records: Arc<Vec<MockRecord>>,
    used: Mutex<Vec<bool>>,
}

impl ScriptedMock {
    pub fn new(records: Vec<MockRecord>) -> Self {
        let n = records.len();
        ScriptedMock {
            model: "scripted-mock".into(),
            records: Arc::new(records),
            used: Mutex::new(vec![false; n]),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let records: Vec<MockRecord> = serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self::new(records))
    }

    pub fn records(&self) -> &[MockRecord] {
        &self.records
    }
}

impl ChatBackend for ScriptedMock {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, BackendError> {
        let digest = request.digest();
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        let best = self
            .records
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .filter_map(|(i, r)| r.specificity(request, &digest).map(|s| (s, i)))
            .min();
        let Some((_, i)) = best else {
            return Err(BackendError::MockUnmatched {
                kind: request.kind.as_str().to_string(),
                digest,
            });
        };
        let record = &self.records[i];
        if !record.repeat {
            used[i] = true;
        }
        Ok(ChatReply {
            text: record.response.clone(),
            usage: record.usage.map(|u| (u.prompt_tokens, u.completion_tokens)),
        })
    }

    fn fresh_session(&self) -> Arc<dyn ChatBackend> {
        Arc::new(ScriptedMock {
            model: self.model.clone(),
            records: self.records.clone(),
            used: Mutex::new(vec![false; self.records.len()]),
        })
    }
}
