use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

/// Which gateway operation issued a model call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Expand,
    Simulate,
    Codegen,
    Evaluate,
    Localize,
    Reflect,
    Decompose,
}

impl CallKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CallKind::Expand => "expand",
            CallKind::Simulate => "simulate",
            CallKind::Codegen => "codegen",
            CallKind::Evaluate => "evaluate",
            CallKind::Localize => "localize",
            CallKind::Reflect => "reflect",
            CallKind::Decompose => "decompose",
        }
    }
}

impl std::fmt::Display for CallKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Token counts for one gateway call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub call_kind: CallKind,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// True when counts come from the local whitespace estimate.
    pub estimated: bool,
}

impl TokenUsage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

/// Whitespace-token estimate used when a provider reports no usage.
pub fn estimate_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindTotals {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTotals {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
    pub estimated_calls: u64,
    pub by_kind: BTreeMap<CallKind, KindTotals>,
}

impl TokenTotals {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a TokenUsage>) -> Self {
        let mut t = TokenTotals::default();
        for r in records {
            t.calls += 1;
            t.prompt_tokens += r.prompt_tokens;
            t.completion_tokens += r.completion_tokens;
            t.estimated_calls += u64::from(r.estimated);
            let k = t.by_kind.entry(r.call_kind).or_default();
            k.calls += 1;
            k.prompt_tokens += r.prompt_tokens;
            k.completion_tokens += r.completion_tokens;
        }
        t.total_tokens = t.prompt_tokens + t.completion_tokens;
        t
    }
}

/// Append-only record of token usage. A ledger may forward every record to a
/// parent ledger so per-problem and per-run totals stay consistent.
#[derive(Debug, Default)]
pub struct TokenLedger {
    records: Mutex<Vec<TokenUsage>>,
    parent: Option<Arc<TokenLedger>>,
}

impl TokenLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_parent(parent: Arc<TokenLedger>) -> Self {
        TokenLedger {
            records: Mutex::default(),
            parent: Some(parent),
        }
    }

    pub fn record(&self, usage: TokenUsage) {
        if let Some(parent) = &self.parent {
            parent.record(usage.clone());
        }
        self.records.lock().unwrap_or_else(|e| e.into_inner()).push(usage);
    }

    pub fn records(&self) -> Vec<TokenUsage> {
        self.records.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn totals(&self) -> TokenTotals {
        TokenTotals::from_records(&self.records())
    }
}
