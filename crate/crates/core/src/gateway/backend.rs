use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tokens::CallKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: f64,
    pub seed: Option<u64>,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            temperature: 0.7,
            top_p: 0.95,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub kind: CallKind,
    pub system: String,
    pub user: String,
    pub sampling: Sampling,
}

impl ChatRequest {
    /// Hex SHA-256 over the call kind and both prompts; the replay key for
    /// scripted backends.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.kind.as_str().as_bytes());
        h.update(b"\n");
        h.update(self.system.as_bytes());
        h.update(b"\n");
        h.update(self.user.as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub text: String,
    /// `(prompt_tokens, completion_tokens)` when the provider reports them.
    pub usage: Option<(u64, u64)>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    /// Connection failures, timeouts, 429 and 5xx. Retried.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("provider response malformed: {0}")]
    InvalidResponse(String),
    #[error("scripted backend has no response for {kind} request {digest}")]
    MockUnmatched { kind: String, digest: String },
    #[error("backend misconfigured: {0}")]
    Config(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

pub trait ChatBackend: Send + Sync {
    fn model_name(&self) -> &str;

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, BackendError>;

    /// A backend for an independent search. Scripted backends restart their
    /// replay state; network backends share their client.
    fn fresh_session(&self) -> Arc<dyn ChatBackend>;
}
