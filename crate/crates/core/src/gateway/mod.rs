//! The single boundary to the language model.
//!
//! Every operation issues exactly one logical call, records one
//! [`TokenUsage`] and appends one transcript entry, whether it succeeds or
//! not. Transport failures are retried with exponential backoff; parse
//! failures never are.

pub mod backend;
pub mod http;
pub mod mock;
pub mod prompts;

use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{BackendError, ChatBackend, ChatReply, ChatRequest, Sampling};
pub use http::HttpProvider;
pub use mock::{MockRecord, ScriptedMock};

use crate::problem::{normalize_ws, split_steps, Problem, Step, StepError, TestCase};
use crate::sandbox::SandboxReport;
use crate::tokens::{estimate_tokens, CallKind, TokenLedger, TokenUsage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{0} call returned an empty completion")]
    EmptyCompletion(CallKind),
    #[error("completed plan does not preserve step {index} of the given prefix")]
    PrefixViolation { index: usize },
    #[error("reply contains no code defining `{0}`")]
    NoCodeBlock(String),
    #[error("reply has no `SCORE: <number>` line: {0:?}")]
    ScoreParse(String),
    #[error("reply has no `FIRST_BAD_STEP: <int>` line: {0:?}")]
    LocalizationParse(String),
    #[error("reply contains no steps")]
    EmptyPlan,
    #[error("precondition violated: {0}")]
    Precondition(&'static str),
}

impl GatewayError {
    /// Errors that indicate a broken script or contract rather than a model
    /// misbehaving; a search aborts on these instead of degrading.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            GatewayError::Backend(BackendError::MockUnmatched { .. })
                | GatewayError::Backend(BackendError::Config(_))
                | GatewayError::Precondition(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: usize,
    pub kind: CallKind,
    pub digest: String,
    pub system: String,
    pub user: String,
    pub response: Option<String>,
    pub error: Option<String>,
}

/// Model-written analysis of a failed simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reflection {
    pub text: String,
    pub source_node: usize,
}

/// Step-aligned view of generated code.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeBlocks {
    /// Lines before the first `# STEP k` marker (imports, the `def` line).
    pub preamble: String,
    pub blocks: Vec<String>,
}

/// Splits code at `# STEP k` comment markers.
pub fn split_code_blocks(code: &str) -> CodeBlocks {
    let marker = Regex::new(r"^\s*#\s*STEP\s+\d+").expect("valid regex");
    let mut preamble = String::new();
    let mut blocks: Vec<String> = Vec::new();
    for line in code.lines() {
        if marker.is_match(line) {
            blocks.push(String::new());
        }
        let target = blocks.last_mut().unwrap_or(&mut preamble);
        target.push_str(line);
        target.push('\n');
    }
    CodeBlocks { preamble, blocks }
}

/// Extracts code from a reply: the first fenced block when present,
/// otherwise the whole reply.
pub fn extract_code(reply: &str, entry_point: &str) -> Result<String, GatewayError> {
    let fence = Regex::new(r"(?s)```[A-Za-z0-9_+-]*[^\n]*\n(.*?)```").expect("valid regex");
    let code = match fence.captures(reply) {
        Some(c) => c[1].to_string(),
        None => reply.trim().to_string() + "\n",
    };
    let def = Regex::new(&format!(r"(?m)^\s*def\s+{}\s*\(", regex::escape(entry_point)))
        .expect("valid regex");
    if !def.is_match(&code) {
        return Err(GatewayError::NoCodeBlock(entry_point.to_string()));
    }
    Ok(code)
}

/// Parses `SCORE: x` and clamps to [0, 1].
pub fn parse_score(reply: &str) -> Result<f64, GatewayError> {
    let re = Regex::new(r"SCORE:\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)").expect("valid regex");
    let score: f64 = re
        .captures(reply)
        .and_then(|c| c[1].parse().ok())
        .ok_or_else(|| GatewayError::ScoreParse(reply.chars().take(200).collect()))?;
    Ok(score.clamp(0.0, 1.0))
}

/// Parsed localization reply; `warning` is set when the index was clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub step_index: usize,
    pub warning: Option<String>,
}

pub fn parse_localization(reply: &str, step_count: usize) -> Result<Localization, GatewayError> {
    let re = Regex::new(r"FIRST_BAD_STEP:\s*([-+]?\d+)").expect("valid regex");
    let raw: i64 = re
        .captures(reply)
        .and_then(|c| c[1].parse().ok())
        .ok_or_else(|| GatewayError::LocalizationParse(reply.chars().take(200).collect()))?;
    let max = step_count.max(1) as i64;
    let clamped = raw.clamp(1, max);
    let warning = (clamped != raw)
        .then(|| format!("localized step {raw} outside 1..={max}; clamped to {clamped}"));
    if let Some(w) = &warning {
        tracing::warn!("{w}");
    }
    Ok(Localization {
        step_index: clamped as usize,
        warning,
    })
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    /// Answers evaluate calls when set; otherwise `backend` does.
    evaluator: Option<Arc<dyn ChatBackend>>,
    sampling: Sampling,
    retry: RetryPolicy,
    ledger: TokenLedger,
    transcript: Mutex<Vec<TranscriptEntry>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, sampling: Sampling) -> Self {
        Self::with_ledger(backend, sampling, TokenLedger::new())
    }

    pub fn with_ledger(backend: Arc<dyn ChatBackend>, sampling: Sampling, ledger: TokenLedger) -> Self {
        Gateway {
            backend,
            evaluator: None,
            sampling,
            retry: RetryPolicy::default(),
            ledger,
            transcript: Mutex::default(),
        }
    }

    /// Routes solution scoring to a different model.
    pub fn with_evaluator(mut self, evaluator: Arc<dyn ChatBackend>) -> Self {
        self.evaluator = Some(evaluator);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn ledger(&self) -> &TokenLedger {
        &self.ledger
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.transcript.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Writes one JSON file per call: `transcript/0001-expand.json`, ...
    pub fn write_transcript(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for e in self.transcript() {
            let name = format!("{:04}-{}.json", e.seq, e.kind.as_str());
            let text = serde_json::to_string_pretty(&e).expect("entry serializes");
            fs::write(dir.join(name), text + "\n")?;
        }
        Ok(())
    }

    fn call(&self, kind: CallKind, user: String) -> Result<String, GatewayError> {
        let request = ChatRequest {
            kind,
            system: prompts::SYSTEM.to_string(),
            user,
            sampling: self.sampling.clone(),
        };
        let backend = match (&self.evaluator, kind) {
            (Some(e), CallKind::Evaluate) => e,
            _ => &self.backend,
        };
        let mut result = Err(BackendError::Transport("no attempt made".into()));
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(self.retry.base_delay_ms << (attempt - 1)));
            }
            result = backend.complete(&request);
            match &result {
                Err(e) if e.is_retryable() => continue,
                _ => break,
            }
        }
        let prompt_text_tokens = estimate_tokens(&request.system) + estimate_tokens(&request.user);
        let usage = match &result {
            Ok(ChatReply { usage: Some((p, c)), .. }) => TokenUsage {
                call_kind: kind,
                prompt_tokens: *p,
                completion_tokens: *c,
                estimated: false,
            },
            Ok(reply) => TokenUsage {
                call_kind: kind,
                prompt_tokens: prompt_text_tokens,
                completion_tokens: estimate_tokens(&reply.text),
                estimated: true,
            },
            Err(_) => TokenUsage {
                call_kind: kind,
                prompt_tokens: prompt_text_tokens,
                completion_tokens: 0,
                estimated: true,
            },
        };
        self.ledger.record(usage);
        let mut transcript = self.transcript.lock().unwrap_or_else(|e| e.into_inner());
        let seq = transcript.len() + 1;
        transcript.push(TranscriptEntry {
            seq,
            kind,
            digest: request.digest(),
            system: request.system,
            user: request.user,
            response: result.as_ref().ok().map(|r| r.text.clone()),
            error: result.as_ref().err().map(|e| e.to_string()),
        });
        Ok(result?.text)
    }

    /// Proposes one next step given the path so far, the steps already
    /// proposed for this position, and an optional reflection.
    pub fn propose_next_step(
        &self,
        problem: &Problem,
        path: &[Step],
        prior_siblings: &[Step],
        reflection: Option<&Reflection>,
    ) -> Result<Step, GatewayError> {
        let reply = self.call(
            CallKind::Expand,
            prompts::expand(problem, path, prior_siblings, reflection.map(|r| r.text.as_str())),
        )?;
        let text = split_steps(&reply)
            .map_err(|_| GatewayError::EmptyCompletion(CallKind::Expand))?
            .remove(0)
            .text;
        Ok(Step {
            index: path.len() + 1,
            text,
        })
    }

    /// Completes a plan; the result always starts with `path` verbatim.
    pub fn complete_simulation(&self, problem: &Problem, path: &[Step]) -> Result<Vec<Step>, GatewayError> {
        if path.is_empty() {
            return Err(GatewayError::Precondition("simulation needs a nonempty path"));
        }
        let reply = self.call(CallKind::Simulate, prompts::simulate(problem, path))?;
        let plan = split_steps(&reply).map_err(|_| GatewayError::EmptyPlan)?;
        for (i, given) in path.iter().enumerate() {
            match plan.get(i) {
                Some(s) if normalize_ws(&s.text) == normalize_ws(&given.text) => {}
                _ => return Err(GatewayError::PrefixViolation { index: i + 1 }),
            }
        }
        Ok(plan)
    }

    pub fn generate_code(&self, problem: &Problem, steps: &[Step]) -> Result<String, GatewayError> {
        if steps.is_empty() {
            return Err(GatewayError::Precondition("code generation needs steps"));
        }
        let reply = self.call(CallKind::Codegen, prompts::codegen(problem, steps))?;
        extract_code(&reply, &problem.entry_point)
    }

    /// Baseline: code straight from the statement and public tests.
    pub fn generate_code_direct(&self, problem: &Problem) -> Result<String, GatewayError> {
        let reply = self.call(CallKind::Codegen, prompts::direct(problem))?;
        extract_code(&reply, &problem.entry_point)
    }

    pub fn evaluate_solution(
        &self,
        problem: &Problem,
        steps: &[Step],
        report: &SandboxReport,
    ) -> Result<f64, GatewayError> {
        let reply = self.call(
            CallKind::Evaluate,
            prompts::evaluate(problem, steps, &report.feedback_text),
        )?;
        parse_score(&reply)
    }

    pub fn localize_error(
        &self,
        problem: &Problem,
        steps: &[Step],
        code_blocks: &[String],
        failing_test: &TestCase,
        trace: &str,
    ) -> Result<Localization, GatewayError> {
        let reply = self.call(
            CallKind::Localize,
            prompts::localize(problem, steps, code_blocks, failing_test, trace),
        )?;
        parse_localization(&reply, steps.len())
    }

    pub fn reflect(
        &self,
        problem: &Problem,
        steps: &[Step],
        report: &SandboxReport,
        source_node: usize,
    ) -> Result<Reflection, GatewayError> {
        if report.all_passed() {
            return Err(GatewayError::Precondition("reflection needs a failing report"));
        }
        let reply = self.call(
            CallKind::Reflect,
            prompts::reflect(problem, steps, &report.feedback_text),
        )?;
        let text = reply.trim();
        if text.is_empty() {
            return Err(GatewayError::EmptyCompletion(CallKind::Reflect));
        }
        Ok(Reflection {
            text: text.to_string(),
            source_node,
        })
    }

    /// Turns a known-correct solution into ordered steps for the knowledge base.
    pub fn decompose_solution(&self, statement: &str, solution_code: &str) -> Result<Vec<Step>, GatewayError> {
        if solution_code.trim().is_empty() {
            return Err(GatewayError::Precondition("solution code is empty"));
        }
        let reply = self.call(CallKind::Decompose, prompts::decompose(statement, solution_code))?;
        split_steps(&reply).map_err(|e| match e {
            StepError::EmptyPlan => GatewayError::EmptyPlan,
            _ => GatewayError::EmptyPlan,
        })
    }
}
