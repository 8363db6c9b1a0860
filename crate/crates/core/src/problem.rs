//! Problems, test cases and algorithmic steps.
//!
//! A problem is stored as one JSON document (`*.problem.json`). Tests are
//! function-call argument lists rather than stdin/stdout transcripts, so every
//! candidate is a Python function named by `entry_point`.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Literal line prefix that opens every step in a plan.
pub const STEP_DELIMITER: &str = "STEP:";

/// Default absolute tolerance for float comparisons.
pub const DEFAULT_ABS_TOL: f64 = 1e-6;

/// Extension used for problem files inside a dataset directory.
pub const PROBLEM_SUFFIX: &str = ".problem.json";

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed problem file {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid field `{field}`: {message}")]
    Validation { field: &'static str, message: String },
}

impl ProblemError {
    fn validation(field: &'static str, message: impl Into<String>) -> Self {
        ProblemError::Validation {
            field,
            message: message.into(),
        }
    }

    /// The offending field for validation failures.
    pub fn field(&self) -> Option<&'static str> {
        match self {
            ProblemError::Validation { field, .. } => Some(field),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StepError {
    #[error("plan contains no nonempty step")]
    EmptyPlan,
    #[error("step text is empty")]
    EmptyStep,
    #[error("step text contains the `{STEP_DELIMITER}` delimiter")]
    ContainsDelimiter,
}

/// How a candidate's return value is compared with the expected output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Comparison {
    #[default]
    Exact,
    #[serde(rename = "float")]
    FloatTolerant {
        #[serde(default = "default_abs_tol")]
        abs_tol: f64,
    },
}

fn default_abs_tol() -> f64 {
    DEFAULT_ABS_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub input_args: Vec<Value>,
    pub expected_output: Value,
    #[serde(default)]
    pub comparison: Comparison,
}

impl TestCase {
    pub fn exact(input_args: Vec<Value>, expected_output: Value) -> Self {
        TestCase {
            input_args,
            expected_output,
            comparison: Comparison::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub statement: String,
    pub entry_point: String,
    #[serde(default)]
    pub signature_doc: String,
    pub public_tests: Vec<TestCase>,
    #[serde(default)]
    pub private_tests: Vec<TestCase>,
    #[serde(default)]
    pub category_hint: Option<String>,
}

impl Problem {
    /// Checks every invariant a loaded problem must satisfy.
    pub fn validate(&self) -> Result<(), ProblemError> {
        if self.id.trim().is_empty() {
            return Err(ProblemError::validation("id", "must be nonempty"));
        }
        if self.public_tests.is_empty() {
            return Err(ProblemError::validation(
                "public_tests",
                "at least one public test is required",
            ));
        }
        if !is_identifier(&self.entry_point) {
            return Err(ProblemError::validation(
                "entry_point",
                format!("`{}` is not a valid identifier", self.entry_point),
            ));
        }
        Ok(())
    }

    /// Upstream conversion for datasets without public tests: the first
    /// `count` private tests are copied into the public suite.
    pub fn promote_private_tests(&mut self, count: usize) {
        if self.public_tests.is_empty() {
            self.public_tests = self.private_tests.iter().take(count).cloned().collect();
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem serializes")
    }
}

fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c == '_' || c.is_ascii_alphabetic() => {}
        _ => return false,
    }
    chars.all(|c| c == '_' || c.is_ascii_alphanumeric())
}

pub fn load_problem(path: impl AsRef<Path>) -> Result<Problem, ProblemError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ProblemError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_problem(&text, path)
}

fn parse_problem(text: &str, path: &Path) -> Result<Problem, ProblemError> {
    let problem: Problem = serde_json::from_str(text).map_err(|source| ProblemError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    problem.validate()?;
    Ok(problem)
}

pub fn save_problem(problem: &Problem, path: impl AsRef<Path>) -> Result<(), ProblemError> {
    let path = path.as_ref();
    fs::write(path, problem.to_json()).map_err(|source| ProblemError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Lists the `*.problem.json` files of a dataset directory in name order.
pub fn dataset_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, ProblemError> {
    let dir = dir.as_ref();
    let io_err = |source| ProblemError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        let is_problem = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(PROBLEM_SUFFIX));
        if is_problem && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every problem of a dataset directory, rejecting duplicate ids.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Problem>, ProblemError> {
    let mut seen = BTreeSet::new();
    let mut problems = Vec::new();
    for path in dataset_files(dir)? {
        let problem = load_problem(&path)?;
        if !seen.insert(problem.id.clone()) {
            return Err(ProblemError::validation(
                "id",
                format!("duplicate id `{}` in {}", problem.id, path.display()),
            ));
        }
        problems.push(problem);
    }
    Ok(problems)
}

/// One natural-language algorithmic step. `index` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub text: String,
}

impl Step {
    /// Builds a step, collapsing whitespace runs in `text`.
    pub fn new(index: usize, text: &str) -> Result<Self, StepError> {
        let text = normalize_ws(text);
        if text.is_empty() {
            return Err(StepError::EmptyStep);
        }
        if text.contains(STEP_DELIMITER) {
            return Err(StepError::ContainsDelimiter);
        }
        Ok(Step { index, text })
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{STEP_DELIMITER} {}", self.text)
    }
}

pub(crate) fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits a plan into steps.
///
/// Every occurrence of `STEP:` opens a new segment. Text before the first
/// delimiter is treated as preamble and dropped; a plan with no delimiter at
/// all is a single step. Segments are whitespace-normalized and empty ones are
/// skipped.
pub fn split_steps(plan_text: &str) -> Result<Vec<Step>, StepError> {
    let mut segments: Vec<&str> = plan_text.split(STEP_DELIMITER).collect();
    if segments.len() > 1 {
        segments.remove(0);
    }
    let steps: Vec<Step> = segments
        .into_iter()
        .map(normalize_ws)
        .filter(|s| !s.is_empty())
        .enumerate()
        .map(|(i, text)| Step { index: i + 1, text })
        .collect();
    if steps.is_empty() {
        Err(StepError::EmptyPlan)
    } else {
        Ok(steps)
    }
}

pub fn join_steps(steps: &[Step]) -> String {
    steps
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Renumbers steps 1..n in order.
pub fn renumber(steps: &mut [Step]) {
    for (i, s) in steps.iter_mut().enumerate() {
        s.index = i + 1;
    }
}

/// `concat(problem, step_1, ..., step_j)`: the text indexed by the knowledge
/// base and queried during selection.
pub fn prefix_text(statement: &str, steps: &[Step]) -> String {
    steps.iter().fold(statement.trim().to_string(), |acc, s| {
        concat_state_action(&acc, &s.text)
    })
}

/// Appends one step to a state text. `prefix_text(p, s[..j])` equals
/// `concat_state_action(prefix_text(p, s[..j-1]), s[j-1])`.
pub fn concat_state_action(state_text: &str, action_text: &str) -> String {
    format!("{state_text}\n{STEP_DELIMITER} {action_text}")
}
