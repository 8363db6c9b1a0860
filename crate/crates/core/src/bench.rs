//! Dataset sweeps: pass@1 on private tests plus token consumption.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::embedding::Embedder;
use crate::gateway::{ChatBackend, Gateway, Sampling};
use crate::kb::KnowledgeBase;
use crate::par;
use crate::problem::{load_dataset, Problem, ProblemError};
use crate::sandbox::CodeRunner;
use crate::search::{run_search, SearchConfig, SearchDeps};
use crate::tokens::{TokenLedger, TokenTotals};

/// Ten minutes per problem unless the search config sets its own budget.
pub const DEFAULT_PROBLEM_BUDGET_MS: u64 = 600_000;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("dataset {0} contains no problem files")]
    EmptyDataset(PathBuf),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("reports cover different problems (only in first: {only_a:?}, only in second: {only_b:?})")]
    MismatchedDataset { only_a: Vec<String>, only_b: Vec<String> },
    #[error("{path}: {message}")]
    Report { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    RpmMcts,
    RpmMctsNoKb,
    BaseDirect,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::RpmMcts => "rpm_mcts",
            Method::RpmMctsNoKb => "rpm_mcts_no_kb",
            Method::BaseDirect => "base_direct",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub problem_id: String,
    pub method: Method,
    pub passed_private: bool,
    pub public_pass_rate: f64,
    pub tokens: TokenTotals,
    pub wall_ms: u64,
    pub iterations_used: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub method: Method,
    /// Sorted by problem id.
    pub records: Vec<BenchRecord>,
    pub pass_at_1: f64,
    pub mean_tokens: f64,
    pub total_tokens: u64,
}

impl BenchReport {
    pub fn from_records(method: Method, mut records: Vec<BenchRecord>) -> Self {
        records.sort_by(|a, b| a.problem_id.cmp(&b.problem_id));
        let n = records.len().max(1) as f64;
        let passed = records.iter().filter(|r| r.passed_private).count();
        let total_tokens: u64 = records.iter().map(|r| r.tokens.total_tokens).sum();
        BenchReport {
            method,
            pass_at_1: passed as f64 / n,
            mean_tokens: total_tokens as f64 / n,
            total_tokens,
            records,
        }
    }

    pub fn passed(&self) -> usize {
        self.records.iter().filter(|r| r.passed_private).count()
    }
}

#[derive(Serialize)]
struct Summary {
    method: Method,
    problems: usize,
    passed: usize,
    pass_at_1: f64,
    mean_tokens: f64,
    total_tokens: u64,
}

/// Shared collaborators of a sweep. Each problem gets a fresh backend
/// session and its own ledger that forwards into `ledger`.
#[derive(Clone)]
pub struct BenchDeps<'a> {
    pub backend: Arc<dyn ChatBackend>,
    /// Separate model for evaluate calls; `None` uses `backend`.
    pub evaluator: Option<Arc<dyn ChatBackend>>,
    pub sampling: Sampling,
    pub embedder: &'a dyn Embedder,
    pub kb: Option<&'a KnowledgeBase>,
    pub runner: &'a dyn CodeRunner,
    pub workers: usize,
    pub ledger: Arc<TokenLedger>,
}

pub fn run_bench(
    dataset_dir: impl AsRef<Path>,
    method: Method,
    config: &SearchConfig,
    deps: &BenchDeps<'_>,
) -> Result<BenchReport, BenchError> {
    let dir = dataset_dir.as_ref();
    let problems = load_dataset(dir)?;
    if problems.is_empty() {
        return Err(BenchError::EmptyDataset(dir.to_path_buf()));
    }
    Ok(run_problems(&problems, method, config, deps))
}

/// Evaluates every problem; a failing problem is recorded, never fatal.
pub fn run_problems(problems: &[Problem], method: Method, config: &SearchConfig, deps: &BenchDeps<'_>) -> BenchReport {
    let mut config = config.clone();
    config.problem_budget_ms.get_or_insert(DEFAULT_PROBLEM_BUDGET_MS);
    let records = par::map_with_workers(problems, deps.workers.max(1), |p| {
        evaluate_problem(p, method, &config, deps)
    });
    let report = BenchReport::from_records(method, records);
    info!(
        method = method.as_str(),
        problems = report.records.len(),
        pass_at_1 = report.pass_at_1,
        "bench finished"
    );
    report
}

fn evaluate_problem(problem: &Problem, method: Method, config: &SearchConfig, deps: &BenchDeps<'_>) -> BenchRecord {
    let started = Instant::now();
    let mut gateway = Gateway::with_ledger(
        deps.backend.fresh_session(),
        deps.sampling.clone(),
        TokenLedger::with_parent(deps.ledger.clone()),
    );
    if let Some(e) = &deps.evaluator {
        gateway = gateway.with_evaluator(e.fresh_session());
    }
    let mut record = BenchRecord {
        problem_id: problem.id.clone(),
        method,
        passed_private: false,
        public_pass_rate: 0.0,
        tokens: TokenTotals::default(),
        wall_ms: 0,
        iterations_used: 0,
        error: None,
    };

    let code = match method {
        Method::BaseDirect => gateway.generate_code_direct(problem).map_err(|e| e.to_string()),
        Method::RpmMcts | Method::RpmMctsNoKb => {
            let mut config = config.clone();
            let kb = if method == Method::RpmMctsNoKb {
                config.kb_alpha = 0.0;
                None
            } else {
                deps.kb
            };
            let search_deps = SearchDeps {
                gateway: &gateway,
                embedder: deps.embedder,
                kb,
                runner: deps.runner,
            };
            run_search(problem, &search_deps, &config)
                .map(|r| {
                    record.iterations_used = r.iterations_used;
                    r.final_code
                })
                .map_err(|e| e.to_string())
        }
    };

    match code {
        Ok(code) => {
            let held_out = if problem.private_tests.is_empty() {
                &problem.public_tests
            } else {
                &problem.private_tests
            };
            match deps.runner.run_tests(&code, &problem.entry_point, &problem.public_tests) {
                Ok(r) => record.public_pass_rate = r.pass_rate,
                Err(e) => record.error = Some(e.to_string()),
            }
            match deps.runner.run_tests(&code, &problem.entry_point, held_out) {
                Ok(r) => record.passed_private = r.all_passed(),
                Err(e) => record.error = Some(e.to_string()),
            }
        }
        Err(e) => {
            warn!(problem = %problem.id, error = %e, "problem failed");
            record.error = Some(e);
        }
    }
    record.tokens = gateway.ledger().totals();
    record.wall_ms = started.elapsed().as_millis() as u64;
    record
}

pub const REPORT_FILE: &str = "bench_report.jsonl";
pub const SUMMARY_FILE: &str = "bench_summary.json";

pub fn write_report(dir: impl AsRef<Path>, report: &BenchReport) -> Result<(), BenchError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut lines = String::new();
    for r in &report.records {
        lines.push_str(&serde_json::to_string(r).expect("record serializes"));
        lines.push('\n');
    }
    fs::write(dir.join(REPORT_FILE), lines)?;
    let summary = Summary {
        method: report.method,
        problems: report.records.len(),
        passed: report.passed(),
        pass_at_1: report.pass_at_1,
        mean_tokens: report.mean_tokens,
        total_tokens: report.total_tokens,
    };
    fs::write(
        dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;
    Ok(())
}

/// Reads `bench_report.jsonl` from a report directory (or the file itself).
pub fn load_report(path: impl AsRef<Path>) -> Result<BenchReport, BenchError> {
    let mut path = path.as_ref().to_path_buf();
    if path.is_dir() {
        path = path.join(REPORT_FILE);
    }
    let text = fs::read_to_string(&path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let record: BenchRecord = serde_json::from_str(line).map_err(|e| BenchError::Report {
            path: path.clone(),
            message: format!("line {}: {e}", i + 1),
        })?;
        records.push(record);
    }
    let method = records.first().map(|r| r.method).ok_or_else(|| BenchError::Report {
        path: path.clone(),
        message: "no records".into(),
    })?;
    Ok(BenchReport::from_records(method, records))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub problem_id: String,
    pub passed_a: bool,
    pub passed_b: bool,
    pub tokens_a: u64,
    pub tokens_b: u64,
    pub token_delta: i64,
}

/// Per-problem and aggregate differences, always `a - b`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub method_a: Method,
    pub method_b: Method,
    pub rows: Vec<DeltaRow>,
    pub pass_at_1_delta: f64,
    pub mean_tokens_delta: f64,
}

pub fn compare_reports(a: &BenchReport, b: &BenchReport) -> Result<Comparison, BenchError> {
    let ids_a: BTreeSet<&str> = a.records.iter().map(|r| r.problem_id.as_str()).collect();
    let ids_b: BTreeSet<&str> = b.records.iter().map(|r| r.problem_id.as_str()).collect();
    if ids_a != ids_b {
        return Err(BenchError::MismatchedDataset {
            only_a: ids_a.difference(&ids_b).map(|s| s.to_string()).collect(),
            only_b: ids_b.difference(&ids_a).map(|s| s.to_string()).collect(),
        });
    }
    let find = |r: &BenchReport, id: &str| r.records.iter().find(|x| x.problem_id == id).cloned().expect("id present");
    let rows = ids_a
        .iter()
        .map(|&id| {
            let (ra, rb) = (find(a, id), find(b, id));
            DeltaRow {
                problem_id: id.to_string(),
                passed_a: ra.passed_private,
                passed_b: rb.passed_private,
                tokens_a: ra.tokens.total_tokens,
                tokens_b: rb.tokens.total_tokens,
                token_delta: ra.tokens.total_tokens as i64 - rb.tokens.total_tokens as i64,
            }
        })
        .collect();
    Ok(Comparison {
        method_a: a.method,
        method_b: b.method,
        rows,
        pass_at_1_delta: a.pass_at_1 - b.pass_at_1,
        mean_tokens_delta: a.mean_tokens - b.mean_tokens,
    })
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.problem_id.len()).max().unwrap_or(0).max(7);
        let mut out = format!(
            "{:<width$}  {:>6}  {:>6}  {:>10}  {:>10}  {:>10}\n",
            "problem", "pass_a", "pass_b", "tokens_a", "tokens_b", "delta"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6}  {:>6}  {:>10}  {:>10}  {:>+10}",
                r.problem_id, r.passed_a, r.passed_b, r.tokens_a, r.tokens_b, r.token_delta
            );
        }
        let _ = writeln!(
            out,
            "\n{} vs {}: pass@1 delta {:+.4}, mean tokens delta {:+.1}",
            self.method_a.as_str(),
            self.method_b.as_str(),
            self.pass_at_1_delta,
            self.mean_tokens_delta
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("problem_id,passed_a,passed_b,tokens_a,tokens_b,token_delta\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.problem_id, r.passed_a, r.passed_b, r.tokens_a, r.tokens_b, r.token_delta
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::CallKind;

    fn record(id: &str, passed: bool, tokens: u64) -> BenchRecord {
        BenchRecord {
            problem_id: id.into(),
            method: Method::RpmMcts,
            passed_private: passed,
            public_pass_rate: 1.0,
            tokens: TokenTotals {
                total_tokens: tokens,
                ..Default::default()
            },
            wall_ms: 0,
            iterations_used: 1,
            error: None,
        }
    }

    #[test]
    fn pass_at_one_is_a_ratio_and_order_free() {
        let recs = vec![record("d", true, 10), record("a", false, 30), record("c", true, 20), record("b", true, 40)];
        let mut rev = recs.clone();
        rev.reverse();
        let r = BenchReport::from_records(Method::RpmMcts, recs);
        assert_eq!(r.pass_at_1, 0.75);
        assert_eq!(r.mean_tokens, 25.0);
        assert_eq!(r, BenchReport::from_records(Method::RpmMcts, rev));
        assert_eq!(r.records[0].problem_id, "a");
    }

    #[test]
    fn identical_reports_have_zero_deltas() {
        let r = BenchReport::from_records(Method::RpmMcts, vec![record("a", true, 5), record("b", false, 7)]);
        let c = compare_reports(&r, &r).unwrap();
        assert!(c.rows.iter().all(|row| row.token_delta == 0));
        assert_eq!((c.pass_at_1_delta, c.mean_tokens_delta), (0.0, 0.0));
    }

    #[test]
    fn aggregate_and_row_deltas() {
        let a = BenchReport::from_records(
            Method::RpmMcts,
            vec![record("a", true, 50), record("b", true, 10), record("c", true, 7), record("d", false, 1)],
        );
        let b = BenchReport::from_records(
            Method::BaseDirect,
            vec![record("a", true, 5), record("b", false, 12), record("c", true, 7), record("d", false, 1)],
        );
        let c = compare_reports(&a, &b).unwrap();
        assert!((c.pass_at_1_delta - 0.25).abs() < 1e-12);
        for row in &c.rows {
            let ta = a.records.iter().find(|r| r.problem_id == row.problem_id).unwrap().tokens.total_tokens;
            let tb = b.records.iter().find(|r| r.problem_id == row.problem_id).unwrap().tokens.total_tokens;
            assert_eq!(row.token_delta, ta as i64 - tb as i64);
        }
        let text = c.to_text();
        assert!(text.contains("+45"));
        assert!(text.contains("pass@1 delta +0.2500"));
        assert_eq!(c.to_csv().lines().count(), 5);
    }

    #[test]
    fn mismatched_ids_are_rejected() {
        let a = BenchReport::from_records(Method::RpmMcts, vec![record("a", true, 1)]);
        let b = BenchReport::from_records(Method::RpmMcts, vec![record("b", true, 1)]);
        match compare_reports(&a, &b) {
            Err(BenchError::MismatchedDataset { only_a, only_b }) => {
                assert_eq!((only_a, only_b), (vec!["a".to_string()], vec!["b".to_string()]));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn report_files_round_trip() {
        let mut recs = vec![record("a", true, 9), record("b", false, 3)];
        recs[0].tokens.by_kind.insert(CallKind::Codegen, Default::default());
        for r in &mut recs {
            r.method = Method::BaseDirect;
        }
        let r = BenchReport::from_records(Method::BaseDirect, recs);
        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &r).unwrap();
        assert_eq!(load_report(dir.path()).unwrap(), r);
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
        assert_eq!(summary["pass_at_1"], serde_json::json!(0.5));
        assert_eq!(summary["method"], serde_json::json!("base_direct"));
    }
}
