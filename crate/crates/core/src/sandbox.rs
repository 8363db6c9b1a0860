//! Runs candidate Python functions against test cases in a child process.
//!
//! The child is the bundled harness (`harness/harness.py`), started in its
//! own session with an address-space limit and a scratch working directory.
//! The engine watches progress line by line: a test that overruns its budget
//! gets a `timeout` verdict, a crashed child gets `runtime_error` for the test
//! in flight, and in both cases the harness is restarted for the remaining
//! tests until the total budget runs out.
//!
//! Isolation is best-effort: no network or syscall filtering.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::problem::TestCase;
use crate::sync::Semaphore;

pub const HARNESS_SOURCE: &str = include_str!("../harness/harness.py");

/// Cap on the stderr excerpt kept per verdict.
pub const STDERR_CAP: usize = 4096;

/// Extra wait beyond the per-test limit before the engine kills the child.
const WATCHDOG_GRACE: Duration = Duration::from_millis(1000);

const FEEDBACK_MAX_FAILURES: usize = 3;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("sandbox setup failed: {0}")]
    Setup(String),
    #[error("invalid sandbox request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxLimits {
    pub per_test_timeout_ms: u64,
    pub memory_mb: u64,
    pub total_timeout_ms: u64,
}

impl Default for SandboxLimits {
    fn default() -> Self {
        SandboxLimits {
            per_test_timeout_ms: 5000,
            memory_mb: 256,
            total_timeout_ms: 20000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Pass,
    WrongAnswer,
    RuntimeError,
    Timeout,
    HarnessError,
}

impl VerdictStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            VerdictStatus::Pass => "pass",
            VerdictStatus::WrongAnswer => "wrong_answer",
            VerdictStatus::RuntimeError => "runtime_error",
            VerdictStatus::Timeout => "timeout",
            VerdictStatus::HarnessError => "harness_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionVerdict {
    pub test_index: usize,
    pub status: VerdictStatus,
    pub actual_output: Option<Value>,
    pub stderr_excerpt: String,
    pub input_args: Vec<Value>,
    pub expected_output: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxReport {
    pub verdicts: Vec<ExecutionVerdict>,
    pub pass_rate: f64,
    pub wall_time_ms: u64,
    pub feedback_text: String,
}

impl SandboxReport {
    pub fn from_verdicts(verdicts: Vec<ExecutionVerdict>, wall_time_ms: u64) -> Self {
        let pass_rate = pass_rate(&verdicts);
        let mut report = SandboxReport {
            verdicts,
            pass_rate,
            wall_time_ms,
            feedback_text: String::new(),
        };
        report.feedback_text = render_feedback(&report);
        report
    }

    pub fn all_passed(&self) -> bool {
        !self.verdicts.is_empty() && self.verdicts.iter().all(|v| v.status == VerdictStatus::Pass)
    }

    pub fn passed(&self) -> usize {
        self.verdicts.iter().filter(|v| v.status == VerdictStatus::Pass).count()
    }

    pub fn first_failure(&self) -> Option<&ExecutionVerdict> {
        self.verdicts.iter().find(|v| v.status != VerdictStatus::Pass)
    }
}

/// `#pass / #verdicts`, rounded to the nearest 1e-9.
pub fn pass_rate(verdicts: &[ExecutionVerdict]) -> f64 {
    if verdicts.is_empty() {
        return 0.0;
    }
    let passed = verdicts.iter().filter(|v| v.status == VerdictStatus::Pass).count();
    ((passed as f64 / verdicts.len() as f64) * 1e9).round() / 1e9
}

fn compact(v: &Value) -> String {
    serde_json::to_string(v).expect("value serializes")
}

/// Deterministic summary of a report for model consumption.
pub fn render_feedback(report: &SandboxReport) -> String {
    let total = report.verdicts.len();
    let passed = report.passed();
    let mut out = format!("PASS RATE: {passed}/{total} ({})\n", report.pass_rate);
    if report.all_passed() {
        out.push_str("ALL TESTS PASSED\n");
        return out;
    }
    let failures: Vec<_> = report
        .verdicts
        .iter()
        .filter(|v| v.status != VerdictStatus::Pass)
        .collect();
    let shown = failures.len().min(FEEDBACK_MAX_FAILURES);
    let _ = writeln!(out, "FAILED TESTS (showing {shown} of {}):", failures.len());
    for v in failures.iter().take(shown) {
        let args = v.input_args.iter().map(compact).collect::<Vec<_>>().join(", ");
        let _ = writeln!(out, "- test {}: {}", v.test_index, v.status.as_str());
        let _ = writeln!(out, "  input: ({args})");
        let _ = writeln!(out, "  expected: {}", compact(&v.expected_output));
        match &v.actual_output {
            Some(a) => {
                let _ = writeln!(out, "  actual: {}", compact(a));
            }
            None => out.push_str("  actual: (none)\n"),
        }
        let err = v.stderr_excerpt.trim();
        if !err.is_empty() {
            let _ = writeln!(out, "  stderr: {}", err.replace('\n', "\n    "));
        }
    }
    out
}

fn excerpt(text: &str) -> String {
    if text.len() <= STDERR_CAP {
        return text.to_string();
    }
    let mut start = text.len() - STDERR_CAP;
    while !text.is_char_boundary(start) {
        start += 1;
    }
    text[start..].to_string()
}

/// Anything that can score candidate code against tests.
pub trait CodeRunner: Send + Sync {
    fn run_tests(
        &self,
        code: &str,
        entry_point: &str,
        tests: &[TestCase],
    ) -> Result<SandboxReport, SandboxError>;
}

#[derive(Serialize)]
struct Job<'a> {
    code: &'a str,
    entry_point: &'a str,
    tests: &'a [TestCase],
    limits: &'a SandboxLimits,
}

#[derive(Deserialize)]
struct HarnessLine {
    test_index: i64,
    status: String,
    #[serde(default)]
    actual: Option<Value>,
    #[serde(default)]
    stderr_excerpt: String,
}

/// Python sandbox with a concurrency cap.
pub struct PythonSandbox {
    interpreter: PathBuf,
    harness: PathBuf,
    limits: SandboxLimits,
    workers: Semaphore,
    _harness_dir: Option<tempfile::TempDir>,
}

impl PythonSandbox {
    /// Writes the bundled harness to a private directory and checks that
    /// `interpreter` can be started.
    pub fn new(interpreter: impl Into<PathBuf>, limits: SandboxLimits, workers: usize) -> Result<Self, SandboxError> {
        let dir = tempfile::Builder::new()
            .prefix("kbmcts-harness")
            .tempdir()
            .map_err(|e| SandboxError::Setup(format!("harness directory: {e}")))?;
        let harness = dir.path().join("harness.py");
        fs::write(&harness, HARNESS_SOURCE)
            .map_err(|e| SandboxError::Setup(format!("writing harness: {e}")))?;
        let mut sandbox = Self::with_harness(interpreter, harness, limits, workers)?;
        sandbox._harness_dir = Some(dir);
        Ok(sandbox)
    }

    /// Uses an existing harness file.
    pub fn with_harness(
        interpreter: impl Into<PathBuf>,
        harness: impl Into<PathBuf>,
        limits: SandboxLimits,
        workers: usize,
    ) -> Result<Self, SandboxError> {
        if limits.per_test_timeout_ms == 0 || limits.memory_mb == 0 || limits.total_timeout_ms == 0 {
            return Err(SandboxError::InvalidRequest("limits must be positive".into()));
        }
        let interpreter = interpreter.into();
        let harness = harness.into();
        if !harness.is_file() {
            return Err(SandboxError::Setup(format!("harness missing: {}", harness.display())));
        }
        let probe = Command::new(&interpreter)
            .arg("-c")
            .arg("import json, signal")
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map_err(|e| SandboxError::Setup(format!("interpreter {}: {e}", interpreter.display())))?;
        if !probe.success() {
            return Err(SandboxError::Setup(format!(
                "interpreter {} is not a usable Python",
                interpreter.display()
            )));
        }
        Ok(PythonSandbox {
            interpreter,
            harness,
            limits,
            workers: Semaphore::new(workers),
            _harness_dir: None,
        })
    }

    pub fn limits(&self) -> SandboxLimits {
        self.limits
    }

    fn spawn(&self, job_path: &Path, scratch: &Path) -> Result<Child, SandboxError> {
        let memory_bytes = self.limits.memory_mb.saturating_mul(1024 * 1024);
        let mut cmd = Command::new(&self.interpreter);
        cmd.arg(&self.harness)
            .arg(job_path)
            .current_dir(scratch)
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONHASHSEED", "0")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        // SAFETY: only async-signal-safe libc calls between fork and exec.
        unsafe {
            cmd.pre_exec(move || {
                if libc::setsid() == -1 {
                    return Err(std::io::Error::last_os_error());
                }
                let lim = libc::rlimit {
                    rlim_cur: memory_bytes as libc::rlim_t,
                    rlim_max: memory_bytes as libc::rlim_t,
                };
                libc::setrlimit(libc::RLIMIT_AS, &lim);
                Ok(())
            });
        }
        cmd.spawn()
            .map_err(|e| SandboxError::Setup(format!("spawning {}: {e}", self.interpreter.display())))
    }

    fn run_inner(
        &self,
        code: &str,
        entry_point: &str,
        tests: &[TestCase],
    ) -> Result<Vec<ExecutionVerdict>, SandboxError> {
        let scratch = tempfile::Builder::new()
            .prefix("kbmcts-run")
            .tempdir()
            .map_err(|e| SandboxError::Setup(format!("scratch directory: {e}")))?;
        let job_path = scratch.path().join("job.json");
        let start = Instant::now();
        let deadline = start + Duration::from_millis(self.limits.total_timeout_ms);
        let per_test = Duration::from_millis(self.limits.per_test_timeout_ms) + WATCHDOG_GRACE;
        let mut verdicts: Vec<Option<ExecutionVerdict>> = vec![None; tests.len()];
        let verdict = |i: usize, status, actual, stderr: &str| ExecutionVerdict {
            test_index: i,
            status,
            actual_output: actual,
            stderr_excerpt: excerpt(stderr),
            input_args: tests[i].input_args.clone(),
            expected_output: tests[i].expected_output.clone(),
        };

        let mut next = 0usize;
        'launch: while next < tests.len() && Instant::now() < deadline {
            let job = Job {
                code,
                entry_point,
                tests: &tests[next..],
                limits: &self.limits,
            };
            fs::write(&job_path, serde_json::to_vec(&job).expect("job serializes"))
                .map_err(|e| SandboxError::Setup(format!("writing job file: {e}")))?;
            let mut child = self.spawn(&job_path, scratch.path())?;
            let (tx, rx) = mpsc::channel();
            let stdout = child.stdout.take().expect("piped stdout");
            let reader = thread::spawn(move || {
                for line in BufReader::new(stdout).lines() {
                    let Ok(line) = line else { break };
                    if tx.send(line).is_err() {
                        break;
                    }
                }
            });
            let mut stderr = child.stderr.take().expect("piped stderr");
            let err_reader = thread::spawn(move || {
                let mut buf = Vec::new();
                let _ = stderr.by_ref().take(64 * 1024).read_to_end(&mut buf);
                String::from_utf8_lossy(&buf).into_owned()
            });

            let offset = next;
            let mut lines_seen = 0usize;
            let mut last_progress = Instant::now();
            let outcome = loop {
                let now = Instant::now();
                let wake = deadline.min(last_progress + per_test);
                match rx.recv_timeout(wake.saturating_duration_since(now)) {
                    Ok(line) => {
                        lines_seen += 1;
                        last_progress = Instant::now();
                        let parsed: Result<HarnessLine, _> = serde_json::from_str(&line);
                        match parsed {
                            Ok(h) if h.test_index == -1 => {
                                for i in next..tests.len() {
                                    verdicts[i] = Some(verdict(
                                        i,
                                        VerdictStatus::RuntimeError,
                                        None,
                                        &h.stderr_excerpt,
                                    ));
                                }
                                next = tests.len();
                            }
                            Ok(h) if h.test_index >= 0 && offset + h.test_index as usize == next => {
                                let status = match h.status.as_str() {
                                    "pass" => VerdictStatus::Pass,
                                    "wrong_answer" => VerdictStatus::WrongAnswer,
                                    "runtime_error" => VerdictStatus::RuntimeError,
                                    "timeout" => VerdictStatus::Timeout,
                                    _ => VerdictStatus::HarnessError,
                                };
                                verdicts[next] = Some(verdict(next, status, h.actual, &h.stderr_excerpt));
                                next += 1;
                            }
                            _ => break Exit::Malformed(line),
                        }
                        if next == tests.len() {
                            break Exit::Done;
                        }
                    }
                    Err(RecvTimeoutError::Timeout) => {
                        if Instant::now() >= deadline {
                            break Exit::Budget;
                        }
                        break Exit::Stalled;
                    }
                    Err(RecvTimeoutError::Disconnected) => break Exit::Closed,
                }
            };
            let status = match outcome {
                Exit::Done | Exit::Closed => wait_until(&mut child, deadline),
                _ => None,
            };
            let status = match status {
                Some(s) => Some(s),
                None => {
                    kill_group(&mut child);
                    None
                }
            };
            let _ = reader.join();
            let harness_stderr = err_reader.join().unwrap_or_default();

            match outcome {
                Exit::Done => break 'launch,
                Exit::Budget => break 'launch,
                Exit::Stalled => {
                    verdicts[next] = Some(verdict(
                        next,
                        VerdictStatus::Timeout,
                        None,
                        "killed by engine watchdog",
                    ));
                    next += 1;
                }
                Exit::Malformed(line) => {
                    let msg = format!("malformed harness output: {line}");
                    for i in next..tests.len() {
                        verdicts[i] = Some(verdict(i, VerdictStatus::HarnessError, None, &msg));
                    }
                    break 'launch;
                }
                Exit::Closed => {
                    if next >= tests.len() {
                        break 'launch;
                    }
                    match status {
                        // Exit codes 1 and 2 are the harness's own faults.
                        Some(s) if matches!(s.code(), Some(0..=2)) => {
                            let msg = format!(
                                "harness exited with {s} after {lines_seen} lines: {harness_stderr}"
                            );
                            for i in next..tests.len() {
                                verdicts[i] = Some(verdict(i, VerdictStatus::HarnessError, None, &msg));
                            }
                            break 'launch;
                        }
                        Some(s) => {
                            verdicts[next] = Some(verdict(
                                next,
                                VerdictStatus::RuntimeError,
                                None,
                                &format!("process died ({}) {harness_stderr}", describe(s)),
                            ));
                            next += 1;
                        }
                        None => break 'launch,
                    }
                }
            }
        }
        Ok(verdicts
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                v.unwrap_or_else(|| verdict(i, VerdictStatus::Timeout, None, "total time budget exhausted"))
            })
            .collect())
    }
}

enum Exit {
    Done,
    Budget,
    Stalled,
    Closed,
    Malformed(String),
}

fn describe(status: ExitStatus) -> String {
    match (status.code(), status.signal()) {
        (Some(c), _) => format!("exit code {c}"),
        (None, Some(s)) => format!("signal {s}"),
        _ => "unknown status".into(),
    }
}

fn wait_until(child: &mut Child, deadline: Instant) -> Option<ExitStatus> {
    loop {
        match child.try_wait() {
            Ok(Some(status)) => return Some(status),
            Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(2)),
            _ => return None,
        }
    }
}

fn kill_group(child: &mut Child) {
    let pid = child.id() as libc::pid_t;
    // SAFETY: signalling the process group created by setsid in the child.
    unsafe {
        libc::kill(-pid, libc::SIGKILL);
    }
    let _ = child.kill();
    let _ = child.wait();
}

impl CodeRunner for PythonSandbox {
    fn run_tests(
        &self,
        code: &str,
        entry_point: &str,
        tests: &[TestCase],
    ) -> Result<SandboxReport, SandboxError> {
        if tests.is_empty() {
            return Err(SandboxError::InvalidRequest("no tests to run".into()));
        }
        let _permit = self.workers.acquire();
        let start = Instant::now();
        let verdicts = self.run_inner(code, entry_point, tests)?;
        Ok(SandboxReport::from_verdicts(verdicts, start.elapsed().as_millis() as u64))
    }
}
