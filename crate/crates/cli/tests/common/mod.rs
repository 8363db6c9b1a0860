//! Scripted scenarios shared by the CLI and acceptance tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

use kbmcts::gateway::MockRecord;
use kbmcts::problem::{Problem, TestCase};
use kbmcts::sandbox::{PythonSandbox, SandboxLimits};
use kbmcts::tokens::CallKind;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn kbmcts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kbmcts"))
        .args(args)
        .env_remove("RPM_API_BASE")
        .env_remove("RPM_API_KEY")
        .output()
        .expect("binary runs")
}

pub fn sandbox(per_test_ms: u64, total_ms: u64, workers: usize) -> PythonSandbox {
    PythonSandbox::new(
        "python3",
        SandboxLimits {
            per_test_timeout_ms: per_test_ms,
            memory_mb: 256,
            total_timeout_ms: total_ms,
        },
        workers,
    )
    .expect("python3 available")
}

pub fn write_script(path: &Path, records: &[MockRecord]) {
    std::fs::write(path, serde_json::to_string_pretty(records).unwrap()).unwrap();
}

pub fn write_problem(dir: &Path, problem: &Problem) -> PathBuf {
    let path = dir.join(format!("{}.problem.json", problem.id));
    std::fs::write(&path, problem.to_json()).unwrap();
    path
}

pub fn fenced(code: &str) -> String {
    format!("```python\n{code}```")
}

fn case(args: Value, expected: Value) -> TestCase {
    TestCase::exact(args.as_array().unwrap().clone(), expected)
}

// End-to-end scenario: the root proposes three first steps. Only the branch
// starting with READ completes to a three-step plan whose code passes; the
// other two branches keep failing however deep they go.

pub const READ: &str = "Read the integers a and b";
pub const ADD: &str = "Add a and b to get the total";
pub const RETURN: &str = "Return the total";
pub const DIFF: &str = "Compute the difference a minus b";
pub const MUL: &str = "Multiply a by b";

pub const PASSING_CODE: &str = "def add(a, b):\n    # STEP 1\n    x, y = a, b\n    # STEP 2\n    total = x + y\n    # STEP 3\n    return total\n";

pub fn add_problem() -> Problem {
    Problem {
        id: "add".into(),
        statement: "Return the sum of two integers a and b.".into(),
        entry_point: "add".into(),
        signature_doc: "def add(a: int, b: int) -> int".into(),
        public_tests: vec![case(json!([1, 2]), json!(3)), case(json!([-4, 4]), json!(0))],
        private_tests: vec![case(json!([10, 5]), json!(15))],
        category_hint: Some("math".into()),
    }
}

fn failing_branch(step: &str, code: &str) -> Vec<MockRecord> {
    vec![
        MockRecord::new(CallKind::Expand, format!("STEP: {step}")).when(step).repeat(),
        MockRecord::new(CallKind::Simulate, format!("STEP: {step}\n").repeat(8)).when(step).repeat(),
        MockRecord::new(CallKind::Codegen, fenced(code)).when(step).repeat(),
        MockRecord::new(CallKind::Evaluate, "SCORE: 0.0").when(step).repeat(),
    ]
}

pub fn e2e_script() -> Vec<MockRecord> {
    let root = "## Steps so far\n(none yet)";
    let mut records = vec![
        MockRecord::new(CallKind::Expand, format!("STEP: {DIFF}")).when(root),
        MockRecord::new(CallKind::Expand, format!("STEP: {MUL}")).when(root),
        MockRecord::new(CallKind::Expand, format!("STEP: {READ}")).when(root),
        MockRecord::new(CallKind::Expand, format!("STEP: {ADD}")).when(READ).repeat(),
        MockRecord::new(CallKind::Simulate, format!("STEP: {READ}\nSTEP: {ADD}\nSTEP: {RETURN}"))
            .when(READ)
            .repeat(),
        MockRecord::new(CallKind::Codegen, fenced(PASSING_CODE)).when(READ).repeat(),
        MockRecord::new(CallKind::Evaluate, "SCORE: 1.0").when(READ).repeat(),
    ];
    records.extend(failing_branch(DIFF, "def add(a, b):\n    # STEP 1\n    return a - b\n"));
    records.extend(failing_branch(MUL, "def add(a, b):\n    # STEP 1\n    return a * b\n"));
    records.push(MockRecord::new(CallKind::Localize, "FIRST_BAD_STEP: 1").repeat());
    records.push(MockRecord::new(CallKind::Reflect, "The plan computes the wrong value.").repeat());
    records
}

// pass@1 dataset: four problems, each with its own script keyed on a
// marker in the statement. Problems 0..3 get correct code; problem 3 gets
// code that fails its private tests.

pub fn bench_problem(i: usize) -> Problem {
    Problem {
        id: format!("p{i}"),
        statement: format!("Task P{i}: return x plus {i}."),
        entry_point: "f".into(),
        signature_doc: "def f(x: int) -> int".into(),
        public_tests: vec![case(json!([1]), json!(1 + i)), case(json!([5]), json!(5 + i))],
        private_tests: vec![case(json!([100]), json!(100 + i)), case(json!([-3]), json!(-3 + i as i64))],
        category_hint: Some("math".into()),
    }
}

pub fn bench_script(solved: &[bool]) -> Vec<MockRecord> {
    let mut records = Vec::new();
    for (i, &ok) in solved.iter().enumerate() {
        let marker = format!("Task P{i}:");
        let step = format!("Add {i} to x");
        let code = if ok {
            format!("def f(x):\n    # STEP 1\n    return x + {i}\n")
        } else {
            "def f(x):\n    # STEP 1\n    return x\n".to_string()
        };
        records.extend([
            MockRecord::new(CallKind::Expand, format!("STEP: {step}")).when(&marker).repeat(),
            MockRecord::new(CallKind::Simulate, format!("STEP: {step}\n").repeat(8)).when(&marker).repeat(),
            MockRecord::new(CallKind::Codegen, fenced(&code)).when(&marker).repeat(),
            MockRecord::new(CallKind::Evaluate, if ok { "SCORE: 1.0" } else { "SCORE: 0.4" })
                .when(&marker)
                .repeat(),
        ]);
    }
    records.push(MockRecord::new(CallKind::Localize, "FIRST_BAD_STEP: 1").repeat());
    records.push(MockRecord::new(CallKind::Reflect, "Off by a constant.").repeat());
    records
}

// Duplicate-heavy corpus. Each problem's root proposes a misleading step X,
// a near-duplicate X2 of it, and the right step Y. A knowledge base built
// from the X prefixes ranks X > X2 > Y, so an unfiltered search spends an
// iteration on X2 before it reaches Y.

pub struct DupProblem {
    pub problem: Problem,
    pub x: String,
    pub x2: String,
    pub y: String,
    pub y_next: String,
}

pub fn dup_problem(i: usize) -> DupProblem {
    let problem = Problem {
        id: format!("dup{i:02}"),
        statement: format!(
            "Case {i}: given a list of integers xs, return the sum of all elements plus {i}. \
             The list may be empty and may contain negative values."
        ),
        entry_point: "solve".into(),
        signature_doc: "def solve(xs: list[int]) -> int".into(),
        public_tests: vec![case(json!([[1, 2, 3]]), json!(6 + i)), case(json!([[]]), json!(i))],
        private_tests: vec![case(json!([[-5, 5, 7]]), json!(7 + i))],
        category_hint: Some("math".into()),
    };
    DupProblem {
        problem,
        x: format!("Sort the list in ascending order for case {i}"),
        x2: format!("Sort the list into ascending order for case {i}"),
        y: format!("Accumulate a running total over the list for case {i}"),
        y_next: format!("Add {i} to the running total and return it"),
    }
}

pub fn dup_script(d: &DupProblem, i: usize) -> Vec<MockRecord> {
    let root = "## Steps so far\n(none yet)";
    let good = format!("def solve(xs):\n    # STEP 1\n    total = sum(xs)\n    # STEP 2\n    return total + {i}\n");
    let bad = "def solve(xs):\n    # STEP 1\n    xs = sorted(xs)\n    return (xs[0] if xs else 0) - 1000\n";
    let mut records = vec![
        MockRecord::new(CallKind::Expand, format!("STEP: {}", d.x)).when(root),
        MockRecord::new(CallKind::Expand, format!("STEP: {}", d.x2)).when(root),
        MockRecord::new(CallKind::Expand, format!("STEP: {}", d.y)).when(root),
    ];
    for (step, next) in [(&d.x, "Take the first element of the sorted list"), (&d.x2, "Take the smallest element")] {
        records.extend([
            MockRecord::new(CallKind::Expand, format!("STEP: {next}")).when(step.as_str()).repeat(),
            MockRecord::new(CallKind::Simulate, format!("STEP: {step}\nSTEP: {next}\nSTEP: Return it"))
                .when(step.as_str())
                .repeat(),
            MockRecord::new(CallKind::Codegen, fenced(bad)).when(step.as_str()).repeat(),
            MockRecord::new(CallKind::Evaluate, "SCORE: 0.0").when(step.as_str()).repeat(),
        ]);
    }
    records.extend([
        MockRecord::new(CallKind::Expand, format!("STEP: {}", d.y_next)).when(d.y.as_str()).repeat(),
        MockRecord::new(CallKind::Simulate, format!("STEP: {}\nSTEP: {}", d.y, d.y_next))
            .when(d.y.as_str())
            .repeat(),
        MockRecord::new(CallKind::Codegen, fenced(&good)).when(d.y.as_str()).repeat(),
        MockRecord::new(CallKind::Evaluate, "SCORE: 1.0").when(d.y.as_str()).repeat(),
        MockRecord::new(CallKind::Localize, "FIRST_BAD_STEP: 1").repeat(),
        MockRecord::new(CallKind::Reflect, "The chosen element is not the requested aggregate.").repeat(),
    ]);
    records
}
