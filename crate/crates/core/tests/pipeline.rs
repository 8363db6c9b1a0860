//! Cross-module behaviour with the real Python sandbox and the scripted mock.

use std::sync::Arc;

use serde_json::json;

use kbmcts::bench::{run_problems, BenchDeps, Method};
use kbmcts::embedding::{Embedder, HashedTrigramEmbedder};
use kbmcts::gateway::{Gateway, MockRecord, Sampling, ScriptedMock};
use kbmcts::kb::{build_kb, default_categories, CorpusItem, KnowledgeBase};
use kbmcts::par::Strategy;
use kbmcts::problem::{split_steps, Problem, Step, TestCase};
use kbmcts::sandbox::{CodeRunner, PythonSandbox, SandboxLimits};
use kbmcts::search::{run_search, SearchConfig, SearchDeps};
use kbmcts::tokens::{CallKind, TokenLedger};

fn sandbox() -> PythonSandbox {
    PythonSandbox::new(
        "python3",
        SandboxLimits {
            per_test_timeout_ms: 2000,
            memory_mb: 256,
            total_timeout_ms: 10_000,
        },
        4,
    )
    .unwrap()
}

fn problem(id: &str, marker: &str, offset: i64) -> Problem {
    Problem {
        id: id.into(),
        statement: format!("{marker} return x plus {offset}."),
        entry_point: "f".into(),
        signature_doc: String::new(),
        public_tests: vec![TestCase::exact(vec![json!(1)], json!(1 + offset))],
        private_tests: vec![TestCase::exact(vec![json!(9)], json!(9 + offset))],
        category_hint: None,
    }
}

fn code_reply(body: &str) -> String {
    format!("Here you go.\n```python\ndef f(x):\n    # STEP 1\n    {body}\n```\n")
}

#[test]
fn generated_code_from_a_plan_runs_in_the_sandbox() {
    let p = problem("p", "Task A:", 2);
    let gw = Gateway::new(
        Arc::new(ScriptedMock::new(vec![MockRecord::new(CallKind::Codegen, code_reply("return x + 2"))])),
        Sampling::default(),
    );
    let steps = split_steps("STEP: add two to x").unwrap();
    let code = gw.generate_code(&p, &steps).unwrap();
    let report = sandbox().run_tests(&code, "f", &p.public_tests).unwrap();
    assert!(report.all_passed(), "{}", report.feedback_text);
    assert_eq!(gw.ledger().len(), 1);
}

#[test]
fn direct_baseline_makes_one_codegen_call_per_problem() {
    let problems = vec![problem("a", "Task A:", 1), problem("b", "Task B:", 2), problem("c", "Task C:", 3)];
    let backend = Arc::new(ScriptedMock::new(vec![
        MockRecord::new(CallKind::Codegen, code_reply("return x + 1")).when("Task A:").repeat(),
        MockRecord::new(CallKind::Codegen, code_reply("return x + 2")).when("Task B:").repeat(),
        MockRecord::new(CallKind::Codegen, code_reply("return x")).when("Task C:").repeat(),
    ]));
    let embedder = HashedTrigramEmbedder::new(32);
    let runner = sandbox();
    let ledger = Arc::new(TokenLedger::new());
    let deps = BenchDeps {
        backend,
        evaluator: None,
        sampling: Sampling::default(),
        embedder: &embedder,
        kb: None,
        runner: &runner,
        workers: 3,
        ledger: ledger.clone(),
    };
    let report = run_problems(&problems, Method::BaseDirect, &SearchConfig::default(), &deps);
    for r in &report.records {
        assert_eq!(r.tokens.calls, 1, "{}", r.problem_id);
        assert_eq!(r.tokens.by_kind[&CallKind::Codegen].calls, 1);
    }
    let passed: Vec<bool> = report.records.iter().map(|r| r.passed_private).collect();
    assert_eq!(passed, [true, true, false]);
    assert_eq!(ledger.totals().calls, 3);
}

#[test]
fn a_failing_problem_is_recorded_not_fatal() {
    let problems = vec![problem("ok", "Task A:", 1), problem("broken", "Task Z:", 1)];
    // Nothing matches the second problem, so its search aborts.
    let backend = Arc::new(ScriptedMock::new(vec![
        MockRecord::new(CallKind::Expand, "STEP: add one").when("Task A:").repeat(),
        MockRecord::new(CallKind::Simulate, "STEP: add one").when("Task A:").repeat(),
        MockRecord::new(CallKind::Codegen, code_reply("return x + 1")).when("Task A:").repeat(),
        MockRecord::new(CallKind::Evaluate, "SCORE: 1.0").when("Task A:").repeat(),
    ]));
    let embedder = HashedTrigramEmbedder::new(32);
    let runner = sandbox();
    let deps = BenchDeps {
        backend,
        evaluator: None,
        sampling: Sampling::default(),
        embedder: &embedder,
        kb: None,
        runner: &runner,
        workers: 2,
        ledger: Arc::new(TokenLedger::new()),
    };
    let report = run_problems(&problems, Method::RpmMcts, &SearchConfig::default(), &deps);
    let broken = report.records.iter().find(|r| r.problem_id == "broken").unwrap();
    let ok = report.records.iter().find(|r| r.problem_id == "ok").unwrap();
    assert!(broken.error.as_deref().is_some_and(|e| e.contains("no response")), "{:?}", broken.error);
    assert!(!broken.passed_private);
    assert!(ok.passed_private && ok.error.is_none());
    assert_eq!(report.pass_at_1, 0.5);
}

fn corpus() -> Vec<CorpusItem> {
    let steps = |texts: &[&str]| texts.iter().enumerate().map(|(i, t)| Step::new(i + 1, t).unwrap()).collect();
    vec![
        CorpusItem {
            problem_id: "s1".into(),
            statement: "Return the largest value in a list.".into(),
            category: "searching".into(),
            steps: steps(&["Track the maximum so far", "Scan every element", "Return the maximum"]),
        },
        CorpusItem {
            problem_id: "s2".into(),
            statement: "Count the vowels in a string.".into(),
            category: "strings".into(),
            steps: steps(&["Lowercase the string", "Count characters in aeiou"]),
        },
    ]
}

#[test]
fn saved_knowledge_base_scores_identically_after_reload() {
    let embedder = HashedTrigramEmbedder::new(128);
    let categories: Vec<String> = default_categories();
    let kb = build_kb(&corpus(), &embedder, &categories).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kb.json");
    kb.save(&path).unwrap();
    let loaded = KnowledgeBase::load(&path).unwrap();
    assert_eq!(loaded.len(), 5);
    for (state, action) in [
        ("Return the largest value in a list.", "Track the maximum so far"),
        ("Find the smallest value.", "Scan every element"),
        ("Count the vowels.", "Count characters"),
    ] {
        let a = kb.retrieval_score(&embedder, state, action, None).unwrap();
        let b = loaded.retrieval_score(&embedder, state, action, None).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn sequential_and_parallel_scans_agree() {
    let embedder = HashedTrigramEmbedder::new(64);
    let kb = build_kb(&corpus(), &embedder, &default_categories()).unwrap();
    for text in ["largest value", "vowels", "zzz", "Scan every element of the list"] {
        let q = embedder.embed(text).unwrap();
        for category in [None, Some("searching"), Some("graphs")] {
            let s = kb.max_similarity(&q, category, Strategy::Sequential).unwrap();
            let p = kb.max_similarity(&q, category, Strategy::Parallel).unwrap();
            assert_eq!(s.to_bits(), p.to_bits());
        }
    }
}

#[test]
fn knowledge_base_steers_the_first_simulation() {
    // Two root proposals, one of which is a stored prefix. With retrieval on,
    // the stored prefix is simulated first and solves the problem.
    let p = Problem {
        id: "max".into(),
        statement: "Return the largest value in a list.".into(),
        entry_point: "f".into(),
        signature_doc: String::new(),
        public_tests: vec![TestCase::exact(vec![json!([3, 9, 2])], json!(9))],
        private_tests: vec![],
        category_hint: Some("searching".into()),
    };
    let script = || {
        vec![
            MockRecord::new(CallKind::Expand, "STEP: Sort the list descending").when("(none yet)"),
            MockRecord::new(CallKind::Expand, "STEP: Track the maximum so far").when("(none yet)"),
            MockRecord::new(CallKind::Expand, "STEP: Scan every element").repeat(),
            MockRecord::new(CallKind::Simulate, "STEP: Track the maximum so far\nSTEP: Return it")
                .when("Track the maximum")
                .repeat(),
            MockRecord::new(CallKind::Simulate, "STEP: Sort the list descending\nSTEP: Return the last")
                .when("Sort the list")
                .repeat(),
            MockRecord::new(CallKind::Codegen, code_reply("return max(x)")).when("Track the maximum").repeat(),
            MockRecord::new(CallKind::Codegen, code_reply("return sorted(x)[0]")).when("Sort the list").repeat(),
            MockRecord::new(CallKind::Evaluate, "SCORE: 1.0").repeat(),
            MockRecord::new(CallKind::Localize, "FIRST_BAD_STEP: 1").repeat(),
            MockRecord::new(CallKind::Reflect, "Wrong element.").repeat(),
        ]
    };
    let embedder = HashedTrigramEmbedder::new(128);
    let kb = build_kb(&corpus(), &embedder, &default_categories()).unwrap();
    let runner = sandbox();
    let gw = Gateway::new(Arc::new(ScriptedMock::new(script())), Sampling::default());
    let deps = SearchDeps {
        gateway: &gw,
        embedder: &embedder,
        kb: Some(&kb),
        runner: &runner,
    };
    let config = SearchConfig {
        branching_b: 2,
        ..SearchConfig::default()
    };
    let result = run_search(&p, &deps, &config).unwrap();
    assert!(result.solved_in_sandbox);
    assert_eq!(result.iterations_used, 1);
    assert_eq!(result.simulations, 1);
    assert_eq!(result.final_steps[0].text, "Track the maximum so far");
}
