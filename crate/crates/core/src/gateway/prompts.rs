//! Prompt templates. Every reply format is line-oriented with a fixed tag
//! (`STEP:`, `SCORE:`, `FIRST_BAD_STEP:`) so the parsers can stay strict.

use std::fmt::Write as _;

use serde_json::Value;

use crate::problem::{join_steps, Problem, Step, TestCase};

pub const SYSTEM: &str = "You are an expert competitive programmer. You reason in short, \
concrete algorithmic steps and follow reply formats exactly.";

fn call(problem: &Problem, test: &TestCase) -> String {
    let args = test
        .input_args
        .iter()
        .map(|v| serde_json::to_string(v).expect("value serializes"))
        .collect::<Vec<_>>()
        .join(", ");
    format!("{}({args})", problem.entry_point)
}

fn value(v: &Value) -> String {
    serde_json::to_string(v).expect("value serializes")
}

pub fn problem_block(problem: &Problem) -> String {
    let mut out = format!("## Problem\n{}\n", problem.statement.trim());
    if !problem.signature_doc.trim().is_empty() {
        let _ = write!(out, "\n## Signature\n{}\n", problem.signature_doc.trim());
    }
    out.push_str("\n## Public tests\n");
    for t in &problem.public_tests {
        let _ = writeln!(out, "{} == {}", call(problem, t), value(&t.expected_output));
    }
    out
}

fn steps_section(title: &str, steps: &[Step], empty: &str) -> String {
    if steps.is_empty() {
        format!("\n## {title}\n{empty}\n")
    } else {
        format!("\n## {title}\n{}\n", join_steps(steps))
    }
}

pub fn expand(problem: &Problem, path: &[Step], siblings: &[Step], reflection: Option<&str>) -> String {
    let mut out = problem_block(problem);
    out.push_str(&steps_section("Steps so far", path, "(none yet)"));
    if !siblings.is_empty() {
        out.push_str(&steps_section("Already proposed for the next step", siblings, ""));
    }
    if let Some(r) = reflection {
        let _ = write!(out, "\n## Reflection on a failed attempt\n{}\n", r.trim());
    }
    out.push_str(
        "\n## Task\nPropose the single next algorithmic step. It must differ from every step \
         already proposed. Reply with exactly one line starting with `STEP:`.\n",
    );
    out
}

pub fn simulate(problem: &Problem, path: &[Step]) -> String {
    let mut out = problem_block(problem);
    out.push_str(&steps_section("Steps so far", path, "(none yet)"));
    out.push_str(
        "\n## Task\nComplete the plan. First repeat the steps above verbatim and in order, then \
         add every remaining step needed to solve the problem. Write one step per line, each \
         starting with `STEP:`.\n",
    );
    out
}

pub fn codegen(problem: &Problem, steps: &[Step]) -> String {
    let mut out = problem_block(problem);
    out.push_str(&steps_section("Algorithmic steps", steps, ""));
    let _ = write!(
        out,
        "\n## Task\nWrite a Python function `{}` that rigorously follows the steps. Before the \
         code of step k put a comment line `# STEP k`. Reply with one ```python code block.\n",
        problem.entry_point
    );
    out
}

pub fn direct(problem: &Problem) -> String {
    let mut out = problem_block(problem);
    let _ = write!(
        out,
        "\n## Task\nWrite a Python function `{}` that solves the problem. Reply with one \
         ```python code block.\n",
        problem.entry_point
    );
    out
}

pub fn evaluate(problem: &Problem, steps: &[Step], feedback: &str) -> String {
    let mut out = problem_block(problem);
    out.push_str(&steps_section("Algorithmic steps", steps, ""));
    let _ = write!(
        out,
        "\n## Sandbox feedback\n{}\n\n## Task\nJudge whether these steps solve the problem \
         correctly and efficiently, including edge cases the public tests miss. Reply with \
         `SCORE: <number between 0 and 1>`.\n",
        feedback.trim_end()
    );
    out
}

pub fn localize(
    problem: &Problem,
    steps: &[Step],
    blocks: &[String],
    failing: &TestCase,
    trace: &str,
) -> String {
    let mut out = problem_block(problem);
    out.push_str(&steps_section("Algorithmic steps", steps, ""));
    out.push_str("\n## Code blocks\n");
    for (i, b) in blocks.iter().enumerate() {
        let _ = writeln!(out, "### Block {}\n{}", i + 1, b.trim_end());
    }
    let _ = write!(
        out,
        "\n## Failing test\n{} should return {}\n\n## Trace\n{}\n\n## Task\nDebug the blocks in \
         order on this input and find the first step whose block is wrong. Reply with \
         `FIRST_BAD_STEP: <step number>`.\n",
        call(problem, failing),
        value(&failing.expected_output),
        trace.trim_end()
    );
    out
}

pub fn reflect(problem: &Problem, steps: &[Step], feedback: &str) -> String {
    let mut out = problem_block(problem);
    out.push_str(&steps_section("Algorithmic steps", steps, ""));
    let _ = write!(
        out,
        "\n## Sandbox feedback\n{}\n\n## Task\nExplain briefly why these steps fail and what \
         should change in the next attempt.\n",
        feedback.trim_end()
    );
    out
}

pub fn decompose(statement: &str, code: &str) -> String {
    format!(
        "## Problem\n{}\n\n## Correct solution\n```python\n{}\n```\n\n## Task\nDescribe the \
         algorithm of this solution as ordered steps. Write one step per line, each starting \
         with `STEP:`.\n",
        statement.trim(),
        code.trim_end()
    )
}
