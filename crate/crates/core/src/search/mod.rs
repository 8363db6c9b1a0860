//! The tree search: select, expand, simulate, reflect and graft,
//! backpropagate, repeated until a simulation is verified or the rollout
//! budget runs out.

pub mod config;
pub mod tree;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::{debug, info, warn};

pub use config::{ConfigError, SearchConfig};
pub use tree::{NodeOrigin, NodeStatus, SearchTree, TreeNode, TREE_VERSION};

use crate::embedding::{cosine, Embedder, EmbeddingError, EmbeddingVector};
use crate::gateway::{split_code_blocks, Gateway, GatewayError, Reflection};
use crate::kb::{KbError, KnowledgeBase};
use crate::problem::{prefix_text, Problem, Step};
use crate::sandbox::{CodeRunner, SandboxError, SandboxReport};
use crate::tokens::{TokenTotals, TokenUsage};

pub const RESULT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("expansion of node {0} produced no candidates")]
    ExpansionEmpty(usize),
    #[error("no simulated leaf to extract a path from")]
    NoSimulatedLeaf,
    #[error("writing run directory: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything a search talks to besides its own tree.
#[derive(Clone, Copy)]
pub struct SearchDeps<'a> {
    pub gateway: &'a Gateway,
    pub embedder: &'a dyn Embedder,
    pub kb: Option<&'a KnowledgeBase>,
    pub runner: &'a dyn CodeRunner,
}

/// `Q + beta * sqrt(ln N(s) / (1 + N(s,a))) + alpha * K`.
///
/// Visit counts are reals so the formula can be checked at non-integer
/// points. The exploration term is zero for an unvisited parent.
pub fn ucb_score(q: f64, visits: f64, parent_visits: f64, k: f64, beta: f64, alpha: f64) -> f64 {
    let explore = if parent_visits <= 1.0 {
        0.0
    } else {
        (parent_visits.ln() / (1.0 + visits)).sqrt()
    };
    q + beta * explore + alpha * k
}

pub fn selection_score(node: &TreeNode, parent_visits: u64, config: &SearchConfig) -> f64 {
    ucb_score(
        node.q,
        node.n as f64,
        parent_visits as f64,
        node.k,
        config.ucb_beta,
        config.kb_alpha,
    )
}

/// Index into `ids` of the best-scoring node; exact ties are broken by `rng`.
fn argmax_by_score<R: Rng>(ids: &[usize], scores: &[f64], rng: &mut R) -> usize {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..ids.len()).filter(|&i| scores[i] == best).collect();
    if tied.len() == 1 {
        tied[0]
    } else {
        tied[rng.random_range(0..tied.len())]
    }
}

fn best_child<R: Rng>(tree: &SearchTree, parent: usize, among: &[usize], config: &SearchConfig, rng: &mut R) -> usize {
    let parent_visits = tree.node(parent).n;
    let scores: Vec<f64> = among
        .iter()
        .map(|&c| selection_score(tree.node(c), parent_visits, config))
        .collect();
    among[argmax_by_score(among, &scores, rng)]
}

/// Walks from the root along the best-scoring child until a leaf.
pub fn select_leaf<R: Rng>(tree: &SearchTree, config: &SearchConfig, rng: &mut R) -> usize {
    let mut cur = SearchTree::ROOT;
    while !tree.is_leaf(cur) {
        let children = tree.node(cur).children.clone();
        cur = best_child(tree, cur, &children, config, rng);
    }
    cur
}

fn retrieval(
    deps: &SearchDeps<'_>,
    config: &SearchConfig,
    problem: &Problem,
    path: &[Step],
    action: &str,
) -> Result<f64, SearchError> {
    let kb = match deps.kb {
        Some(kb) if config.kb_alpha > 0.0 => kb,
        _ => return Ok(0.0),
    };
    let state = prefix_text(&problem.statement, path);
    Ok(kb.retrieval_score(deps.embedder, &state, action, problem.category_hint.as_deref())?)
}

/// What one expansion did.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Expansion {
    pub leaf: usize,
    pub proposed: Vec<String>,
    pub children: Vec<usize>,
    pub filtered: usize,
}

/// Greedy similarity filter in generation order. Returns the indices of the
/// kept candidates; the first candidate always survives an empty kept set.
pub fn filter_similar(
    candidates: &[EmbeddingVector],
    existing: &[EmbeddingVector],
    threshold: f64,
) -> Result<Vec<usize>, EmbeddingError> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let mut redundant = false;
        for other in kept.iter().map(|&j| &candidates[j]).chain(existing) {
            if cosine(c, other)? > threshold {
                redundant = true;
                break;
            }
        }
        if !redundant {
            kept.push(i);
        }
    }
    if kept.is_empty() && !candidates.is_empty() {
        kept.push(0);
    }
    Ok(kept)
}

/// Proposes up to `branching_b` next steps below `leaf`, drops near
/// duplicates, and attaches the survivors with their retrieval scores.
pub fn expand(
    tree: &mut SearchTree,
    leaf: usize,
    problem: &Problem,
    deps: &SearchDeps<'_>,
    config: &SearchConfig,
) -> Result<Expansion, SearchError> {
    let path = tree.path_steps(leaf);
    let reflection = tree.nearest_reflection(leaf).cloned();
    let mut proposals: Vec<Step> = Vec::new();
    for _ in 0..config.branching_b {
        match deps
            .gateway
            .propose_next_step(problem, &path, &proposals, reflection.as_ref())
        {
            Ok(step) => proposals.push(step),
            Err(GatewayError::EmptyCompletion(_)) => {
                warn!(leaf, "empty step proposal skipped");
            }
            Err(e) => return Err(e.into()),
        }
    }
    if proposals.is_empty() {
        return Err(SearchError::ExpansionEmpty(leaf));
    }

    let kept: Vec<usize> = if config.sim_filter {
        let texts: Vec<String> = proposals.iter().map(|s| s.text.clone()).collect();
        let vectors = deps.embedder.embed_batch(&texts)?;
        let existing_texts: Vec<String> = tree
            .node(leaf)
            .children
            .iter()
            .filter_map(|&c| tree.node(c).step.as_ref().map(|s| s.text.clone()))
            .collect();
        let existing = deps.embedder.embed_batch(&existing_texts)?;
        filter_similar(&vectors, &existing, config.sim_threshold)?
    } else {
        (0..proposals.len()).collect()
    };

    let mut children = Vec::with_capacity(kept.len());
    for &i in &kept {
        let step = proposals[i].clone();
        let k = retrieval(deps, config, problem, &path, &step.text)?;
        children.push(tree.add_child(leaf, step, k, NodeOrigin::Expanded));
    }
    debug!(leaf, proposed = proposals.len(), kept = children.len(), "expanded");
    Ok(Expansion {
        leaf,
        filtered: proposals.len() - children.len(),
        proposed: proposals.into_iter().map(|s| s.text).collect(),
        children,
    })
}

/// Result of simulating one node to a complete, executed plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutcome {
    pub node_id: usize,
    /// The completed plan. Equals the node's path when completion failed.
    pub full_steps: Vec<Step>,
    pub code: Option<String>,
    pub report: Option<SandboxReport>,
    /// Model score; absent when the evaluation call failed.
    pub r_llm: Option<f64>,
    pub reward: f64,
    pub first_error_step: Option<usize>,
    pub reflection: Option<Reflection>,
    /// Non-fatal problems met on the way, in order.
    pub warnings: Vec<String>,
}

impl SimulationOutcome {
    pub fn pass_rate(&self) -> f64 {
        self.report.as_ref().map_or(0.0, |r| r.pass_rate)
    }

    /// All public tests pass and the model score clears the threshold.
    pub fn is_success(&self, config: &SearchConfig) -> bool {
        self.report.as_ref().is_some_and(|r| r.all_passed())
            && self.r_llm.is_some_and(|s| s >= config.llm_success_threshold)
    }
}

/// Execution-weighted reward; falls back to the pass rate when the model
/// score is missing.
pub fn blend_reward(gamma: f64, pass_rate: f64, r_llm: Option<f64>) -> f64 {
    match r_llm {
        Some(r) => gamma * pass_rate + (1.0 - gamma) * r,
        None => pass_rate,
    }
}

fn degrade<T>(result: Result<T, GatewayError>, warnings: &mut Vec<String>) -> Result<Option<T>, SearchError> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.is_fatal() => Err(e.into()),
        Err(e) => {
            warn!(error = %e, "gateway call degraded");
            warnings.push(e.to_string());
            Ok(None)
        }
    }
}

fn failure_trace(report: &SandboxReport) -> String {
    match report.first_failure() {
        Some(v) => format!(
            "status: {}\nactual: {}\nstderr:\n{}",
            v.status.as_str(),
            v.actual_output.as_ref().map_or("<none>".to_string(), Value::to_string),
            v.stderr_excerpt
        ),
        None => String::new(),
    }
}

/// Completes the plan through `node`, generates and runs code, and scores it.
/// On a public-test failure the first bad step is localized and a reflection
/// is requested.
pub fn simulate_evaluate(
    tree: &SearchTree,
    node: usize,
    problem: &Problem,
    deps: &SearchDeps<'_>,
    config: &SearchConfig,
) -> Result<SimulationOutcome, SearchError> {
    let path = tree.path_steps(node);
    let mut warnings = Vec::new();
    let mut outcome = SimulationOutcome {
        node_id: node,
        full_steps: path.clone(),
        code: None,
        report: None,
        r_llm: None,
        reward: 0.0,
        first_error_step: None,
        reflection: None,
        warnings: Vec::new(),
    };

    let Some(full) = degrade(deps.gateway.complete_simulation(problem, &path), &mut warnings)? else {
        outcome.warnings = warnings;
        return Ok(outcome);
    };
    outcome.full_steps = full;
    let Some(code) = degrade(deps.gateway.generate_code(problem, &outcome.full_steps), &mut warnings)? else {
        outcome.warnings = warnings;
        return Ok(outcome);
    };
    let report = deps
        .runner
        .run_tests(&code, &problem.entry_point, &problem.public_tests)?;
    outcome.r_llm = degrade(
        deps.gateway.evaluate_solution(problem, &outcome.full_steps, &report),
        &mut warnings,
    )?;
    outcome.reward = blend_reward(config.eval_gamma, report.pass_rate, outcome.r_llm);

    if !report.all_passed() {
        if config.localize {
            if let Some(failed) = report.first_failure() {
                let blocks = split_code_blocks(&code).blocks;
                let test = &problem.public_tests[failed.test_index];
                let loc = degrade(
                    deps.gateway.localize_error(
                        problem,
                        &outcome.full_steps,
                        &blocks,
                        test,
                        &failure_trace(&report),
                    ),
                    &mut warnings,
                )?;
                if let Some(loc) = loc {
                    warnings.extend(loc.warning);
                    outcome.first_error_step = Some(loc.step_index);
                }
            }
        }
        outcome.reflection = degrade(
            deps.gateway.reflect(problem, &outcome.full_steps, &report, node),
            &mut warnings,
        )?;
    }
    outcome.code = Some(code);
    outcome.report = Some(report);
    outcome.warnings = warnings;
    Ok(outcome)
}

/// Grafts the verified steps of a failed simulation, those strictly between
/// the node's depth and the first bad step, as a chain below the node.
/// A step whose text already exists as a child at the graft point is not
/// duplicated; the chain continues from the existing child.
pub fn truncate_and_graft(
    tree: &mut SearchTree,
    outcome: &SimulationOutcome,
    problem: &Problem,
    deps: &SearchDeps<'_>,
    config: &SearchConfig,
) -> Result<Vec<usize>, SearchError> {
    let Some(e) = outcome.first_error_step else {
        return Ok(Vec::new());
    };
    let d = tree.depth(outcome.node_id);
    if e <= d + 1 {
        return Ok(Vec::new());
    }
    let mut cursor = outcome.node_id;
    let mut grafted = Vec::new();
    for step in outcome.full_steps.iter().take(e - 1).skip(d) {
        let existing = tree
            .node(cursor)
            .children
            .iter()
            .copied()
            .find(|&c| tree.node(c).step.as_ref().is_some_and(|s| s.text == step.text));
        if let Some(c) = existing {
            debug!(node = c, "graft reuses existing child");
            cursor = c;
            continue;
        }
        let path = tree.path_steps(cursor);
        let k = retrieval(deps, config, problem, &path, &step.text)?;
        cursor = tree.add_child(cursor, step.clone(), k, NodeOrigin::Grafted);
        grafted.push(cursor);
    }
    Ok(grafted)
}

/// Ranks leaves that have been visited, where a leaf is a visited node none of
/// whose children has been visited. Highest Q wins, then higher N, then a
/// draw from a generator seeded with `seed`.
pub fn best_leaf(tree: &SearchTree, seed: u64) -> Result<usize, SearchError> {
    let candidates: Vec<usize> = tree
        .nodes
        .iter()
        .filter(|n| n.id != SearchTree::ROOT && n.n >= 1)
        .filter(|n| n.children.iter().all(|&c| tree.node(c).n == 0))
        .map(|n| n.id)
        .collect();
    if candidates.is_empty() {
        return Err(SearchError::NoSimulatedLeaf);
    }
    let key = |id: usize| (tree.node(id).q, tree.node(id).n);
    let best = candidates
        .iter()
        .map(|&id| key(id))
        .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 || (b.0 == a.0 && b.1 > a.1) { b } else { a });
    let tied: Vec<usize> = candidates.into_iter().filter(|&id| key(id) == best).collect();
    if tied.len() == 1 {
        return Ok(tied[0]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(tied[rng.random_range(0..tied.len())])
}

pub fn extract_best_path(tree: &SearchTree, seed: u64) -> Result<Vec<Step>, SearchError> {
    best_leaf(tree, seed).map(|id| tree.path_steps(id))
}

/// Serialized summary of one simulation; leaves out wall times so result
/// files are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub node_id: usize,
    pub steps: usize,
    pub pass_rate: Option<f64>,
    pub r_llm: Option<f64>,
    pub reward: f64,
    pub first_error_step: Option<usize>,
    pub grafted: Vec<usize>,
    pub reflected: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub expansion: Expansion,
    pub simulations: Vec<OutcomeSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub version: u32,
    pub problem_id: String,
    pub final_code: String,
    pub final_steps: Vec<Step>,
    pub solved_in_sandbox: bool,
    pub iterations_used: usize,
    pub simulations: usize,
    /// Node whose path produced the final code.
    pub final_node: Option<usize>,
    pub token_totals: TokenTotals,
    pub iterations: Vec<IterationRecord>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub tree: SearchTree,
    #[serde(skip)]
    pub outcomes: Vec<SimulationOutcome>,
}

impl SearchResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes") + "\n"
    }
}

#[derive(Serialize)]
struct TokensFile<'a> {
    version: u32,
    totals: &'a TokenTotals,
    records: &'a [TokenUsage],
}

/// Writes `tree.json`, `result.json`, `tokens.json` and `transcript/`.
pub fn write_run_dir(dir: impl AsRef<Path>, result: &SearchResult, gateway: &Gateway) -> Result<(), SearchError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("tree.json"), result.tree.to_json())?;
    fs::write(dir.join("result.json"), result.to_json())?;
    let records = gateway.ledger().records();
    let tokens = TokensFile {
        version: RESULT_VERSION,
        totals: &result.token_totals,
        records: &records,
    };
    fs::write(
        dir.join("tokens.json"),
        serde_json::to_string_pretty(&tokens).expect("tokens serialize") + "\n",
    )?;
    let transcript = dir.join("transcript");
    if transcript.exists() {
        fs::remove_dir_all(&transcript)?;
    }
    gateway.write_transcript(transcript)?;
    Ok(())
}

fn summarize(outcome: &SimulationOutcome, grafted: Vec<usize>) -> OutcomeSummary {
    OutcomeSummary {
        node_id: outcome.node_id,
        steps: outcome.full_steps.len(),
        pass_rate: outcome.report.as_ref().map(|r| r.pass_rate),
        r_llm: outcome.r_llm,
        reward: outcome.reward,
        first_error_step: outcome.first_error_step,
        grafted,
        reflected: outcome.reflection.is_some(),
        warnings: outcome.warnings.clone(),
    }
}

/// Runs the search on one problem.
///
/// Ends early when a simulation passes every public test with a model score
/// at or above the threshold, returning that simulation's code. Otherwise,
/// after `rollout_max` iterations, code is generated from the path to the
/// best visited leaf.
pub fn run_search(problem: &Problem, deps: &SearchDeps<'_>, config: &SearchConfig) -> Result<SearchResult, SearchError> {
    config.validate()?;
    let started = Instant::now();
    let budget = config.problem_budget_ms.map(Duration::from_millis);
    let ledger_start = deps.gateway.ledger().len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut tree = SearchTree::new(config.rng_seed);
    let mut iterations = Vec::new();
    let mut outcomes: Vec<SimulationOutcome> = Vec::new();
    let mut warnings = Vec::new();
    let mut solved: Option<usize> = None;

    for iteration in 1..=config.rollout_max {
        if budget.is_some_and(|b| started.elapsed() >= b) {
            warn!(problem = %problem.id, iteration, "problem budget exhausted");
            warnings.push(format!("budget exhausted before iteration {iteration}"));
            break;
        }
        let leaf = select_leaf(&tree, config, &mut rng);
        let expansion = expand(&mut tree, leaf, problem, deps, config)?;
        let to_simulate = if config.simulate_all_children {
            expansion.children.clone()
        } else {
            vec![best_child(&tree, leaf, &expansion.children, config, &mut rng)]
        };
        let mut summaries = Vec::new();
        for node in to_simulate {
            let outcome = simulate_evaluate(&tree, node, problem, deps, config)?;
            let success = outcome.is_success(config);
            let grafted = if success {
                Vec::new()
            } else {
                truncate_and_graft(&mut tree, &outcome, problem, deps, config)?
            };
            let parent = tree.node(node).parent.expect("simulated nodes are never the root");
            if let Some(r) = &outcome.reflection {
                tree.node_mut(parent).reflection = Some(r.clone());
            } else if outcome.report.as_ref().is_some_and(|r| r.all_passed()) {
                tree.node_mut(parent).reflection = None;
            }
            tree.node_mut(node).status = if success {
                NodeStatus::TerminalSuccess
            } else {
                NodeStatus::Simulated
            };
            tree.backpropagate(node, outcome.reward);
            summaries.push(summarize(&outcome, grafted));
            outcomes.push(outcome);
            if success {
                solved = Some(outcomes.len() - 1);
                break;
            }
        }
        iterations.push(IterationRecord {
            iteration,
            expansion,
            simulations: summaries,
        });
        if solved.is_some() {
            break;
        }
    }

    let (final_code, final_steps, final_node) = match solved {
        Some(i) => {
            let o = &outcomes[i];
            info!(problem = %problem.id, node = o.node_id, "solved in sandbox");
            (o.code.clone().unwrap_or_default(), o.full_steps.clone(), Some(o.node_id))
        }
        None => {
            let leaf = best_leaf(&tree, config.rng_seed)?;
            let steps = tree.path_steps(leaf);
            let code = match deps.gateway.generate_code(problem, &steps) {
                Ok(code) => code,
                Err(e) if e.is_fatal() => return Err(e.into()),
                Err(e) => {
                    warnings.push(format!("final code generation failed: {e}"));
                    best_simulated_code(&outcomes).unwrap_or_default()
                }
            };
            (code, steps, Some(leaf))
        }
    };

    let records = deps.gateway.ledger().records();
    Ok(SearchResult {
        version: RESULT_VERSION,
        problem_id: problem.id.clone(),
        final_code,
        final_steps,
        solved_in_sandbox: solved.is_some(),
        iterations_used: iterations.len(),
        simulations: outcomes.len(),
        final_node,
        token_totals: TokenTotals::from_records(&records[ledger_start.min(records.len())..]),
        iterations,
        warnings,
        tree,
        outcomes,
    })
}

/// Code of the highest-reward simulation that produced any; earliest wins ties.
fn best_simulated_code(outcomes: &[SimulationOutcome]) -> Option<String> {
    outcomes
        .iter()
        .filter(|o| o.code.is_some())
        .fold(None::<&SimulationOutcome>, |best, o| match best {
            Some(b) if b.reward >= o.reward => Some(b),
            _ => Some(o),
        })
        .and_then(|o| o.code.clone())
}
