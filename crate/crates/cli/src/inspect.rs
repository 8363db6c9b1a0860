use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use kbmcts::search::{best_leaf, NodeStatus, SearchTree};

/// Accepts a run directory or a `tree.json` path.
pub fn tree_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("tree.json")
    } else {
        path.to_path_buf()
    }
}

pub fn load_tree(path: &Path) -> Result<SearchTree> {
    let path = tree_path(path);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    SearchTree::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn status(s: NodeStatus) -> &'static str {
    match s {
        NodeStatus::Fresh => "fresh",
        NodeStatus::Simulated => "simulated",
        NodeStatus::TerminalSuccess => "terminal_success",
    }
}

/// One header line, then one row per node in depth-first order. Rows on the
/// path to the best visited leaf start with `*`.
pub fn render(tree: &SearchTree) -> String {
    let best: BTreeSet<usize> = best_leaf(tree, tree.rng_seed)
        .map(|leaf| tree.path_ids(leaf).into_iter().collect())
        .unwrap_or_default();
    let mut out = format!(
        "  {:>4} {:>5} {:>7} {:>4} {:>7} {:<16} step\n",
        "node", "depth", "Q", "N", "K", "status"
    );
    let mut stack = vec![(SearchTree::ROOT, 0usize)];
    while let Some((id, depth)) = stack.pop() {
        let node = tree.node(id);
        let text = node.step.as_ref().map_or("(problem)", |s| s.text.as_str());
        let _ = writeln!(
            out,
            "{} {:>4} {:>5} {:>7.4} {:>4} {:>7.4} {:<16} {}{}",
            if best.contains(&id) { '*' } else { ' ' },
            id,
            depth,
            node.q,
            node.n,
            node.k,
            status(node.status),
            "  ".repeat(depth),
            text
        );
        for &c in node.children.iter().rev() {
            stack.push((c, depth + 1));
        }
    }
    out
}
