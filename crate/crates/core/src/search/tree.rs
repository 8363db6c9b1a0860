use serde::{Deserialize, Serialize};

use crate::gateway::Reflection;
use crate::problem::Step;

pub const TREE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Fresh,
    Simulated,
    TerminalSuccess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeOrigin {
    Root,
    Expanded,
    Grafted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    /// Absent only for the root, which stands for the problem itself.
    pub step: Option<Step>,
    /// Running mean of the rewards propagated through this node.
    pub q: f64,
    pub n: u64,
    /// Retrieval score, fixed at creation.
    pub k: f64,
    pub status: NodeStatus,
    pub origin: NodeOrigin,
    pub children: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection: Option<Reflection>,
}

/// Arena-backed search tree; node ids are indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTree {
    pub version: u32,
    pub rng_seed: u64,
    pub nodes: Vec<TreeNode>,
    /// Every backpropagated `(node_id, reward)` in order.
    pub update_log: Vec<(usize, f64)>,
}

impl Default for SearchTree {
    fn default() -> Self {
        SearchTree::new(0)
    }
}

impl SearchTree {
    pub const ROOT: usize = 0;

    pub fn new(rng_seed: u64) -> Self {
        SearchTree {
            version: TREE_VERSION,
            rng_seed,
            nodes: vec![TreeNode {
                id: Self::ROOT,
                parent: None,
                step: None,
                q: 0.0,
                n: 0,
                k: 0.0,
                status: NodeStatus::Fresh,
                origin: NodeOrigin::Root,
                children: Vec::new(),
                reflection: None,
            }],
            update_log: Vec::new(),
        }
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[Self::ROOT]
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn node_mut(&mut self, id: usize) -> &mut TreeNode {
        &mut self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn add_child(&mut self, parent: usize, step: Step, k: f64, origin: NodeOrigin) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            id,
            parent: Some(parent),
            step: Some(step),
            q: 0.0,
            n: 0,
            k,
            status: NodeStatus::Fresh,
            origin,
            children: Vec::new(),
            reflection: None,
        });
        self.nodes[parent].children.push(id);
        id
    }

    /// Node ids from the root down to `id`, inclusive.
    pub fn path_ids(&self, id: usize) -> Vec<usize> {
        let mut ids = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            ids.push(p);
            cur = p;
        }
        ids.reverse();
        ids
    }

    /// Steps on the root-to-`id` path, numbered from 1.
    pub fn path_steps(&self, id: usize) -> Vec<Step> {
        self.path_ids(id)
            .into_iter()
            .filter_map(|i| self.nodes[i].step.clone())
            .enumerate()
            .map(|(i, mut s)| {
                s.index = i + 1;
                s
            })
            .collect()
    }

    /// Number of steps on the path to `id`; zero for the root.
    pub fn depth(&self, id: usize) -> usize {
        self.path_ids(id).len() - 1
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.nodes[id].children.is_empty()
    }

    /// Reflection on `id` or its closest ancestor that has one.
    pub fn nearest_reflection(&self, id: usize) -> Option<&Reflection> {
        self.path_ids(id)
            .into_iter()
            .rev()
            .find_map(|i| self.nodes[i].reflection.as_ref())
    }

    /// Adds `reward` to every node from `id` up to the root: `N += 1` and
    /// `Q` moves to the running mean.
    pub fn backpropagate(&mut self, id: usize, reward: f64) {
        self.update_log.push((id, reward));
        let mut cur = Some(id);
        while let Some(i) = cur {
            let node = &mut self.nodes[i];
            node.n += 1;
            node.q += (reward - node.q) / node.n as f64;
            cur = node.parent;
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
