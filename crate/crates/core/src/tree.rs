//! Arena-backed search tree with per-node visit statistics.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{parse_step, GrammarError, Problem, Step, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("value {0} outside [-1, 1]")]
    ValueOutOfRange(f64),
    #[error("malformed tree dump: {0}")]
    MalformedDump(String),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    /// `None` only for the root.
    pub step: Option<Step>,
    pub prior: f64,
    pub visits: u32,
    pub value_sum: f64,
    pub leaf_value: Option<f64>,
    pub depth: usize,
    pub children: Vec<NodeId>,
    pub is_terminal: bool,
    pub is_correct: Option<bool>,
    pub expanded: bool,
    /// Expansion produced no parsable step; excluded from selection.
    pub dead_end: bool,
}

impl SearchNode {
    /// Running mean of backed-up values, zero before the first visit.
    pub fn q(&self) -> f64 {
        self.value_sum / f64::from(self.visits.max(1))
    }
}

#[derive(Debug, Clone)]
pub struct SearchTree {
    pub problem: Problem,
    pub rng_seed: u64,
    nodes: Vec<SearchNode>,
    backprop_log: Vec<(NodeId, f64)>,
}

impl SearchTree {
    pub const ROOT: NodeId = NodeId(0);

    pub fn new(problem: Problem, rng_seed: u64) -> Self {
        let root = SearchNode {
            id: Self::ROOT,
            parent: None,
            step: None,
            prior: 1.0,
            visits: 0,
            value_sum: 0.0,
            leaf_value: None,
            depth: 0,
            children: Vec::new(),
            is_terminal: false,
            is_correct: None,
            expanded: false,
            dead_end: false,
        };
        SearchTree { problem, rng_seed, nodes: vec![root], backprop_log: Vec::new() }
    }

    pub fn root(&self) -> NodeId {
        Self::ROOT
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&SearchNode, TreeError> {
        self.nodes.get(id.0).ok_or(TreeError::UnknownNode(id))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut SearchNode, TreeError> {
        self.nodes.get_mut(id.0).ok_or(TreeError::UnknownNode(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SearchNode> {
        self.nodes.iter()
    }

    /// Every `(node, value)` passed to [`SearchTree::backpropagate`], in order.
    pub fn backprop_log(&self) -> &[(NodeId, f64)] {
        &self.backprop_log
    }

    /// Attaches a child; terminal status and correctness follow from the step.
    pub fn add_child(&mut self, parent: NodeId, step: Step, prior: f64) -> Result<NodeId, TreeError> {
        let depth = self.node(parent)?.depth + 1;
        let id = NodeId(self.nodes.len());
        let is_terminal = step.is_final();
        let is_correct = step.final_answer().map(|a| a == self.problem.gold_answer);
        self.nodes.push(SearchNode {
            id,
            parent: Some(parent),
            step: Some(step),
            prior,
            visits: 0,
            value_sum: 0.0,
            leaf_value: None,
            depth,
            children: Vec::new(),
            is_terminal,
            is_correct,
            expanded: false,
            dead_end: false,
        });
        self.nodes[parent.0].children.push(id);
        Ok(id)
    }

    /// Ancestors from `id` (inclusive) up to and including the root.
    pub fn ancestors(&self, id: NodeId) -> Result<Vec<NodeId>, TreeError> {
        let mut out = vec![id];
        let mut cur = self.node(id)?;
        while let Some(parent) = cur.parent {
            out.push(parent);
            cur = self.node(parent)?;
        }
        Ok(out)
    }

    /// Steps from the root down to `id`.
    pub fn path_to(&self, id: NodeId) -> Result<Trajectory, TreeError> {
        let mut steps: Vec<Step> =
            self.ancestors(id)?.into_iter().filter_map(|n| self.nodes[n.0].step.clone()).collect();
        steps.reverse();
        Ok(Trajectory::new(steps))
    }

    /// Steps strictly below `ancestor` down to `id`.
    pub fn path_between(&self, ancestor: NodeId, id: NodeId) -> Result<Trajectory, TreeError> {
        let mut steps = Vec::new();
        let mut cur = id;
        while cur != ancestor {
            let node = self.node(cur)?;
            steps.extend(node.step.clone());
            cur = node.parent.ok_or_else(|| TreeError::MalformedDump(format!("{ancestor} is not above {id}")))?;
        }
        steps.reverse();
        Ok(Trajectory::new(steps))
    }

    pub fn is_ancestor(&self, ancestor: NodeId, id: NodeId) -> Result<bool, TreeError> {
        let depth = self.node(ancestor)?.depth;
        let mut cur = self.node(id)?;
        while cur.depth > depth {
            cur = self.node(cur.parent.expect("non-root has parent"))?;
        }
        Ok(cur.id == ancestor)
    }

    pub fn lowest_common_ancestor(&self, a: NodeId, b: NodeId) -> Result<NodeId, TreeError> {
        let (mut x, mut y) = (self.node(a)?, self.node(b)?);
        while x.depth > y.depth {
            x = &self.nodes[x.parent.expect("non-root has parent").0];
        }
        while y.depth > x.depth {
            y = &self.nodes[y.parent.expect("non-root has parent").0];
        }
        while x.id != y.id {
            x = &self.nodes[x.parent.expect("non-root has parent").0];
            y = &self.nodes[y.parent.expect("non-root has parent").0];
        }
        Ok(x.id)
    }

    pub fn record_evaluation(&mut self, id: NodeId, v: f64) -> Result<(), TreeError> {
        check_value(v)?;
        self.node_mut(id)?.leaf_value = Some(v);
        Ok(())
    }

    /// Adds `v` to the node and every ancestor, one visit each.
    pub fn backpropagate(&mut self, id: NodeId, v: f64) -> Result<(), TreeError> {
        check_value(v)?;
        self.node(id)?;
        let mut cur = Some(id);
        while let Some(n) = cur {
            let node = &mut self.nodes[n.0];
            node.visits += 1;
            node.value_sum += v;
            cur = node.parent;
        }
        self.backprop_log.push((id, v));
        Ok(())
    }

    pub fn to_dump(&self) -> TreeDump {
        TreeDump {
            problem_id: self.problem.id.clone(),
            rng_seed: self.rng_seed,
            problem: self.problem.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.id.0,
                    parent: n.parent.map(|p| p.0),
                    step: n.step.as_ref().map(Step::raw_text),
                    prior: n.prior,
                    visits: n.visits,
                    value_sum: n.value_sum,
                    leaf_value: n.leaf_value,
                    terminal: n.is_terminal,
                    correct: n.is_correct,
                })
                .collect(),
        }
    }

    /// Rebuilds a tree from its dump, checking structural invariants.
    pub fn from_dump(dump: &TreeDump) -> Result<Self, TreeError> {
        dump.problem.validate()?;
        let bad = |msg: String| TreeError::MalformedDump(msg);
        let mut tree = SearchTree::new(dump.problem.clone(), dump.rng_seed);
        let n_opts = dump.problem.num_options();
        let first = dump.nodes.first().ok_or_else(|| bad("no nodes".into()))?;
        if first.id != 0 || first.parent.is_some() || first.step.is_some() {
            return Err(bad("node 0 must be a step-less root".into()));
        }
        for (i, rec) in dump.nodes.iter().enumerate() {
            if rec.id != i {
                return Err(bad(format!("node ids must be dense, found {} at {i}", rec.id)));
            }
            if i > 0 {
                let parent = rec.parent.ok_or_else(|| bad(format!("node {i} has no parent")))?;
                if parent >= i {
                    return Err(bad(format!("node {i} has parent {parent} not before it")));
                }
                let text = rec.step.as_deref().ok_or_else(|| bad(format!("node {i} has no step")))?;
                let step = parse_step(text, n_opts)?;
                tree.add_child(NodeId(parent), step, rec.prior)?;
            }
            let node = &mut tree.nodes[i];
            if node.is_terminal != rec.terminal || node.is_correct != rec.correct {
                return Err(bad(format!("node {i} terminal/correct flags disagree with its step")));
            }
            node.prior = rec.prior;
            node.visits = rec.visits;
            node.value_sum = rec.value_sum;
            node.leaf_value = rec.leaf_value;
        }
        for node in &mut tree.nodes {
            node.expanded = !node.children.is_empty();
        }
        Ok(tree)
    }
}

fn check_value(v: f64) -> Result<(), TreeError> {
    if (-1.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(TreeError::ValueOutOfRange(v))
    }
}

/// On-disk form of a finished tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeDump {
    pub problem_id: String,
    pub rng_seed: u64,
    pub problem: Problem,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub id: usize,
    pub parent: Option<usize>,
    pub step: Option<String>,
    pub prior: f64,
    pub visits: u32,
    pub value_sum: f64,
    pub leaf_value: Option<f64>,
    pub terminal: bool,
    pub correct: Option<bool>,
}
