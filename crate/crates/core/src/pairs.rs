//! Chosen/rejected pair sampling from finished search trees.
//!
//! Per tree: drop unvisited nodes, bar non-thought answers from being
//! chosen, collect every node on a path to a correct answer, then draw
//! rejected partners from three sources:
//!
//! * `sb`: siblings (two draws without replacement);
//! * `sd`: non-siblings at the same depth;
//! * `o`: nodes at other depths, excluding ancestors and descendants.
//!
//! Every pair must clear the Q margin `delta`. Pools are truncated to
//! `epsilon/2`, `epsilon/4`, `epsilon/4` after sorting by Q gap.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grammar::{is_non_thought_terminal, parse_trajectory, GrammarError, Span, Trajectory};
use crate::tree::{NodeId, SearchTree, TreeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSource {
    Sb,
    Sd,
    O,
    Reflection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub problem_id: String,
    pub prefix: Trajectory,
    pub chosen: Trajectory,
    pub rejected: Trajectory,
    pub q_chosen: f64,
    pub q_rejected: f64,
    pub source: PairSource,
    pub mask_spans_chosen: Vec<Span>,
    pub mask_spans_rejected: Vec<Span>,
}

impl PreferencePair {
    pub fn new(
        problem_id: impl Into<String>,
        prefix: Trajectory,
        chosen: Trajectory,
        rejected: Trajectory,
        q_chosen: f64,
        q_rejected: f64,
        source: PairSource,
    ) -> Self {
        apply_masks(PreferencePair {
            problem_id: problem_id.into(),
            prefix,
            chosen,
            rejected,
            q_chosen,
            q_rejected,
            source,
            mask_spans_chosen: Vec::new(),
            mask_spans_rejected: Vec::new(),
        })
    }

    pub fn margin(&self) -> f64 {
        self.q_chosen - self.q_rejected
    }

    /// Masked spans of the prefix text, for losses that score it.
    pub fn mask_spans_prefix(&self) -> Vec<Span> {
        self.prefix.serialize_with_spans().1
    }

    pub fn to_record(&self) -> PairRecord {
        PairRecord {
            problem_id: self.problem_id.clone(),
            prefix: self.prefix.raw_text(),
            chosen: self.chosen.raw_text(),
            rejected: self.rejected.raw_text(),
            q_chosen: self.q_chosen,
            q_rejected: self.q_rejected,
            source: self.source,
            mask_spans_chosen: self.mask_spans_chosen.clone(),
            mask_spans_rejected: self.mask_spans_rejected.clone(),
        }
    }
}

/// One line of a pair file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub problem_id: String,
    pub prefix: String,
    pub chosen: String,
    pub rejected: String,
    pub q_chosen: f64,
    pub q_rejected: f64,
    pub source: PairSource,
    pub mask_spans_chosen: Vec<Span>,
    pub mask_spans_rejected: Vec<Span>,
}

impl PairRecord {
    /// Parses the texts back and checks the recorded masks.
    pub fn to_pair(&self, num_options: usize) -> Result<PreferencePair, GrammarError> {
        let pair = PreferencePair::new(
            self.problem_id.clone(),
            parse_trajectory(&self.prefix, num_options)?,
            parse_trajectory(&self.chosen, num_options)?,
            parse_trajectory(&self.rejected, num_options)?,
            self.q_chosen,
            self.q_rejected,
            self.source,
        );
        if pair.mask_spans_chosen != self.mask_spans_chosen || pair.mask_spans_rejected != self.mask_spans_rejected {
            return Err(GrammarError::InvalidTrajectory("mask spans do not match the texts".into()));
        }
        Ok(pair)
    }
}

/// Recomputes the proposal/observation content spans of both completions.
pub fn apply_masks(mut pair: PreferencePair) -> PreferencePair {
    pair.mask_spans_chosen = pair.chosen.serialize_with_spans().1;
    pair.mask_spans_rejected = pair.rejected.serialize_with_spans().1;
    pair
}

/// A tree restricted to visited nodes, with chosen-eligibility flags.
#[derive(Debug, Clone)]
pub struct TreeView<'a> {
    pub tree: &'a SearchTree,
    visible: Vec<bool>,
    chosen_eligible: Vec<bool>,
}

impl<'a> TreeView<'a> {
    pub fn is_visible(&self, id: NodeId) -> bool {
        self.visible.get(id.0).copied().unwrap_or(false)
    }

    pub fn is_chosen_eligible(&self, id: NodeId) -> bool {
        self.is_visible(id) && self.chosen_eligible[id.0]
    }

    /// Visible non-root nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (1..self.visible.len()).filter(|&i| self.visible[i]).map(NodeId)
    }

    /// Visible nodes in depth-first preorder (children in creation order),
    /// root excluded.
    pub fn dfs_order(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![self.tree.root()];
        while let Some(id) = stack.pop() {
            if id != self.tree.root() {
                out.push(id);
            }
            let node = self.tree.node(id).expect("view node exists");
            for &child in node.children.iter().rev() {
                if self.is_visible(child) {
                    stack.push(child);
                }
            }
        }
        out
    }

    pub fn q(&self, id: NodeId) -> f64 {
        self.tree.node(id).expect("view node exists").q()
    }

    /// Correct terminal nodes that may end a chosen trajectory.
    pub fn correct_leaves(&self) -> Vec<NodeId> {
        self.nodes()
            .filter(|&id| {
                let n = self.tree.node(id).expect("exists");
                n.is_terminal && n.is_correct == Some(true) && self.chosen_eligible[id.0]
            })
            .collect()
    }
}

/// Hides nodes that were never visited. The root always stays.
pub fn prune_non_visited(tree: &SearchTree) -> TreeView<'_> {
    let visible: Vec<bool> = tree.nodes().map(|n| n.id == tree.root() || n.visits > 0).collect();
    let chosen_eligible = vec![true; visible.len()];
    TreeView { tree, visible, chosen_eligible }
}

/// Bars terminal nodes reached without a bridging thought from ending a
/// chosen trajectory; they remain available as rejected partners.
pub fn prune_non_thought(view: TreeView<'_>) -> TreeView<'_> {
    let mut view = view;
    for id in view.nodes().collect::<Vec<_>>() {
        let node = view.tree.node(id).expect("exists");
        if node.is_terminal {
            let path = view.tree.path_to(id).expect("exists");
            if is_non_thought_terminal(&path).unwrap_or(false) {
                view.chosen_eligible[id.0] = false;
            }
        }
    }
    view
}

/// Every eligible correct leaf plus its ancestors, root excluded.
pub fn chosen_set(view: &TreeView<'_>) -> BTreeSet<NodeId> {
    let root = view.tree.root();
    let mut set = BTreeSet::new();
    for leaf in view.correct_leaves() {
        for id in view.tree.ancestors(leaf).expect("exists") {
            if id != root {
                set.insert(id);
            }
        }
    }
    set
}

fn passes_margin(view: &TreeView<'_>, chosen: NodeId, rejected: NodeId, delta: f64) -> bool {
    view.q(chosen) >= view.q(rejected) + delta
}

/// Margin-passing rejected candidates for `c` from one source, in id order.
pub fn candidates(view: &TreeView<'_>, c: NodeId, source: PairSource, delta: f64) -> Vec<NodeId> {
    let tree = view.tree;
    let node = tree.node(c).expect("exists");
    view.nodes()
        .filter(|&x| x != c)
        .filter(|&x| {
            let other = tree.node(x).expect("exists");
            match source {
                PairSource::Sb => other.parent == node.parent,
                PairSource::Sd => other.depth == node.depth && other.parent != node.parent,
                PairSource::O => {
                    other.depth != node.depth
                        && !tree.is_ancestor(x, c).expect("exists")
                        && !tree.is_ancestor(c, x).expect("exists")
                }
                PairSource::Reflection => false,
            }
        })
        .filter(|&x| passes_margin(view, c, x, delta))
        .collect()
}

/// Builds the pair for chosen node `c` and rejected node `x`, splitting at
/// their lowest common ancestor.
pub fn realize_pair(tree: &SearchTree, c: NodeId, x: NodeId, source: PairSource) -> Result<PreferencePair, TreeError> {
    let lca = tree.lowest_common_ancestor(c, x)?;
    Ok(PreferencePair::new(
        tree.problem.id.clone(),
        tree.path_to(lca)?,
        tree.path_between(lca, c)?,
        tree.path_between(lca, x)?,
        tree.node(c)?.q(),
        tree.node(x)?.q(),
        source,
    ))
}

fn draw<R: Rng>(pool: &mut Vec<NodeId>, rng: &mut R) -> Option<NodeId> {
    if pool.is_empty() {
        None
    } else {
        Some(pool.remove(rng.gen_range(0..pool.len())))
    }
}

pub fn sample_sb<R: Rng>(view: &TreeView<'_>, c: NodeId, delta: f64, rng: &mut R) -> Vec<NodeId> {
    let mut pool = candidates(view, c, PairSource::Sb, delta);
    let mut out = Vec::new();
    for _ in 0..2 {
        out.extend(draw(&mut pool, rng));
    }
    out
}

pub fn sample_sd<R: Rng>(view: &TreeView<'_>, c: NodeId, delta: f64, rng: &mut R) -> Option<NodeId> {
    draw(&mut candidates(view, c, PairSource::Sd, delta), rng)
}

pub fn sample_o<R: Rng>(view: &TreeView<'_>, c: NodeId, delta: f64, rng: &mut R) -> Option<NodeId> {
    draw(&mut candidates(view, c, PairSource::O, delta), rng)
}

/// Unbalanced pools, one entry per successful draw.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pools {
    pub sb: Vec<PreferencePair>,
    pub sd: Vec<PreferencePair>,
    pub o: Vec<PreferencePair>,
}

/// The `(chosen, rejected)` node pairs drawn per source, before balancing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Draws {
    pub sb: Vec<(NodeId, NodeId)>,
    pub sd: Vec<(NodeId, NodeId)>,
    pub o: Vec<(NodeId, NodeId)>,
}

pub fn draw_rejected<R: Rng>(view: &TreeView<'_>, delta: f64, rng: &mut R) -> Draws {
    let mut draws = Draws::default();
    for c in chosen_set(view) {
        draws.sb.extend(sample_sb(view, c, delta, rng).into_iter().map(|x| (c, x)));
        draws.sd.extend(sample_sd(view, c, delta, rng).map(|x| (c, x)));
        draws.o.extend(sample_o(view, c, delta, rng).map(|x| (c, x)));
    }
    draws
}

pub fn sample_pools<R: Rng>(view: &TreeView<'_>, delta: f64, rng: &mut R) -> Result<Pools, TreeError> {
    let draws = draw_rejected(view, delta, rng);
    let realize = |list: &[(NodeId, NodeId)], source| {
        list.iter().map(|&(c, x)| realize_pair(view.tree, c, x, source)).collect::<Result<Vec<_>, _>>()
    };
    Ok(Pools {
        sb: realize(&draws.sb, PairSource::Sb)?,
        sd: realize(&draws.sd, PairSource::Sd)?,
        o: realize(&draws.o, PairSource::O)?,
    })
}

/// Per-source caps for a problem budget of `epsilon` pairs (2:1:1).
pub fn source_targets(epsilon: usize) -> (usize, usize, usize) {
    (epsilon / 2, epsilon / 4, epsilon / 4)
}

fn sort_by_margin(pairs: &mut [PreferencePair]) {
    pairs.sort_by(|a, b| b.margin().total_cmp(&a.margin()));
}

/// Sorts each pool by Q gap (largest first) and truncates it to its share of
/// `epsilon`. Short pools are not backfilled.
pub fn balance_and_cap(pools: Pools, epsilon: usize) -> Vec<PreferencePair> {
    let (t_sb, t_sd, t_o) = source_targets(epsilon);
    let mut out = Vec::new();
    for (mut pool, target) in [(pools.sb, t_sb), (pools.sd, t_sd), (pools.o, t_o)] {
        sort_by_margin(&mut pool);
        pool.truncate(target);
        out.extend(pool);
    }
    out
}

/// Full pair sampling for one tree.
pub fn sample_pairs(
    tree: &SearchTree,
    epsilon: usize,
    delta: f64,
    seed: u64,
) -> Result<Vec<PreferencePair>, TreeError> {
    let view = prune_non_thought(prune_non_visited(tree));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pools = sample_pools(&view, delta, &mut rng)?;
    Ok(balance_and_cap(pools, epsilon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{ActionStep, Problem, Step};

    fn problem() -> Problem {
        Problem::new("p", "q", vec!["a".into(), "b".into(), "c".into(), "d".into()], 0).unwrap()
    }

    fn set_q(tree: &mut SearchTree, id: NodeId, q: f64, visits: u32) {
        let n = tree.node_mut(id).unwrap();
        n.visits = visits;
        n.value_sum = q * f64::from(visits);
    }

    fn action() -> Step {
        Step::Action(ActionStep {
            thought: None,
            tool: "retriever".into(),
            input: "eez".into(),
            observation: Some("The coastal state has sovereign rights.".into()),
        })
    }

    /// root -> P(A) -> {Act -> {T -> F(A) correct, F(A) non-thought}, T2 (q 0.5)}
    fn small_tree() -> (SearchTree, Vec<NodeId>) {
        let mut t = SearchTree::new(problem(), 0);
        let p = t.add_child(t.root(), Step::Proposal(0), 1.0).unwrap();
        let act = t.add_child(p, action(), 0.5).unwrap();
        let t2 = t.add_child(p, Step::Thought("guess".into()), 0.5).unwrap();
        let th = t.add_child(act, Step::Thought("obs says A".into()), 0.5).unwrap();
        let nt = t.add_child(act, Step::FinalAnswer(0), 0.5).unwrap();
        let fin = t.add_child(th, Step::FinalAnswer(0), 1.0).unwrap();
        let root = t.root();
        set_q(&mut t, root, 0.5, 10);
        set_q(&mut t, p, 0.6, 10);
        set_q(&mut t, act, 0.8, 6);
        set_q(&mut t, t2, 0.5, 3);
        set_q(&mut t, th, 0.9, 3);
        set_q(&mut t, nt, 1.0, 2);
        set_q(&mut t, fin, 1.0, 2);
        (t, vec![p, act, t2, th, nt, fin])
    }

    #[test]
    fn unvisited_nodes_hidden_root_kept() {
        let (mut t, ids) = small_tree();
        let extra = t.add_child(ids[2], Step::Thought("never".into()), 1.0).unwrap();
        let view = prune_non_visited(&t);
        assert!(!view.is_visible(extra));
        assert!(view.is_visible(t.root()));
        assert_eq!(view.nodes().count(), 6);
    }

    #[test]
    fn non_thought_leaf_barred_from_chosen_only() {
        let (t, ids) = small_tree();
        let view = prune_non_thought(prune_non_visited(&t));
        assert!(!view.is_chosen_eligible(ids[4]));
        assert!(view.is_chosen_eligible(ids[5]));
        let s = chosen_set(&view);
        assert_eq!(s.into_iter().collect::<Vec<_>>(), vec![ids[0], ids[1], ids[3], ids[5]]);
        // non-thought leaf q 1.0 is not a valid rejected partner for anything here
        // (no chosen node beats it by delta), but it stays visible.
        assert!(view.is_visible(ids[4]));
    }

    #[test]
    fn only_non_thought_correct_leaves_yield_nothing() {
        let mut t = SearchTree::new(problem(), 0);
        let p = t.add_child(t.root(), Step::Proposal(0), 1.0).unwrap();
        let a = t.add_child(p, action(), 1.0).unwrap();
        let f = t.add_child(a, Step::FinalAnswer(0), 1.0).unwrap();
        let w = t.add_child(a, Step::FinalAnswer(1), 1.0).unwrap();
        for (id, q) in [(t.root(), 0.0), (p, 0.0), (a, 0.0), (f, 1.0), (w, -1.0)] {
            set_q(&mut t, id, q, 1);
        }
        assert!(sample_pairs(&t, 20, 0.1, 0).unwrap().is_empty());
    }

    #[test]
    fn sibling_margin_filter() {
        let (t, ids) = small_tree();
        let view = prune_non_thought(prune_non_visited(&t));
        // act (0.8) vs t2 (0.5): passes; th (0.9) vs nt (1.0): fails
        assert_eq!(candidates(&view, ids[1], PairSource::Sb, 0.1), vec![ids[2]]);
        assert!(candidates(&view, ids[3], PairSource::Sb, 0.1).is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = realize_pair(&t, ids[1], sample_sb(&view, ids[1], 0.1, &mut rng)[0], PairSource::Sb).unwrap();
        assert_eq!(pair.chosen.len(), 1);
        assert_eq!(pair.rejected.len(), 1);
        assert_eq!(pair.prefix.steps, vec![Step::Proposal(0)]);
    }

    #[test]
    fn close_sibling_filtered() {
        let (mut t, ids) = small_tree();
        set_q(&mut t, ids[2], 0.75, 4);
        let view = prune_non_thought(prune_non_visited(&t));
        assert!(candidates(&view, ids[1], PairSource::Sb, 0.1).is_empty());
    }

    #[test]
    fn sb_two_draws_without_replacement() {
        let mut t = SearchTree::new(problem(), 0);
        let p = t.add_child(t.root(), Step::Proposal(0), 1.0).unwrap();
        let th = t.add_child(p, Step::Thought("good".into()), 0.25).unwrap();
        let f = t.add_child(th, Step::FinalAnswer(0), 1.0).unwrap();
        let sibs: Vec<NodeId> =
            (0..3).map(|i| t.add_child(p, Step::Thought(format!("bad {i}")), 0.25).unwrap()).collect();
        for (id, q) in [(t.root(), 0.0), (p, 0.0), (th, 0.9), (f, 1.0)] {
            set_q(&mut t, id, q, 1);
        }
        for &s in &sibs {
            set_q(&mut t, s, -0.5, 1);
        }
        let view = prune_non_thought(prune_non_visited(&t));
        for seed in 0..20 {
            let drawn = sample_sb(&view, th, 0.1, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(drawn.len(), 2);
            assert_ne!(drawn[0], drawn[1]);
        }
        set_q(&mut t, sibs[0], 0.95, 1);
        set_q(&mut t, sibs[1], 0.95, 1);
        let view = prune_non_thought(prune_non_visited(&t));
        assert_eq!(sample_sb(&view, th, 0.1, &mut ChaCha8Rng::seed_from_u64(0)), vec![sibs[2]]);
    }

    fn dummy(margin: f64, source: PairSource) -> PreferencePair {
        PreferencePair::new(
            "p",
            Trajectory::default(),
            Trajectory::new(vec![Step::FinalAnswer(0)]),
            Trajectory::new(vec![Step::FinalAnswer(1)]),
            margin,
            0.0,
            source,
        )
    }

    fn pools(sizes: (usize, usize, usize)) -> Pools {
        let make = |n: usize, s| (0..n).map(|i| dummy(i as f64 / 100.0, s)).collect();
        Pools { sb: make(sizes.0, PairSource::Sb), sd: make(sizes.1, PairSource::Sd), o: make(sizes.2, PairSource::O) }
    }

    fn counts(pairs: &[PreferencePair]) -> (usize, usize, usize) {
        let c = |s| pairs.iter().filter(|p| p.source == s).count();
        (c(PairSource::Sb), c(PairSource::Sd), c(PairSource::O))
    }

    #[test]
    fn balance_examples() {
        assert_eq!(counts(&balance_and_cap(pools((30, 30, 30)), 20)), (10, 5, 5));
        assert_eq!(counts(&balance_and_cap(pools((3, 30, 30)), 20)), (3, 5, 5));
        assert!(balance_and_cap(pools((0, 0, 0)), 20).is_empty());
        assert_eq!(counts(&balance_and_cap(pools((9, 9, 9)), 4)), (2, 1, 1));
        let kept = balance_and_cap(pools((30, 0, 0)), 20);
        assert!((kept[0].margin() - 0.29).abs() < 1e-12);
        assert!(kept.windows(2).all(|w| w[0].margin() >= w[1].margin()));
    }

    #[test]
    fn masks_cover_observation() {
        let obs = "x".repeat(120);
        let step = Step::Action(ActionStep {
            thought: None,
            tool: "retriever".into(),
            input: "q".into(),
            observation: Some(obs),
        });
        let pair = PreferencePair::new(
            "p",
            Trajectory::default(),
            Trajectory::new(vec![step.clone()]),
            Trajectory::new(vec![Step::Thought("t".into())]),
            1.0,
            0.0,
            PairSource::Sb,
        );
        assert_eq!(pair.mask_spans_chosen.len(), 1);
        let span = pair.mask_spans_chosen[0];
        assert_eq!(span.len(), 120);
        let text = step.raw_text();
        let offset = text.find("<observation>").unwrap() + "<observation>".len();
        assert_eq!(span.start, offset);
        assert!(pair.mask_spans_rejected.is_empty());
    }

    #[test]
    fn record_round_trip() {
        let (t, _) = small_tree();
        let pairs = sample_pairs(&t, 20, 0.1, 3).unwrap();
        assert!(!pairs.is_empty());
        for p in pairs {
            let rec = p.to_record();
            let json = serde_json::to_string(&rec).unwrap();
            let back: PairRecord = serde_json::from_str(&json).unwrap();
            assert_eq!(back.to_pair(4).unwrap(), p);
        }
    }
}
