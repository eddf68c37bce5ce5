//! Reflection pairs: part of a losing branch is grafted onto the shared
//! prefix, and the chosen side becomes a reflection thought followed by the
//! winning branch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::PairConfig;
use crate::grammar::{Step, Trajectory};
use crate::oracles::{render_prefix, OracleError, ReflectionWriter};
use crate::pairs::{prune_non_thought, prune_non_visited, PairSource, PreferencePair, TreeView};
use crate::tree::{NodeId, SearchTree, TreeError};

#[derive(Debug, Error)]
pub enum PorpError {
    #[error("rejected branch has {0} steps; at least 3 are needed")]
    TooShort(usize),
    #[error("reflection writer unavailable: {0}")]
    ReflectionUnavailable(#[source] OracleError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// A (winner, loser) node pair and the branches below their common ancestor.
#[derive(Debug, Clone, PartialEq)]
pub struct DfsPair {
    pub winner: NodeId,
    pub loser: NodeId,
    pub prefix: Trajectory,
    pub chosen: Trajectory,
    pub rejected: Trajectory,
    pub q_chosen: f64,
    pub q_rejected: f64,
}

/// For every eligible correct leaf `w` (depth-first order) and every visible
/// node `l` off its path with `q_w >= q_l + delta` (depth-first order), the
/// branches split at their lowest common ancestor.
pub fn collect_dfs_pairs(view: &TreeView<'_>, delta: f64) -> Result<Vec<DfsPair>, TreeError> {
    let tree = view.tree;
    let order = view.dfs_order();
    let winners: Vec<NodeId> = {
        let correct = view.correct_leaves();
        order.iter().copied().filter(|id| correct.contains(id)).collect()
    };
    let mut out = Vec::new();
    for &w in &winners {
        let q_w = view.q(w);
        for &l in &order {
            if l == w || tree.is_ancestor(l, w)? || tree.is_ancestor(w, l)? {
                continue;
            }
            let q_l = view.q(l);
            if q_w < q_l + delta {
                continue;
            }
            let lca = tree.lowest_common_ancestor(w, l)?;
            out.push(DfsPair {
                winner: w,
                loser: l,
                prefix: tree.path_to(lca)?,
                chosen: tree.path_between(lca, w)?,
                rejected: tree.path_between(lca, l)?,
                q_chosen: q_w,
                q_rejected: q_l,
            });
        }
    }
    Ok(out)
}

/// Draws the split point `i` from `{2, ..., len - 1}`.
pub fn draw_split<R: Rng>(len: usize, rng: &mut R) -> Result<usize, PorpError> {
    if len < 3 {
        return Err(PorpError::TooShort(len));
    }
    Ok(rng.gen_range(2..len))
}

/// Splits the losing branch into a graft (first `i` steps) and a remainder.
pub fn segment_rejected<R: Rng>(rejected: &Trajectory, rng: &mut R) -> Result<(Trajectory, Trajectory), PorpError> {
    let i = draw_split(rejected.len(), rng)?;
    Ok((Trajectory::new(rejected.steps[..i].to_vec()), Trajectory::new(rejected.steps[i..].to_vec())))
}

/// A segmented pair waiting for its reflection text.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionCandidate {
    pub pair: DfsPair,
    pub graft: Trajectory,
    pub remainder: Trajectory,
}

impl ReflectionCandidate {
    pub fn grafted_prefix(&self) -> Trajectory {
        self.pair.prefix.concat(&self.graft)
    }

    /// The winning branch without a leading proposal.
    pub fn continuation(&self) -> Trajectory {
        let steps = &self.pair.chosen.steps;
        let skip = usize::from(matches!(steps.first(), Some(Step::Proposal(_))));
        Trajectory::new(steps[skip..].to_vec())
    }

    /// Chosen length in steps when the reflection is a single thought.
    pub fn chosen_len(&self) -> usize {
        1 + self.continuation().len()
    }
}

pub fn reflection_steps(text: &str, split_paragraphs: bool) -> Vec<Step> {
    let parts: Vec<&str> = if split_paragraphs {
        text.split("\n\n").map(str::trim).filter(|p| !p.is_empty()).collect()
    } else {
        vec![text.trim()]
    };
    parts.into_iter().filter(|p| !p.is_empty()).map(|p| Step::Thought(p.to_string())).collect()
}

pub fn build_reflection_pair(
    tree: &SearchTree,
    cand: &ReflectionCandidate,
    writer: &dyn ReflectionWriter,
    split_paragraphs: bool,
) -> Result<PreferencePair, PorpError> {
    let prefix = cand.grafted_prefix();
    let text = writer
        .write(&render_prefix(&tree.problem, &prefix), &cand.graft.raw_text(), &cand.pair.chosen.raw_text())
        .map_err(PorpError::ReflectionUnavailable)?;
    let mut steps = reflection_steps(&text, split_paragraphs);
    if steps.is_empty() {
        return Err(PorpError::ReflectionUnavailable(OracleError::Malformed("empty reflection text".into())));
    }
    steps.extend(cand.continuation().steps);
    Ok(PreferencePair::new(
        tree.problem.id.clone(),
        prefix,
        Trajectory::new(steps),
        cand.remainder.clone(),
        cand.pair.q_chosen,
        cand.pair.q_rejected,
        PairSource::Reflection,
    ))
}

pub fn selection_score(gap: f64, chosen_len: usize, max_depth: usize, config: &PairConfig) -> f64 {
    config.gap_weight * gap + config.length_weight * chosen_len as f64 / max_depth as f64
}

/// Sorts by score (highest first, stable) and keeps the first `limit`.
pub fn length_weighted_select<T>(mut scored: Vec<(f64, T)>, limit: usize) -> Vec<T> {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.into_iter().take(limit).map(|(_, t)| t).collect()
}

/// Reflection pairs for one tree, capped at `min(epsilon, normal_count)`.
pub fn reflection_pairs(
    tree: &SearchTree,
    writer: &dyn ReflectionWriter,
    config: &PairConfig,
    max_depth: usize,
    normal_count: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>, PorpError> {
    let view = prune_non_thought(prune_non_visited(tree));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cands = Vec::new();
    for pair in collect_dfs_pairs(&view, config.delta)? {
        match segment_rejected(&pair.rejected, &mut rng) {
            Ok((graft, remainder)) => cands.push(ReflectionCandidate { pair, graft, remainder }),
            Err(PorpError::TooShort(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    let limit = config.epsilon.min(normal_count);
    if config.split_reflection_paragraphs {
        let mut built = Vec::new();
        for cand in &cands {
            built.push(build_reflection_pair(tree, cand, writer, true)?);
        }
        let scored =
            built.into_iter().map(|p| (selection_score(p.margin(), p.chosen.len(), max_depth, config), p)).collect();
        return Ok(length_weighted_select(scored, limit));
    }
    let scored = cands
        .into_iter()
        .map(|c| {
            let s = selection_score(c.pair.q_chosen - c.pair.q_rejected, c.chosen_len(), max_depth, config);
            (s, c)
        })
        .collect();
    length_weighted_select(scored, limit).iter().map(|c| build_reflection_pair(tree, c, writer, false)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{parse_trajectory, ActionStep, Problem};
    use crate::oracles::mock::TemplateReflection;

    fn problem() -> Problem {
        Problem::new("p", "q", vec!["a".into(), "b".into(), "c".into(), "d".into()], 0).unwrap()
    }

    fn set_q(tree: &mut SearchTree, id: NodeId, q: f64) {
        let n = tree.node_mut(id).unwrap();
        n.visits = 1;
        n.value_sum = q;
    }

    fn action(input: &str) -> Step {
        Step::Action(ActionStep {
            thought: None,
            tool: "retriever".into(),
            input: input.into(),
            observation: Some("doc".into()),
        })
    }

    /// Nodes (1)..(6): (1) proposal under the root; (2) and (4) its children;
    /// (5) under (2) is wrong; (4) -> (6) ends correctly.
    fn figure_tree() -> (SearchTree, [NodeId; 7]) {
        let mut t = SearchTree::new(problem(), 0);
        let n1 = t.add_child(t.root(), Step::Proposal(0), 1.0).unwrap();
        let n2 = t.add_child(n1, Step::Thought("misread".into()), 0.5).unwrap();
        let n3 = t.add_child(n1, action("other"), 0.2).unwrap();
        let n4 = t.add_child(n1, Step::Thought("careful".into()), 0.3).unwrap();
        let n5 = t.add_child(n2, Step::FinalAnswer(1), 1.0).unwrap();
        let n6 = t.add_child(n4, Step::FinalAnswer(0), 1.0).unwrap();
        let root = t.root();
        for (id, q) in [(root, 0.0), (n1, 0.2), (n2, 0.0), (n3, 0.95), (n4, 0.8), (n5, -1.0), (n6, 1.0)] {
            set_q(&mut t, id, q);
        }
        (t, [root, n1, n2, n3, n4, n5, n6])
    }

    #[test]
    fn figure_topology() {
        let (t, n) = figure_tree();
        let view = prune_non_thought(prune_non_visited(&t));
        let pairs = collect_dfs_pairs(&view, 0.1).unwrap();
        let pick = pairs.iter().find(|p| p.loser == n[5]).unwrap();
        assert_eq!(pick.winner, n[6]);
        assert_eq!(pick.prefix, t.path_to(n[1]).unwrap());
        assert_eq!(pick.rejected, t.path_between(n[1], n[5]).unwrap());
        assert_eq!(pick.chosen, t.path_between(n[1], n[6]).unwrap());
        assert_eq!(pick.rejected.len(), 2);
        // (3) has q 0.95, within delta of 1.0
        assert!(pairs.iter().all(|p| p.loser != n[3]));
        let losers: Vec<_> = pairs.iter().map(|p| p.loser).collect();
        assert_eq!(losers, vec![n[2], n[5]]);
    }

    #[test]
    fn no_correct_leaf_no_pairs() {
        let (mut t, n) = figure_tree();
        t.node_mut(n[6]).unwrap().is_correct = Some(false);
        let view = prune_non_thought(prune_non_visited(&t));
        assert!(collect_dfs_pairs(&view, 0.1).unwrap().is_empty());
    }

    #[test]
    fn split_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(draw_split(2, &mut rng), Err(PorpError::TooShort(2))));
        assert!(matches!(draw_split(0, &mut rng), Err(PorpError::TooShort(0))));
        for _ in 0..100 {
            assert_eq!(draw_split(3, &mut rng).unwrap(), 2);
            let i = draw_split(6, &mut rng).unwrap();
            assert!((2..=5).contains(&i));
        }
    }

    #[test]
    fn segments_cover_branch() {
        let traj = Trajectory::new(vec![
            action("x"),
            Step::Thought("a".into()),
            Step::Thought("b".into()),
            Step::FinalAnswer(2),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (g, r) = segment_rejected(&traj, &mut rng).unwrap();
            assert!(g.len() >= 2 && !r.is_empty());
            assert_eq!(g.concat(&r), traj);
        }
    }

    #[test]
    fn scores_prefer_length_at_equal_gap() {
        let c = PairConfig::default();
        let long = selection_score(0.5, 8, 16, &c);
        let short = selection_score(0.5, 2, 16, &c);
        assert!((long - 0.6).abs() < 1e-12);
        assert!((short - 0.525).abs() < 1e-12);
        assert_eq!(length_weighted_select(vec![(short, "s"), (long, "l")], 2), vec!["l", "s"]);
        assert_eq!(length_weighted_select(vec![(0.1, 1), (0.3, 2), (0.2, 3)], 2), vec![2, 3]);
    }

    fn candidate(chosen: Vec<Step>) -> (SearchTree, ReflectionCandidate) {
        let t = SearchTree::new(problem(), 0);
        let rejected =
            Trajectory::new(vec![Step::Proposal(1), Step::Thought("b looks right".into()), Step::FinalAnswer(1)]);
        let (graft, remainder) = segment_rejected(&rejected, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let pair = DfsPair {
            winner: NodeId(1),
            loser: NodeId(2),
            prefix: Trajectory::default(),
            chosen: Trajectory::new(chosen),
            rejected,
            q_chosen: 1.0,
            q_rejected: -1.0,
        };
        (t, ReflectionCandidate { pair, graft, remainder })
    }

    #[test]
    fn chosen_skips_proposal_and_keeps_tail() {
        let tail = vec![action("eez"), Step::Thought("so A".into()), Step::FinalAnswer(0)];
        let mut full = vec![Step::Proposal(0)];
        full.extend(tail.clone());
        let (t, cand) = candidate(full);
        let pair = build_reflection_pair(&t, &cand, &TemplateReflection, false).unwrap();
        assert!(pair.chosen.steps.iter().all(|s| !matches!(s, Step::Proposal(_))));
        assert_eq!(pair.chosen.steps[1..], tail[..]);
        assert!(matches!(pair.chosen.steps[0], Step::Thought(_)));
        assert_eq!(pair.chosen.len(), cand.chosen_len());
        assert_eq!(pair.rejected, cand.remainder);
        assert_eq!(pair.source, PairSource::Reflection);
    }

    struct Angry;
    impl ReflectionWriter for Angry {
        fn write(&self, _: &str, _: &str, _: &str) -> Result<String, OracleError> {
            Ok("wrong: a < b && <step> </thought>\n\nsecond part".into())
        }
    }

    struct Down;
    impl ReflectionWriter for Down {
        fn write(&self, _: &str, _: &str, _: &str) -> Result<String, OracleError> {
            Err(OracleError::Timeout)
        }
    }

    #[test]
    fn reflection_text_escaped() {
        let (t, cand) = candidate(vec![Step::Thought("x".into()), Step::FinalAnswer(0)]);
        for split in [false, true] {
            let pair = build_reflection_pair(&t, &cand, &Angry, split).unwrap();
            let back = parse_trajectory(&pair.chosen.raw_text(), 4).unwrap();
            assert_eq!(back, pair.chosen);
            assert_eq!(back.final_answer(), Some(0));
            assert_eq!(pair.chosen.len(), if split { 4 } else { 3 });
        }
        assert!(matches!(build_reflection_pair(&t, &cand, &Down, false), Err(PorpError::ReflectionUnavailable(_))));
    }

    #[test]
    fn tree_driver_caps_by_normal_count() {
        let mut t = SearchTree::new(problem(), 0);
        let p = t.add_child(t.root(), Step::Proposal(0), 1.0).unwrap();
        let a = t.add_child(p, action("eez"), 1.0).unwrap();
        let th = t.add_child(a, Step::Thought("A".into()), 1.0).unwrap();
        let f = t.add_child(th, Step::FinalAnswer(0), 1.0).unwrap();
        let mut last = p;
        let mut bad = Vec::new();
        for i in 0..4 {
            last = t.add_child(last, Step::Thought(format!("drift {i}")), 1.0).unwrap();
            bad.push(last);
        }
        let wf = t.add_child(last, Step::FinalAnswer(1), 1.0).unwrap();
        bad.push(wf);
        for (id, q) in [(t.root(), 0.0), (p, 0.1), (a, 0.5), (th, 0.9), (f, 1.0)] {
            set_q(&mut t, id, q);
        }
        for &b in &bad {
            set_q(&mut t, b, -0.5);
        }
        let cfg = PairConfig::default();
        let all = reflection_pairs(&t, &TemplateReflection, &cfg, 16, 100, 0).unwrap();
        // losers with branch length >= 3 below the proposal: drift 2, drift 3, wrong final
        assert_eq!(all.len(), 3);
        for pair in &all {
            assert!(pair.chosen.raw_text().ends_with(
                &t.path_between(p, f).unwrap().steps[1..].iter().map(Step::raw_text).collect::<Vec<_>>().join(" ")
            ));
        }
        assert_eq!(reflection_pairs(&t, &TemplateReflection, &cfg, 16, 1, 0).unwrap().len(), 1);
        let again = reflection_pairs(&t, &TemplateReflection, &cfg, 16, 100, 0).unwrap();
        assert_eq!(all, again);
    }
}
