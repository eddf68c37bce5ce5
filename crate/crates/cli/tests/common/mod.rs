//! Hand-built search trees and an independent enumeration of the pairs
//! the sampler may emit from them.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use stepsearch_core::grammar::{ActionStep, Problem, Step, Trajectory};
use stepsearch_core::pairs::{PairSource, PreferencePair};
use stepsearch_core::tree::NodeId;
use stepsearch_core::SearchTree;

pub fn problem(id: &str) -> Problem {
    Problem::new(
        id,
        format!("Regarding case {id}, which statement is correct?"),
        vec!["first".into(), "second".into(), "third".into(), "fourth".into()],
        0,
    )
    .unwrap()
}

pub fn p(i: usize) -> Step {
    Step::Proposal(i)
}
pub fn t(s: &str) -> Step {
    Step::Thought(s.into())
}
pub fn a(s: &str) -> Step {
    Step::Action(ActionStep {
        thought: None,
        tool: "retriever".into(),
        input: s.into(),
        observation: Some(format!("[1] article text for {s}")),
    })
}
pub fn f(i: usize) -> Step {
    Step::FinalAnswer(i)
}

/// Rows of `(parent row, step, q, visits)`; a `None` parent is the root.
pub fn build(id: &str, root: (f64, u32), rows: Vec<(Option<usize>, Step, f64, u32)>) -> SearchTree {
    let mut tree = SearchTree::new(problem(id), 0);
    let r = tree.root();
    {
        let n = tree.node_mut(r).unwrap();
        n.visits = root.1;
        n.value_sum = root.0 * f64::from(root.1);
    }
    let mut ids = Vec::new();
    for (parent, step, q, visits) in rows {
        let parent = parent.map_or(r, |i| ids[i]);
        let nid = tree.add_child(parent, step, 1.0).unwrap();
        let n = tree.node_mut(nid).unwrap();
        n.visits = visits;
        n.value_sum = q * f64::from(visits);
        ids.push(nid);
    }
    tree
}

/// Five trees covering: mixed sources, no correct leaf, only non-thought
/// correct leaves, unvisited nodes, and a wide tree that hits the caps.
pub fn fixture_trees() -> Vec<SearchTree> {
    let t1 = build(
        "fx-1",
        (0.3, 12),
        vec![
            (None, p(0), 0.5, 7),                  // 0
            (Some(0), a("eez"), 0.8, 4),           // 1
            (Some(1), t("obs says A"), 0.9, 2),    // 2
            (Some(2), f(0), 1.0, 1),               // 3 correct
            (Some(1), f(0), 1.0, 1),               // 4 correct, non-thought
            (Some(0), t("guess"), 0.2, 2),         // 5
            (Some(5), f(1), -1.0, 1),              // 6
            (None, p(1), -0.4, 4),                 // 7
            (Some(7), t("b looks fine"), -0.5, 2), // 8
            (Some(8), f(1), -1.0, 1),              // 9
        ],
    );
    let t2 = build(
        "fx-2",
        (-0.5, 6),
        vec![
            (None, p(2), -0.6, 3),
            (Some(0), t("c it is"), -0.7, 2),
            (Some(1), f(2), -1.0, 1),
            (None, p(3), -0.4, 2),
            (Some(3), f(3), -1.0, 1),
        ],
    );
    let t3 = build(
        "fx-3",
        (0.1, 8),
        vec![
            (None, p(0), 0.4, 5),
            (Some(0), a("rule"), 0.6, 3),
            (Some(1), f(0), 1.0, 2),
            (Some(0), f(1), -1.0, 1),
            (None, p(2), -0.3, 2),
            (Some(4), f(0), 1.0, 1),
        ],
    );
    let t4 = build(
        "fx-4",
        (0.2, 10),
        vec![
            (None, p(0), 0.6, 6),                 // 0
            (Some(0), t("think first"), 0.7, 4),  // 1
            (Some(1), a("statute"), 0.75, 3),     // 2
            (Some(2), t("so A"), 0.95, 2),        // 3
            (Some(3), f(0), 1.0, 1),              // 4 correct
            (Some(3), f(2), 0.0, 0),              // 5 unvisited
            (Some(2), t("maybe C"), 0.0, 0),      // 6 unvisited
            (Some(0), t("skip search"), -0.2, 1), // 7
            (None, p(1), -0.5, 3),                // 8
            (Some(8), t("B?"), -0.6, 2),          // 9
            (Some(9), f(0), 1.0, 0),              // 10 correct but unvisited
            (None, p(3), 0.0, 0),                 // 11 unvisited
        ],
    );
    let mut rows = Vec::new();
    for opt in 0..4usize {
        let gold = opt == 0;
        let pi = rows.len();
        rows.push((None, p(opt), if gold { 0.6 } else { -0.3 }, 20));
        for k in 0..3 {
            let ai = rows.len();
            rows.push((Some(pi), a(&format!("q{opt}{k}")), if gold { 0.7 - 0.1 * k as f64 } else { -0.4 }, 6));
            for m in 0..3 {
                let ti = rows.len();
                let good = gold && m == 0;
                rows.push((Some(ai), t(&format!("t{opt}{k}{m}")), if good { 0.9 } else { -0.2 - 0.1 * m as f64 }, 2));
                rows.push((Some(ti), f(if good { 0 } else { (opt + m) % 4 }), if good { 1.0 } else { -1.0 }, 1));
            }
        }
    }
    let t5 = build("fx-5", (0.0, 80), rows);
    vec![t1, t2, t3, t4, t5]
}

/// Independent reading of the sampling rules on a tree.
pub struct Enumeration {
    pub chosen: BTreeSet<usize>,
    /// Candidate rejected nodes per (chosen node, source).
    pub candidates: BTreeMap<(usize, PairSource), Vec<usize>>,
    path_index: HashMap<String, usize>,
}

fn parent_of(tree: &SearchTree, i: usize) -> Option<usize> {
    tree.node(NodeId(i)).unwrap().parent.map(|p| p.0)
}

fn chain(tree: &SearchTree, i: usize) -> Vec<usize> {
    let mut out = vec![i];
    let mut cur = i;
    while let Some(p) = parent_of(tree, cur) {
        out.push(p);
        cur = p;
    }
    out
}

fn steps_to(tree: &SearchTree, i: usize) -> Vec<Step> {
    let mut c = chain(tree, i);
    c.reverse();
    c.into_iter().filter_map(|j| tree.node(NodeId(j)).unwrap().step.clone()).collect()
}

fn bridged(steps: &[Step]) -> bool {
    let body = &steps[..steps.len() - 1];
    let after_last_action = match body.iter().rposition(|s| matches!(s, Step::Action(_))) {
        Some(k) => &body[k + 1..],
        None => body,
    };
    after_last_action.iter().any(|s| matches!(s, Step::Thought(_)))
}

pub fn enumerate(tree: &SearchTree, delta: f64) -> Enumeration {
    let n = tree.len();
    let node = |i: usize| tree.node(NodeId(i)).unwrap();
    let q = |i: usize| node(i).q();
    let visible: Vec<usize> = (1..n).filter(|&i| node(i).visits > 0).collect();
    let mut chosen = BTreeSet::new();
    for &i in &visible {
        let steps = steps_to(tree, i);
        let correct = matches!(steps.last(), Some(Step::FinalAnswer(k)) if *k == tree.problem.gold_answer);
        if correct && bridged(&steps) {
            chosen.extend(chain(tree, i).into_iter().filter(|&j| j != 0));
        }
    }
    let mut candidates = BTreeMap::new();
    for &c in &chosen {
        let depth_c = chain(tree, c).len();
        let line_c = chain(tree, c);
        for &x in &visible {
            if x == c || q(c) < q(x) + delta {
                continue;
            }
            let source = if parent_of(tree, x) == parent_of(tree, c) {
                PairSource::Sb
            } else if chain(tree, x).len() == depth_c {
                PairSource::Sd
            } else if !line_c.contains(&x) && !chain(tree, x).contains(&c) {
                PairSource::O
            } else {
                continue;
            };
            candidates.entry((c, source)).or_insert_with(Vec::new).push(x);
        }
    }
    let path_index = (1..n).map(|i| (Trajectory::new(steps_to(tree, i)).raw_text(), i)).collect();
    Enumeration { chosen, candidates, path_index }
}

impl Enumeration {
    pub fn cands(&self, c: usize, s: PairSource) -> &[usize] {
        self.candidates.get(&(c, s)).map_or(&[], Vec::as_slice)
    }

    /// Pairs drawn per source before capping.
    pub fn draw_counts(&self) -> BTreeMap<PairSource, usize> {
        let mut out = BTreeMap::new();
        for &c in &self.chosen {
            for (s, per) in [(PairSource::Sb, 2), (PairSource::Sd, 1), (PairSource::O, 1)] {
                *out.entry(s).or_insert(0) += self.cands(c, s).len().min(per);
            }
        }
        out
    }

    /// Whether every draw is forced (candidate lists no longer than the
    /// number of draws).
    pub fn forced(&self) -> bool {
        self.candidates.iter().all(|((_, s), v)| v.len() <= if *s == PairSource::Sb { 2 } else { 1 })
    }

    /// The (chosen, rejected) endpoint nodes of an emitted pair.
    pub fn endpoints(&self, pair: &PreferencePair) -> (usize, usize) {
        let c = pair.prefix.concat(&pair.chosen).raw_text();
        let r = pair.prefix.concat(&pair.rejected).raw_text();
        (self.path_index[&c], self.path_index[&r])
    }

    pub fn all_forced_pairs(&self) -> BTreeSet<(usize, usize, PairSource)> {
        self.candidates.iter().flat_map(|((c, s), xs)| xs.iter().map(move |&x| (*c, x, *s))).collect()
    }
}

/// Character ranges of every proposal and observation body found by
/// scanning the serialized text.
pub fn masked_ranges(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    for tag in ["proposal", "observation"] {
        let open: Vec<char> = format!("<{tag}>").chars().collect();
        let close: Vec<char> = format!("</{tag}>").chars().collect();
        let mut i = 0;
        while i + open.len() <= chars.len() {
            if chars[i..i + open.len()] == open[..] {
                let start = i + open.len();
                let mut j = start;
                while j + close.len() <= chars.len() && chars[j..j + close.len()] != close[..] {
                    j += 1;
                }
                out.push((start, j));
                i = j;
            } else {
                i += 1;
            }
        }
    }
    out.sort();
    out
}
