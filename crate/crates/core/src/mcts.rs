//! Selection, expansion, evaluation and backpropagation over one problem.
//!
//! Searches run without rollouts: a selected leaf is expanded, the leaf
//! itself is evaluated (terminal reward, or the value oracle otherwise), and
//! that value is backed up to the root. Children created by an expansion
//! stay unvisited until selection reaches them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bleu::symmetric_bleu4;
use crate::config::{ConfigError, EngineConfig};
use crate::grammar::{parse_step, Problem, Step};
use crate::oracles::{
    clamp_value, format_observation, OracleError, PolicyOracle, Retriever, State, ValueOracle, RETRIEVAL_FAILED,
};
use crate::tree::{NodeId, SearchTree, TreeError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("policy oracle unavailable: {0}")]
    PolicyUnavailable(OracleError),
    #[error("value oracle unavailable: {0}")]
    ValueOracleUnavailable(OracleError),
    #[error("node {0} is already expanded")]
    AlreadyExpanded(NodeId),
    #[error("node {0} is at the maximum depth")]
    DepthExceeded(NodeId),
    #[error("node {0} is terminal")]
    TerminalNode(NodeId),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// The oracles a search consults.
#[derive(Clone, Copy)]
pub struct Oracles<'a> {
    pub policy: &'a dyn PolicyOracle,
    pub value: &'a dyn ValueOracle,
    pub retriever: &'a dyn Retriever,
}

/// `q + c_puct * prior * sqrt(parent_visits) / (child_visits + 1)`.
pub fn puct_score(q: f64, prior: f64, parent_visits: u32, child_visits: u32, c_puct: f64) -> f64 {
    q + c_puct * prior * f64::from(parent_visits).sqrt() / (f64::from(child_visits) + 1.0)
}

fn can_expand(tree: &SearchTree, id: NodeId, config: &EngineConfig) -> bool {
    let node = tree.node(id).expect("node exists");
    !node.is_terminal && !node.expanded && node.depth < config.max_depth
}

/// Walks down from the root by maximum PUCT score (ties to the lowest child
/// index) until reaching a terminal, unexpanded or max-depth node, or one
/// whose children are all dead ends.
pub fn select_leaf(tree: &SearchTree, config: &EngineConfig) -> NodeId {
    let mut cur = tree.node(tree.root()).expect("root exists");
    loop {
        if cur.is_terminal || !cur.expanded || cur.depth >= config.max_depth {
            return cur.id;
        }
        let mut best: Option<(f64, NodeId)> = None;
        for &child_id in &cur.children {
            let child = tree.node(child_id).expect("child exists");
            if child.dead_end {
                continue;
            }
            let score = puct_score(child.q(), child.prior, cur.visits, child.visits, config.c_puct);
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, child_id));
            }
        }
        match best {
            Some((_, id)) => cur = tree.node(id).expect("child exists"),
            None => return cur.id,
        }
    }
}

/// Content compared when merging near-duplicate samples. Steps of different
/// kinds never merge.
fn merge_key(step: &Step) -> (u8, String) {
    match step {
        Step::Proposal(i) => (0, i.to_string()),
        Step::Thought(t) => (1, t.clone()),
        Step::Action(a) => (2, format!("{} {} {}", a.thought.as_deref().unwrap_or(""), a.tool, a.input)),
        Step::FinalAnswer(i) => (3, i.to_string()),
    }
}

fn check_expandable(tree: &SearchTree, id: NodeId, config: &EngineConfig) -> Result<(), EngineError> {
    let node = tree.node(id)?;
    if node.is_terminal {
        return Err(EngineError::TerminalNode(id));
    }
    if node.expanded {
        return Err(EngineError::AlreadyExpanded(id));
    }
    if node.depth >= config.max_depth {
        return Err(EngineError::DepthExceeded(id));
    }
    Ok(())
}

/// Samples `n_expand` steps from the policy and attaches the parsable,
/// de-duplicated ones as children.
///
/// Samples whose contents exceed `bleu_merge_threshold` against an earlier
/// kept sample fold into it (first text wins, prior masses add). Priors are
/// the length-normalized sample probabilities renormalized over the kept
/// set. Action steps get their observation from the retriever before they
/// are attached. If nothing parses the node becomes a dead end.
pub fn expand(
    tree: &mut SearchTree,
    id: NodeId,
    oracles: &Oracles<'_>,
    config: &EngineConfig,
) -> Result<Vec<NodeId>, EngineError> {
    check_expandable(tree, id, config)?;
    let n_options = tree.problem.num_options();
    let prefix = tree.path_to(id)?;
    let samples = oracles
        .policy
        .sample(&State::new(&tree.problem, &prefix), config.n_expand, config.temperature)
        .map_err(EngineError::PolicyUnavailable)?;

    let mut kept: Vec<(Step, (u8, String), f64)> = Vec::new();
    for sample in &samples {
        let step = match parse_step(&sample.step_text, n_options) {
            Ok(step) => step,
            Err(err) => {
                tracing::debug!(node = %id, error = %err, "dropping unparsable sample");
                continue;
            }
        };
        let mass = sample.normalized_prob();
        let mass = if mass.is_finite() { mass } else { 0.0 };
        let key = merge_key(&step);
        let existing = kept
            .iter_mut()
            .find(|(_, k, _)| k.0 == key.0 && symmetric_bleu4(&k.1, &key.1) > config.bleu_merge_threshold);
        match existing {
            Some(entry) => entry.2 += mass,
            None => kept.push((step, key, mass)),
        }
    }

    tree.node_mut(id)?.expanded = true;
    if kept.is_empty() {
        tracing::debug!(node = %id, "all samples unparsable; marking dead end");
        tree.node_mut(id)?.dead_end = true;
        return Ok(Vec::new());
    }

    let total: f64 = kept.iter().map(|k| k.2).sum();
    let uniform = 1.0 / kept.len() as f64;
    let mut children = Vec::with_capacity(kept.len());
    for (mut step, _, mass) in kept {
        if let Step::Action(action) = &mut step {
            let observation = match oracles.retriever.search(&action.input, config.top_k_retrieval) {
                Ok(docs) => format_observation(&docs),
                Err(err) => {
                    tracing::warn!(node = %id, error = %err, "retrieval failed");
                    RETRIEVAL_FAILED.to_string()
                }
            };
            action.observation = Some(observation);
        }
        let prior = if total > 0.0 { mass / total } else { uniform };
        children.push(tree.add_child(id, step, prior)?);
    }
    Ok(children)
}

/// Expands the root with proposals drawn uniformly over the options,
/// merging repeated draws; priors are uniform over distinct options.
pub fn random_proposal_expand<R: Rng>(
    tree: &mut SearchTree,
    config: &EngineConfig,
    rng: &mut R,
) -> Result<Vec<NodeId>, EngineError> {
    let root = tree.root();
    check_expandable(tree, root, config)?;
    let draws = draw_proposals(tree.problem.num_options(), config.n_expand, rng);
    let mut distinct: Vec<usize> = Vec::new();
    for option in draws {
        if !distinct.contains(&option) {
            distinct.push(option);
        }
    }
    tree.node_mut(root)?.expanded = true;
    let prior = 1.0 / distinct.len() as f64;
    distinct.into_iter().map(|option| Ok(tree.add_child(root, Step::Proposal(option), prior)?)).collect()
}

/// `n` i.i.d. uniform option indices.
pub fn draw_proposals<R: Rng>(num_options: usize, n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..num_options)).collect()
}

/// Terminal reward for a final answer.
pub fn terminal_reward(predicted: usize, gold: usize) -> f64 {
    if predicted == gold {
        1.0
    } else {
        -1.0
    }
}

/// Value of a node: the terminal reward, or the (cached) value-oracle
/// estimate clamped into [-1, 1].
pub fn evaluate(tree: &mut SearchTree, id: NodeId, value: &dyn ValueOracle) -> Result<f64, EngineError> {
    let node = tree.node(id)?;
    let v = if let Some(answer) = node.step.as_ref().and_then(Step::final_answer) {
        terminal_reward(answer, tree.problem.gold_answer)
    } else if let Some(cached) = node.leaf_value {
        cached
    } else {
        let path = tree.path_to(id)?;
        let raw = value.estimate(&State::new(&tree.problem, &path)).map_err(EngineError::ValueOracleUnavailable)?;
        clamp_value(raw)
    };
    tree.record_evaluation(id, v)?;
    Ok(v)
}

fn has_unexplored(tree: &SearchTree, config: &EngineConfig) -> bool {
    tree.nodes().any(|n| !n.is_terminal && !n.expanded && n.depth < config.max_depth)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SearchStats {
    pub simulations: usize,
    pub failed: usize,
    pub exhausted: bool,
}

fn simulate(
    tree: &mut SearchTree,
    oracles: &Oracles<'_>,
    config: &EngineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(), EngineError> {
    let leaf = select_leaf(tree, config);
    if can_expand(tree, leaf, config) {
        if leaf == tree.root() && config.random_proposal {
            random_proposal_expand(tree, config, rng)?;
        } else {
            expand(tree, leaf, oracles, config)?;
        }
    }
    let v = evaluate(tree, leaf, oracles.value)?;
    tree.backpropagate(leaf, v)?;
    Ok(())
}

/// Runs up to `config.simulations` simulations, stopping early once no
/// expandable node remains. Failed simulations are logged and count
/// against the budget.
pub fn run_search_with_stats(
    problem: Problem,
    oracles: &Oracles<'_>,
    config: &EngineConfig,
) -> Result<(SearchTree, SearchStats), EngineError> {
    config.validate()?;
    problem.validate().map_err(TreeError::from)?;
    let mut tree = SearchTree::new(problem, config.rng_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut stats = SearchStats::default();
    for sim in 0..config.simulations {
        if !has_unexplored(&tree, config) {
            stats.exhausted = true;
            break;
        }
        stats.simulations += 1;
        if let Err(err) = simulate(&mut tree, oracles, config, &mut rng) {
            tracing::warn!(problem = %tree.problem.id, sim, error = %err, "simulation failed");
            stats.failed += 1;
        }
    }
    Ok((tree, stats))
}

pub fn run_search(problem: Problem, oracles: &Oracles<'_>, config: &EngineConfig) -> Result<SearchTree, EngineError> {
    run_search_with_stats(problem, oracles, config).map(|(tree, _)| tree)
}
