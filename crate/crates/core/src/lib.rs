//! Stepwise tree search over XML reasoning steps, and construction of
//! preference-pair datasets from the finished trees.
//!
//! The search ([`mcts`]) grows a [`tree::SearchTree`] per multiple-choice
//! [`grammar::Problem`], consulting external [`oracles`] for candidate steps,
//! value estimates and retrieval. Finished trees feed [`pairs`] (sibling,
//! same-depth and other-node preference pairs) and [`porp`] (reflection
//! pairs). [`loss`] evaluates the training objective on supplied
//! log-probabilities, and [`pipeline`] holds the on-disk formats.

pub mod bleu;
pub mod config;
pub mod grammar;
pub mod loss;
pub mod mcts;
pub mod oracles;
pub mod pairs;
pub mod pipeline;
pub mod porp;
pub mod tree;

pub use config::{EngineConfig, PairConfig, Preset};
pub use grammar::{parse_step, parse_trajectory, Problem, Span, Step, Trajectory};
pub use loss::{LossInputs, LossWeights};
pub use mcts::{run_search, Oracles};
pub use pairs::{PairSource, PreferencePair};
pub use tree::{NodeId, SearchTree, TreeDump};

use std::hash::Hasher;

/// Stable 64-bit seed derived from a parent seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(&seed.to_le_bytes());
    h.write(label.as_bytes());
    h.finish()
}
