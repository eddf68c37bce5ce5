//! Shared inputs for the benchmarks: searched trees over the synthetic
//! domain with the in-process mock oracles.

use stepsearch_core::oracles::mock::{synthetic_problems, GoldConsistentValue, KeywordRetriever, SyntheticPolicy};
use stepsearch_core::{run_search, EngineConfig, Oracles, SearchTree};

/// Runs one search per synthetic problem with the given simulation budget.
pub fn searched_trees(count: usize, simulations: usize, seed: u64) -> Vec<SearchTree> {
    let retriever = KeywordRetriever::fixture();
    synthetic_problems(count, seed)
        .into_iter()
        .enumerate()
        .map(|(i, problem)| {
            let policy = SyntheticPolicy::new(seed + i as u64);
            let oracles = Oracles { policy: &policy, value: &GoldConsistentValue, retriever: &retriever };
            let config = EngineConfig { simulations, rng_seed: seed + i as u64, ..EngineConfig::default() };
            run_search(problem, &oracles, &config).expect("mock oracles do not fail")
        })
        .collect()
}
