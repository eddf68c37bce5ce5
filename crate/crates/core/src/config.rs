use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid config: {0}")]
pub struct ConfigError(pub String);

/// Search hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub c_puct: f64,
    /// Samples requested per expansion.
    pub n_expand: usize,
    pub temperature: f64,
    pub max_depth: usize,
    pub simulations: usize,
    pub top_k_retrieval: usize,
    pub bleu_merge_threshold: f64,
    pub random_proposal: bool,
    pub rng_seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            c_puct: 1.5,
            n_expand: 4,
            temperature: 1.0,
            max_depth: 16,
            simulations: 40,
            top_k_retrieval: 3,
            bleu_merge_threshold: 0.7,
            random_proposal: true,
            rng_seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError(m.into()));
        if !(self.c_puct.is_finite() && self.c_puct > 0.0) {
            return fail("c_puct must be finite and positive");
        }
        if self.n_expand == 0 {
            return fail("n_expand must be positive");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return fail("temperature must be finite and non-negative");
        }
        if self.max_depth == 0 {
            return fail("max_depth must be positive");
        }
        if self.top_k_retrieval == 0 {
            return fail("top_k_retrieval must be positive");
        }
        if !(self.bleu_merge_threshold > 0.0 && self.bleu_merge_threshold <= 1.0) {
            return fail("bleu_merge_threshold must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn with_preset(mut self, preset: Preset) -> Self {
        self.simulations = preset.simulations();
        self
    }
}

/// Simulation budget presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Standard,
    /// Doubled budget for trees mined for reflection pairs.
    Reflection,
}

impl Preset {
    pub fn simulations(self) -> usize {
        match self {
            Preset::Standard => 40,
            Preset::Reflection => 80,
        }
    }
}

/// Pair-sampling parameters shared by normal and reflection pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    /// Maximum pairs per problem.
    pub epsilon: usize,
    /// Minimum Q gap between chosen and rejected.
    pub delta: f64,
    pub gap_weight: f64,
    pub length_weight: f64,
    /// Split reflection text into one thought per blank-line paragraph.
    pub split_reflection_paragraphs: bool,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig { epsilon: 20, delta: 0.1, gap_weight: 1.0, length_weight: 0.2, split_reflection_paragraphs: false }
    }
}

impl PairConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.epsilon < 4 {
            return Err(ConfigError("epsilon must be at least 4".into()));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(ConfigError("delta must be finite and non-negative".into()));
        }
        Ok(())
    }
}
