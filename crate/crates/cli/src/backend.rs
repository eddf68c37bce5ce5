use anyhow::{bail, Result};
use stepsearch_core::oracles::http::HttpOracle;
use stepsearch_core::oracles::mock::MockSuite;
use stepsearch_core::oracles::{PolicyOracle, ReflectionWriter, Retriever, Scorer, ValueOracle};
use stepsearch_core::pipeline::RunConfig;
use stepsearch_core::Oracles;

/// Oracle set selected by the `backend` config key.
pub struct Backend {
    pub policy: Box<dyn PolicyOracle>,
    pub value: Box<dyn ValueOracle>,
    pub retriever: Box<dyn Retriever>,
    pub reflection: Option<Box<dyn ReflectionWriter>>,
    pub scorer: Option<Box<dyn Scorer>>,
    pub ref_scorer: Option<Box<dyn Scorer>>,
}

impl Backend {
    pub fn from_config(config: &RunConfig, seed: u64) -> Result<Self> {
        match config.backend.as_str() {
            "mock" => {
                let m = MockSuite::new(seed);
                Ok(Backend {
                    policy: Box::new(m.policy),
                    value: Box::new(m.value),
                    retriever: Box::new(m.retriever),
                    reflection: Some(Box::new(m.reflection)),
                    scorer: Some(Box::new(m.scorer)),
                    ref_scorer: Some(Box::new(m.ref_scorer)),
                })
            }
            "http" => {
                let client = |url: &str| HttpOracle::new(config.endpoint(url));
                let optional = |url: &str| (!url.is_empty()).then(|| client(url));
                Ok(Backend {
                    policy: Box::new(client(&config.policy_url)),
                    value: Box::new(client(&config.value_url)),
                    retriever: Box::new(client(&config.retriever_url)),
                    reflection: optional(&config.reflection_url).map(|c| Box::new(c) as Box<dyn ReflectionWriter>),
                    scorer: optional(&config.scorer_url).map(|c| Box::new(c) as Box<dyn Scorer>),
                    ref_scorer: optional(&config.ref_scorer_url).map(|c| Box::new(c) as Box<dyn Scorer>),
                })
            }
            other => bail!("unknown backend {other:?}"),
        }
    }

    pub fn search_oracles(&self) -> Oracles<'_> {
        Oracles { policy: self.policy.as_ref(), value: self.value.as_ref(), retriever: self.retriever.as_ref() }
    }

    pub fn reflection(&self) -> Result<&dyn ReflectionWriter> {
        match &self.reflection {
            Some(r) => Ok(r.as_ref()),
            None => bail!("config has no reflection_url"),
        }
    }

    pub fn scorers(&self) -> Result<(&dyn Scorer, &dyn Scorer)> {
        match (&self.scorer, &self.ref_scorer) {
            (Some(a), Some(b)) => Ok((a.as_ref(), b.as_ref())),
            _ => bail!("config needs scorer_url and ref_scorer_url"),
        }
    }
}
