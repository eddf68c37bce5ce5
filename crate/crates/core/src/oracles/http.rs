//! Blocking HTTP/1.1 JSON clients for the oracle protocol.

use serde::{de::DeserializeOwned, Serialize};

use super::wire::*;
use super::{
    OracleEndpoint, OracleError, PolicyOracle, PolicySample, ReflectionWriter, RetrievedDoc, Retriever, Scorer, State,
    ValueOracle,
};
use crate::grammar::Span;

/// Client for one endpoint. Every oracle call is an idempotent read, so
/// transport failures, timeouts and 5xx replies are retried up to
/// `endpoint.retries` times. A 4xx reply is final.
#[derive(Clone)]
pub struct HttpOracle {
    endpoint: OracleEndpoint,
    agent: ureq::Agent,
}

impl HttpOracle {
    pub fn new(endpoint: OracleEndpoint) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(endpoint.timeout).build();
        HttpOracle { endpoint, agent }
    }

    pub fn endpoint(&self) -> &OracleEndpoint {
        &self.endpoint
    }

    fn post_once<Req: Serialize, Resp: DeserializeOwned>(&self, url: &str, req: &Req) -> Result<Resp, OracleError> {
        let mut request = self.agent.post(url);
        if let Some(token) = &self.endpoint.auth_token {
            request = request.set("Authorization", &format!("Bearer {token}"));
        }
        match request.send_json(req) {
            Ok(resp) => resp.into_json::<Resp>().map_err(|e| OracleError::Malformed(e.to_string())),
            Err(ureq::Error::Status(code, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                if (400..500).contains(&code) {
                    Err(OracleError::InvalidQuery(format!("HTTP {code}: {body}")))
                } else {
                    Err(OracleError::Transport(format!("HTTP {code}: {body}")))
                }
            }
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                if msg.contains("timed out") || msg.contains("timeout") {
                    Err(OracleError::Timeout)
                } else {
                    Err(OracleError::Transport(msg))
                }
            }
        }
    }

    pub fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, req: &Req) -> Result<Resp, OracleError> {
        let url = format!("{}{path}", self.endpoint.base_url.trim_end_matches('/'));
        let attempts = self.endpoint.retries + 1;
        let mut last = None;
        for attempt in 1..=attempts {
            match self.post_once(&url, req) {
                Ok(resp) => return Ok(resp),
                Err(err @ OracleError::InvalidQuery(_)) => return Err(err),
                Err(err) => {
                    tracing::debug!(%url, attempt, error = %err, "oracle request failed");
                    last = Some(err);
                }
            }
        }
        Err(OracleError::Unavailable { attempts, last: Box::new(last.expect("at least one attempt")) })
    }
}

impl PolicyOracle for HttpOracle {
    fn sample(&self, state: &State<'_>, n: usize, temperature: f64) -> Result<Vec<PolicySample>, OracleError> {
        let req = SampleRequest { prefix: state.render(), n, temperature };
        let resp: SampleResponse = self.post(SAMPLE_PATH, &req)?;
        if resp.samples.len() != n {
            return Err(OracleError::Malformed(format!("asked for {n} samples, got {}", resp.samples.len())));
        }
        for s in &resp.samples {
            if s.seq_logprob > 0.0 || s.token_count == 0 {
                return Err(OracleError::Malformed("invalid sample statistics".into()));
            }
        }
        Ok(resp.samples)
    }
}

impl ValueOracle for HttpOracle {
    fn estimate(&self, state: &State<'_>) -> Result<f64, OracleError> {
        let resp: ValueResponse = self.post(VALUE_PATH, &ValueRequest { prefix: state.render() })?;
        Ok(resp.v)
    }
}

impl Retriever for HttpOracle {
    fn search(&self, query: &str, k: usize) -> Result<Vec<RetrievedDoc>, OracleError> {
        if query.trim().is_empty() {
            return Err(OracleError::InvalidQuery("empty query".into()));
        }
        let resp: SearchResponse = self.post(SEARCH_PATH, &SearchRequest { query: query.to_string(), k })?;
        let mut docs = resp.docs;
        docs.truncate(k);
        if docs.iter().enumerate().any(|(i, d)| d.rank as usize != i + 1) {
            return Err(OracleError::Malformed("document ranks must be 1..=k".into()));
        }
        Ok(docs)
    }
}

impl ReflectionWriter for HttpOracle {
    fn write(&self, prefix: &str, wrong: &str, target: &str) -> Result<String, OracleError> {
        let resp: ReflectResponse = self.post(
            REFLECT_PATH,
            &ReflectRequest { prefix: prefix.to_string(), wrong: wrong.to_string(), target: target.to_string() },
        )?;
        Ok(resp.text)
    }
}

impl Scorer for HttpOracle {
    fn logprob(&self, prefix: &str, completion: &str, mask_spans: &[Span]) -> Result<f64, OracleError> {
        let resp: LogprobResponse = self.post(
            LOGPROB_PATH,
            &LogprobRequest {
                prefix: prefix.to_string(),
                completion: completion.to_string(),
                mask_spans: mask_spans.to_vec(),
            },
        )?;
        Ok(resp.logprob)
    }
}
