//! JSON bodies of the oracle HTTP protocol, and a dispatcher that answers
//! them from in-process oracles (used to stand up mock servers).

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{
    OracleError, PolicyOracle, PolicySample, ReflectionWriter, RetrievedDoc, Retriever, Scorer, State, ValueOracle,
};
use crate::grammar::{Problem, Span};

pub const SAMPLE_PATH: &str = "/v1/sample";
pub const VALUE_PATH: &str = "/v1/value";
pub const SEARCH_PATH: &str = "/v1/search";
pub const REFLECT_PATH: &str = "/v1/reflect";
pub const LOGPROB_PATH: &str = "/v1/logprob";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub prefix: String,
    pub n: usize,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResponse {
    pub samples: Vec<PolicySample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueRequest {
    pub prefix: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueResponse {
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub query: String,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub docs: Vec<RetrievedDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectRequest {
    pub prefix: String,
    pub wrong: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobRequest {
    pub prefix: String,
    pub completion: String,
    pub mask_spans: Vec<Span>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobResponse {
    pub logprob: f64,
}

/// Serves the oracle protocol from in-process implementations.
///
/// The policy and value endpoints receive only rendered text, so the
/// dispatcher recovers the problem by matching the rendered question and
/// options against `problems`.
pub struct Dispatcher<'a> {
    pub problems: Vec<Problem>,
    pub policy: &'a dyn PolicyOracle,
    pub value: &'a dyn ValueOracle,
    pub retriever: &'a dyn Retriever,
    pub reflection: &'a dyn ReflectionWriter,
    pub scorer: &'a dyn Scorer,
}

/// A dispatcher reply: HTTP status and JSON body.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub status: u16,
    pub body: String,
}

fn decode<T: DeserializeOwned>(body: &str) -> Result<T, Reply> {
    serde_json::from_str(body).map_err(|e| error_reply(400, &e.to_string()))
}

fn error_reply(status: u16, msg: &str) -> Reply {
    Reply { status, body: serde_json::json!({ "error": msg }).to_string() }
}

fn ok<T: Serialize>(value: &T) -> Reply {
    Reply { status: 200, body: serde_json::to_string(value).expect("wire types serialize") }
}

fn oracle_reply(err: OracleError) -> Reply {
    match err {
        OracleError::InvalidQuery(m) | OracleError::Malformed(m) => error_reply(400, &m),
        other => error_reply(503, &other.to_string()),
    }
}

impl Dispatcher<'_> {
    pub fn handle(&self, path: &str, body: &str) -> Reply {
        self.route(path, body).unwrap_or_else(|reply| reply)
    }

    fn problem_for(&self, prefix: &str) -> Result<(Problem, crate::grammar::Trajectory), Reply> {
        let state = super::parse_rendered(prefix).map_err(oracle_reply)?;
        let problem = self
            .problems
            .iter()
            .find(|p| p.question == state.question && p.options == state.options)
            .ok_or_else(|| error_reply(404, "unknown problem"))?;
        Ok((problem.clone(), state.trajectory))
    }

    fn route(&self, path: &str, body: &str) -> Result<Reply, Reply> {
        match path {
            SAMPLE_PATH => {
                let req: SampleRequest = decode(body)?;
                let (problem, traj) = self.problem_for(&req.prefix)?;
                let samples =
                    self.policy.sample(&State::new(&problem, &traj), req.n, req.temperature).map_err(oracle_reply)?;
                Ok(ok(&SampleResponse { samples }))
            }
            VALUE_PATH => {
                let req: ValueRequest = decode(body)?;
                let (problem, traj) = self.problem_for(&req.prefix)?;
                let v = self.value.estimate(&State::new(&problem, &traj)).map_err(oracle_reply)?;
                Ok(ok(&ValueResponse { v }))
            }
            SEARCH_PATH => {
                let req: SearchRequest = decode(body)?;
                let docs = self.retriever.search(&req.query, req.k).map_err(oracle_reply)?;
                Ok(ok(&SearchResponse { docs }))
            }
            REFLECT_PATH => {
                let req: ReflectRequest = decode(body)?;
                let text = self.reflection.write(&req.prefix, &req.wrong, &req.target).map_err(oracle_reply)?;
                Ok(ok(&ReflectResponse { text }))
            }
            LOGPROB_PATH => {
                let req: LogprobRequest = decode(body)?;
                let logprob =
                    self.scorer.logprob(&req.prefix, &req.completion, &req.mask_spans).map_err(oracle_reply)?;
                Ok(ok(&LogprobResponse { logprob }))
            }
            _ => Err(error_reply(404, "no such endpoint")),
        }
    }
}
