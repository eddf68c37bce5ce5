//! External services consulted by the search and the pipeline.
//!
//! Each service is a trait with a deterministic mock ([`mock`]) and an
//! HTTP/JSON client ([`http`]); both speak the same request and response
//! types from [`wire`].

pub mod http;
pub mod mock;
pub mod wire;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{escape, letter_index, option_letter, parse_trajectory, unescape, Problem, Span, Trajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: u32, last: Box<OracleError> },
}

/// One candidate step returned by the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySample {
    #[serde(rename = "text")]
    pub step_text: String,
    pub seq_logprob: f64,
    pub token_count: u32,
}

impl PolicySample {
    /// Geometric-mean token probability, the per-step prior mass.
    pub fn normalized_prob(&self) -> f64 {
        (self.seq_logprob / f64::from(self.token_count.max(1))).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedDoc {
    pub rank: u32,
    pub text: String,
    pub source_id: String,
}

/// Connection settings for one HTTP oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEndpoint {
    pub base_url: String,
    #[serde(with = "duration_ms")]
    pub timeout: Duration,
    pub retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token: Option<String>,
}

impl OracleEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        OracleEndpoint { base_url: base_url.into(), timeout: Duration::from_secs(30), retries: 2, auth_token: None }
    }
}

mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// A search state: the problem plus the steps taken so far.
#[derive(Debug, Clone, Copy)]
pub struct State<'a> {
    pub problem: &'a Problem,
    pub trajectory: &'a Trajectory,
}

pub const PREAMBLE: &str = "Answer the multiple-choice question. Reason in <step> elements using \
<proposal>, <thought>, <action> with <action_input>, and <final_answer> tags.";

impl<'a> State<'a> {
    pub fn new(problem: &'a Problem, trajectory: &'a Trajectory) -> Self {
        State { problem, trajectory }
    }

    /// The exact text sent to remote oracles.
    pub fn render(&self) -> String {
        render_prefix(self.problem, self.trajectory)
    }
}

/// Preamble, question, lettered options, then the serialized steps.
///
/// ```text
/// {PREAMBLE}
/// <question>{question}</question>
/// <options>
/// A: {option}
/// ...
/// </options>
/// {steps joined by single spaces}
/// ```
pub fn render_prefix(problem: &Problem, trajectory: &Trajectory) -> String {
    let mut out = String::new();
    out.push_str(PREAMBLE);
    out.push_str("\n<question>");
    out.push_str(&escape(&problem.question));
    out.push_str("</question>\n<options>\n");
    for (i, option) in problem.options.iter().enumerate() {
        out.push(option_letter(i).expect("validated option count"));
        out.push_str(": ");
        out.push_str(&escape(&option.replace('\n', " ")));
        out.push('\n');
    }
    out.push_str("</options>\n");
    out.push_str(&trajectory.raw_text());
    out
}

/// Question, options and trajectory recovered from [`render_prefix`] output.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedState {
    pub question: String,
    pub options: Vec<String>,
    pub trajectory: Trajectory,
}

pub fn parse_rendered(text: &str) -> Result<RenderedState, OracleError> {
    let bad = |m: &str| OracleError::Malformed(format!("rendered prefix: {m}"));
    let q_start = text.find("<question>").ok_or_else(|| bad("no <question>"))? + "<question>".len();
    let q_end = text.find("</question>").ok_or_else(|| bad("no </question>"))?;
    let o_start = text.find("<options>\n").ok_or_else(|| bad("no <options>"))? + "<options>\n".len();
    let o_end = text.find("</options>\n").ok_or_else(|| bad("no </options>"))?;
    if !(q_start <= q_end && q_end < o_start && o_start <= o_end) {
        return Err(bad("sections out of order"));
    }
    let mut options = Vec::new();
    for (i, line) in text[o_start..o_end].lines().enumerate() {
        let (letter, body) = line.split_once(": ").ok_or_else(|| bad("option line"))?;
        let mut chars = letter.chars();
        match (chars.next().and_then(|c| letter_index(c, 26)), chars.next()) {
            (Some(idx), None) if idx == i => {}
            _ => return Err(bad("option letters out of sequence")),
        }
        options.push(unescape(body));
    }
    let steps = &text[o_end + "</options>\n".len()..];
    let trajectory =
        parse_trajectory(steps, options.len().max(1)).map_err(|e| OracleError::Malformed(e.to_string()))?;
    Ok(RenderedState { question: unescape(&text[q_start..q_end]), options, trajectory })
}

pub trait PolicyOracle: Send + Sync {
    /// Returns exactly `n` candidate next steps.
    fn sample(&self, state: &State<'_>, n: usize, temperature: f64) -> Result<Vec<PolicySample>, OracleError>;
}

pub trait ValueOracle: Send + Sync {
    /// Raw scalar estimate; callers clamp with [`clamp_value`].
    fn estimate(&self, state: &State<'_>) -> Result<f64, OracleError>;
}

pub trait Retriever: Send + Sync {
    fn search(&self, query: &str, k: usize) -> Result<Vec<RetrievedDoc>, OracleError>;
}

pub trait ReflectionWriter: Send + Sync {
    fn write(&self, prefix: &str, wrong: &str, target: &str) -> Result<String, OracleError>;
}

/// Sequence log-probability of `completion` given `prefix`, excluding
/// characters inside `mask_spans` (offsets into `completion`).
pub trait Scorer: Send + Sync {
    fn logprob(&self, prefix: &str, completion: &str, mask_spans: &[Span]) -> Result<f64, OracleError>;
}

/// Clamps a value estimate into [-1, 1]; NaN maps to 0.
pub fn clamp_value(v: f64) -> f64 {
    if v.is_nan() {
        tracing::warn!("value oracle returned NaN, using 0");
        return 0.0;
    }
    let clamped = v.clamp(-1.0, 1.0);
    if clamped != v {
        tracing::warn!(raw = v, "value estimate out of range, clamped to {clamped}");
    }
    clamped
}

/// Joins retrieved documents into observation text.
pub fn format_observation(docs: &[RetrievedDoc]) -> String {
    docs.iter().map(|d| format!("[{}] {}", d.rank, d.text)).collect::<Vec<_>>().join("\n")
}

pub const RETRIEVAL_FAILED: &str = "[retrieval-failed]";
