//! Deterministic offline oracles and the synthetic problem domain.
//!
//! Randomness in every mock is keyed by `(seed, request)` rather than by
//! call order, so results do not depend on scheduling or worker count.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    OracleError, PolicyOracle, PolicySample, ReflectionWriter, RetrievedDoc, Retriever, Scorer, State, ValueOracle,
};
use crate::bleu::tokenize;
use crate::derive_seed;
use crate::grammar::{ActionStep, Problem, Span, Step, Trajectory};

/// Returns a fixed table of samples per rendered prefix.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    pub table: HashMap<String, Vec<PolicySample>>,
    pub fallback: Vec<PolicySample>,
}

impl ScriptedPolicy {
    pub fn new(fallback: Vec<PolicySample>) -> Self {
        ScriptedPolicy { table: HashMap::new(), fallback }
    }

    pub fn with_entry(mut self, prefix: String, samples: Vec<PolicySample>) -> Self {
        self.table.insert(prefix, samples);
        self
    }
}

impl PolicyOracle for ScriptedPolicy {
    fn sample(&self, state: &State<'_>, n: usize, temperature: f64) -> Result<Vec<PolicySample>, OracleError> {
        let entries = self.table.get(&state.render()).unwrap_or(&self.fallback);
        if entries.is_empty() {
            return Err(OracleError::Malformed("no scripted samples".into()));
        }
        if temperature == 0.0 {
            let best =
                entries.iter().reduce(|a, b| if b.seq_logprob > a.seq_logprob { b } else { a }).expect("non-empty");
            return Ok(vec![best.clone(); n]);
        }
        Ok(entries.iter().cycle().take(n).cloned().collect())
    }
}

pub fn sample_for(step: &Step, prob: f64) -> PolicySample {
    let text = step.raw_text();
    let token_count = tokenize(&text).len().max(1) as u32;
    PolicySample { step_text: text, seq_logprob: f64::from(token_count) * prob.ln(), token_count }
}

const GARBAGE: &str = "<step><thought>I will now";

/// Scripted reasoning domain in which a correct answer requires retrieving
/// knowledge and then thinking about it before answering.
///
/// * root: proposals, skewed towards option A;
/// * after a proposal: retrieve, think, or answer (always wrongly);
/// * after a retrieval: think about the observation (names the gold option),
///   retrieve again, or answer straight away (wrongly);
/// * after a thought that follows a retrieval: answer with the gold option or
///   keep thinking;
/// * after a thought with nothing retrieved yet: retrieve, think, or answer
///   (wrongly).
///
/// A fraction `garbage_rate` of samples are unparsable.
#[derive(Debug, Clone)]
pub struct SyntheticPolicy {
    pub seed: u64,
    pub garbage_rate: f64,
}

impl SyntheticPolicy {
    pub fn new(seed: u64) -> Self {
        SyntheticPolicy { seed, garbage_rate: 0.05 }
    }

    pub fn candidates(problem: &Problem, traj: &Trajectory) -> Vec<(Step, f64)> {
        let n = problem.num_options();
        let gold = problem.gold_answer;
        let proposal = traj.steps.iter().find_map(|s| match s {
            Step::Proposal(p) => Some(*p),
            _ => None,
        });
        let wrong = match proposal {
            Some(p) if p != gold => p,
            _ => (gold + 1) % n,
        };
        let retrieved = traj.steps.iter().any(Step::is_action);
        let depth = traj.len();
        let query = search_query(&problem.question);
        let action = |thought: &str, input: String| {
            Step::Action(ActionStep {
                thought: Some(thought.to_string()),
                tool: "retriever".into(),
                input,
                observation: None,
            })
        };
        match traj.steps.last() {
            None => {
                let raw: Vec<f64> = (0..n).map(|i| 0.55f64.powi(i as i32 + 1)).collect();
                let total: f64 = raw.iter().sum();
                raw.iter().enumerate().map(|(i, w)| (Step::Proposal(i), w / total)).collect()
            }
            Some(Step::Proposal(p)) => vec![
                (action("I need the provisions that govern this question.", query), 0.4),
                (
                    Step::Thought(format!(
                        "Suppose option {} holds and test it against the question wording.",
                        crate::grammar::option_letter(*p).unwrap_or('?')
                    )),
                    0.3,
                ),
                (Step::FinalAnswer(wrong), 0.3),
            ],
            Some(Step::Action(_)) => vec![
                (
                    Step::Thought(format!(
                        "The retrieved provisions show that option {} is the correct statement.",
                        crate::grammar::option_letter(gold).unwrap_or('?')
                    )),
                    0.5,
                ),
                (action("Look for exceptions as well.", format!("{query} exceptions")), 0.2),
                (Step::FinalAnswer(wrong), 0.3),
            ],
            Some(Step::Thought(_)) if retrieved => vec![
                (Step::FinalAnswer(gold), 0.6),
                (
                    Step::Thought(format!("Check the remaining options once more, pass {depth}, before committing.")),
                    0.4,
                ),
            ],
            Some(Step::Thought(_)) => vec![
                (action("Verify this against the law.", query), 0.5),
                (Step::Thought(format!("Weigh the options without sources, pass {depth}.")), 0.2),
                (Step::FinalAnswer(wrong), 0.3),
            ],
            Some(Step::FinalAnswer(_)) => Vec::new(),
        }
    }
}

/// Retrieval query the synthetic policy derives from a question.
pub fn search_query(question: &str) -> String {
    let words: Vec<String> = tokenize(question).into_iter().filter(|w| is_keyword(w)).take(6).collect();
    if words.is_empty() {
        question.trim().to_string()
    } else {
        words.join(" ")
    }
}

impl PolicyOracle for SyntheticPolicy {
    fn sample(&self, state: &State<'_>, n: usize, temperature: f64) -> Result<Vec<PolicySample>, OracleError> {
        let candidates = Self::candidates(state.problem, state.trajectory);
        if candidates.is_empty() {
            return Ok(vec![PolicySample { step_text: GARBAGE.into(), seq_logprob: -3.0, token_count: 3 }; n]);
        }
        let rendered = state.render();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("{n}|{temperature}|{rendered}")));
        if temperature <= 0.0 {
            let (step, p) = candidates.iter().fold(&candidates[0], |best, c| if c.1 > best.1 { c } else { best });
            return Ok(vec![sample_for(step, *p); n]);
        }
        let weights: Vec<f64> = candidates.iter().map(|(_, p)| p.powf(1.0 / temperature)).collect();
        let total: f64 = weights.iter().sum();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if rng.gen::<f64>() < self.garbage_rate {
                out.push(PolicySample { step_text: GARBAGE.into(), seq_logprob: -6.0, token_count: 3 });
                continue;
            }
            let mut u = rng.gen::<f64>() * total;
            let mut pick = candidates.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            let (step, p) = &candidates[pick];
            out.push(sample_for(step, *p));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantValue(pub f64);

impl ValueOracle for ConstantValue {
    fn estimate(&self, _state: &State<'_>) -> Result<f64, OracleError> {
        Ok(self.0)
    }
}

/// +0.9 on prefixes that follow the successful pattern of the synthetic
/// domain (proposal, retrievals, then thoughts), -0.9 elsewhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct GoldConsistentValue;

impl GoldConsistentValue {
    pub fn is_consistent(problem: &Problem, traj: &Trajectory) -> bool {
        let mut phase = 0;
        for (i, step) in traj.steps.iter().enumerate() {
            match step {
                Step::Proposal(_) if i == 0 => phase = 1,
                Step::Action(_) if phase == 1 || phase == 2 => phase = 2,
                Step::Thought(_) if phase == 2 || phase == 3 => phase = 3,
                Step::FinalAnswer(a) if phase == 3 => return *a == problem.gold_answer,
                _ => return false,
            }
        }
        true
    }
}

impl ValueOracle for GoldConsistentValue {
    fn estimate(&self, state: &State<'_>) -> Result<f64, OracleError> {
        Ok(if Self::is_consistent(state.problem, state.trajectory) { 0.9 } else { -0.9 })
    }
}

const STOPWORDS: &[&str] = &[
    "the",
    "and",
    "for",
    "are",
    "with",
    "which",
    "that",
    "this",
    "from",
    "under",
    "following",
    "statements",
    "statement",
    "correct",
    "what",
    "does",
    "its",
    "has",
    "have",
    "not",
    "can",
    "into",
    "over",
    "their",
    "there",
    "about",
    "true",
];

fn is_keyword(token: &str) -> bool {
    token.chars().count() >= 3 && !STOPWORDS.contains(&token)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Article {
    pub source_id: String,
    pub title: String,
    pub text: String,
}

/// Keyword index: documents are ranked by how many distinct query keywords
/// they contain; documents matching none are not returned.
#[derive(Debug, Clone)]
pub struct KeywordRetriever {
    articles: Vec<(Article, Vec<String>)>,
}

impl KeywordRetriever {
    pub fn new(articles: Vec<Article>) -> Self {
        let articles = articles
            .into_iter()
            .map(|a| {
                let mut tokens = tokenize(&format!("{} {}", a.title, a.text));
                tokens.sort();
                tokens.dedup();
                (a, tokens)
            })
            .collect();
        KeywordRetriever { articles }
    }

    pub fn fixture() -> Self {
        Self::new(fixture_articles())
    }
}

impl Retriever for KeywordRetriever {
    fn search(&self, query: &str, k: usize) -> Result<Vec<RetrievedDoc>, OracleError> {
        if query.trim().is_empty() {
            return Err(OracleError::InvalidQuery("empty query".into()));
        }
        if k == 0 {
            return Err(OracleError::InvalidQuery("k must be positive".into()));
        }
        let mut keywords: Vec<String> = tokenize(query).into_iter().filter(|t| is_keyword(t)).collect();
        keywords.sort();
        keywords.dedup();
        let mut scored: Vec<(usize, usize)> = self
            .articles
            .iter()
            .enumerate()
            .map(|(i, (_, tokens))| {
                let hits = keywords.iter().filter(|k| tokens.binary_search(k).is_ok()).count();
                (i, hits)
            })
            .filter(|&(_, hits)| hits > 0)
            .collect();
        scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(rank, (i, _))| RetrievedDoc {
                rank: rank as u32 + 1,
                text: self.articles[i].0.text.clone(),
                source_id: self.articles[i].0.source_id.clone(),
            })
            .collect())
    }
}

/// Fills a fixed template naming the first thought of the wrong branch.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateReflection;

impl ReflectionWriter for TemplateReflection {
    fn write(&self, prefix: &str, wrong: &str, target: &str) -> Result<String, OracleError> {
        if prefix.is_empty() || wrong.is_empty() || target.is_empty() {
            return Err(OracleError::InvalidQuery("reflection inputs must be non-empty".into()));
        }
        let subject = first_element(wrong, "thought")
            .or_else(|| first_element(wrong, "action_input"))
            .unwrap_or_else(|| "the previous steps".to_string());
        Ok(format!(
            "The previous reasoning about {subject} is flawed; reconsidering the question from the retrieved knowledge."
        ))
    }
}

fn first_element(text: &str, tag: &str) -> Option<String> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let end = start + text[start..].find(&close)?;
    let body = crate::grammar::unescape(text[start..end].trim());
    let body = body.trim_end_matches('.').to_string();
    (!body.is_empty()).then_some(body)
}

/// Log-probability proportional to the number of unmasked characters, with
/// a small deterministic per-request jitter.
#[derive(Debug, Clone, Copy)]
pub struct MockScorer {
    pub seed: u64,
    pub nats_per_char: f64,
}

impl MockScorer {
    pub fn new(seed: u64, nats_per_char: f64) -> Self {
        MockScorer { seed, nats_per_char }
    }
}

pub fn unmasked_chars(text: &str, mask_spans: &[Span]) -> usize {
    text.chars().enumerate().filter(|(i, _)| !mask_spans.iter().any(|s| s.start <= *i && *i < s.end)).count()
}

impl Scorer for MockScorer {
    fn logprob(&self, prefix: &str, completion: &str, mask_spans: &[Span]) -> Result<f64, OracleError> {
        let total = completion.chars().count();
        if mask_spans.iter().any(|s| s.start > s.end || s.end > total) {
            return Err(OracleError::InvalidQuery("mask span out of bounds".into()));
        }
        let chars = unmasked_chars(completion, mask_spans) as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("{prefix}\u{0}{completion}")));
        let jitter = 1.0 + 0.1 * rng.gen::<f64>();
        Ok(-self.nats_per_char * chars * jitter)
    }
}

/// The full offline oracle set.
pub struct MockSuite {
    pub policy: SyntheticPolicy,
    pub value: GoldConsistentValue,
    pub retriever: KeywordRetriever,
    pub reflection: TemplateReflection,
    pub scorer: MockScorer,
    pub ref_scorer: MockScorer,
}

impl MockSuite {
    pub fn new(seed: u64) -> Self {
        MockSuite {
            policy: SyntheticPolicy::new(seed),
            value: GoldConsistentValue,
            retriever: KeywordRetriever::fixture(),
            reflection: TemplateReflection,
            scorer: MockScorer::new(derive_seed(seed, "policy-scorer"), 0.02),
            ref_scorer: MockScorer::new(derive_seed(seed, "reference-scorer"), 0.025),
        }
    }
}

const ARTICLES: &[(&str, &str)] = &[
    (
        "Exclusive Economic Zone",
        "The Exclusive Economic Zone (EEZ) is an area beyond and adjacent to the territorial sea of a coastal state, in which the coastal state has sovereign rights for exploring, exploiting, conserving and managing natural resources. The coastal state does not have territorial sovereignty over the EEZ; other states enjoy freedom of navigation and overflight there.",
    ),
    (
        "Territorial Sea",
        "Every state may establish the breadth of its territorial sea up to a limit not exceeding twelve nautical miles. Ships of all states enjoy the right of innocent passage through the territorial sea.",
    ),
    (
        "Contract Formation",
        "A contract is formed when an offer is accepted. An acceptance that materially alters the terms of the offer is a rejection and a counter-offer.",
    ),
    (
        "Statute of Limitations",
        "The limitation period for civil claims is three years from the date the claimant knew or should have known of the infringement of its rights.",
    ),
    (
        "Self Defense",
        "Conduct undertaken to stop an ongoing unlawful infringement is justified self defense and bears no criminal liability, unless the defense manifestly exceeds the necessary limit.",
    ),
    (
        "Adverse Possession",
        "Open, continuous and exclusive possession of land for the statutory period may vest title in the possessor against the registered owner.",
    ),
    (
        "Administrative Reconsideration",
        "A citizen who believes an administrative act infringes lawful rights may apply for administrative reconsideration within sixty days of learning of the act.",
    ),
    (
        "Inheritance Order",
        "Statutory heirs in the first order are the spouse, children and parents. Heirs in the second order inherit only when there is no heir in the first order.",
    ),
    (
        "Trademark Registration",
        "A trademark must be distinctive. Signs identical to state flags or generic names of goods may not be registered as trademarks.",
    ),
    (
        "Labor Contract Probation",
        "The probation period of a labor contract with a term of one to three years may not exceed two months, and wages during probation may not fall below eighty percent of the agreed wage.",
    ),
    (
        "Guarantee Liability",
        "A general guarantor may refuse to perform the guarantee obligation until the principal debtor's property has been enforced against without satisfying the debt.",
    ),
    (
        "Criminal Attempt",
        "An attempted crime is one where the offender has begun to commit the crime but fails to complete it for reasons independent of the offender's will; it may be punished more leniently than the completed crime.",
    ),
    (
        "Marriage Validity",
        "A marriage is void where either party has a spouse, where the parties are close blood relatives, or where a party has not reached the statutory marriage age.",
    ),
    (
        "Product Liability",
        "A producer is liable for damage caused by a defect in its product regardless of fault, unless it proves the defect did not exist when the product was put into circulation.",
    ),
    (
        "Diplomatic Immunity",
        "Diplomatic agents enjoy immunity from the criminal jurisdiction of the receiving state; the sending state may expressly waive that immunity.",
    ),
    (
        "Company Shareholder Meeting",
        "Resolutions to amend the articles of association or to merge the company require approval by shareholders representing two thirds of the voting rights.",
    ),
    (
        "Evidence Burden",
        "In civil litigation a party bears the burden of providing evidence for the facts on which its own claims rest, save where the law reverses that burden.",
    ),
    (
        "Tort Negligence",
        "A person who through fault infringes the civil rights of another and causes damage bears tort liability; contributory fault of the victim may reduce that liability.",
    ),
    (
        "Environmental Impact Assessment",
        "Construction projects that may significantly affect the environment must complete an environmental impact assessment before construction begins.",
    ),
    (
        "Consumer Return Right",
        "A consumer who purchases goods online may return them within seven days of receipt without giving reasons, except for customized goods and perishable items.",
    ),
];

pub fn fixture_articles() -> Vec<Article> {
    ARTICLES
        .iter()
        .enumerate()
        .map(|(i, (title, text))| Article {
            source_id: format!("art-{:02}", i + 1),
            title: title.to_string(),
            text: text.to_string(),
        })
        .collect()
}

/// Multiple-choice problems over the fixture articles, one per article in
/// rotation, with seeded gold answers.
pub fn synthetic_problems(count: usize, seed: u64) -> Vec<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synthetic-problems"));
    (0..count)
        .map(|i| {
            let (title, _) = ARTICLES[i % ARTICLES.len()];
            let gold = rng.gen_range(0..4);
            let options = (0..4)
                .map(|j| {
                    if j == gold {
                        format!("The statement about {title} consistent with the governing provision.")
                    } else {
                        format!("A misreading of the {title} rule, variant {}.", j + 1)
                    }
                })
                .collect();
            Problem {
                id: format!("syn-{i:04}"),
                question: format!("Regarding {title}, which of the following statements is correct? (case {i})"),
                options,
                gold_answer: gold,
            }
        })
        .collect()
}
