//! On-disk formats and the per-item steps behind the command-line driver.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{EngineConfig, PairConfig};
use crate::derive_seed;
use crate::grammar::{
    is_non_thought_terminal, letter_index, parse_trajectory, GrammarError, Problem, Step, Trajectory,
};
use crate::loss::{loss_terms, LossError, LossInputs, LossRecord, LossWeights};
use crate::oracles::{render_prefix, OracleEndpoint, OracleError, Scorer, State, ValueOracle};
use crate::pairs::{PairRecord, PairSource, PreferencePair};
use crate::tree::{SearchTree, TreeDump};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Answer given as a letter (`"B"`) or a zero-based index (`1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnswerField {
    Index(usize),
    Letter(String),
}

/// One line of a problems file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemRecord {
    pub id: String,
    pub question: String,
    pub options: Vec<String>,
    pub answer: AnswerField,
}

/// Ids become file names, so they are restricted to a portable alphabet.
pub fn check_id(id: &str) -> Result<(), String> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(format!("id {id:?} must be non-empty ASCII letters, digits, '-', '_' or '.'"))
    }
}

impl ProblemRecord {
    pub fn into_problem(self) -> Result<Problem, String> {
        check_id(&self.id)?;
        let n = self.options.len();
        let gold = match &self.answer {
            AnswerField::Index(i) => *i,
            AnswerField::Letter(s) => {
                let mut chars = s.trim().chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => letter_index(c, n).ok_or_else(|| format!("answer {s:?} out of range"))?,
                    _ => return Err(format!("answer {s:?} is not a single letter")),
                }
            }
        };
        Problem::new(self.id, self.question, self.options, gold).map_err(|e| e.to_string())
    }

    pub fn from_problem(p: &Problem) -> Self {
        ProblemRecord {
            id: p.id.clone(),
            question: p.question.clone(),
            options: p.options.clone(),
            answer: AnswerField::Index(p.gold_answer),
        }
    }
}

/// Parses a problems file. Blank lines are skipped; bad lines are returned
/// with their 1-based line numbers, as are duplicate ids.
pub fn parse_problems(text: &str) -> (Vec<Problem>, Vec<FormatError>) {
    let mut problems = Vec::new();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<ProblemRecord>(line)
            .map_err(|e| e.to_string())
            .and_then(ProblemRecord::into_problem);
        match parsed {
            Ok(p) if !seen.insert(p.id.clone()) => {
                errors.push(FormatError::Line { line: i + 1, message: format!("duplicate id {}", p.id) })
            }
            Ok(p) => problems.push(p),
            Err(message) => errors.push(FormatError::Line { line: i + 1, message }),
        }
    }
    (problems, errors)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, FormatError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| FormatError::Line { line: i + 1, message: e.to_string() }))
        .collect()
}

pub fn dump_file_name(problem_id: &str) -> String {
    format!("{problem_id}.json")
}

pub fn tree_to_json(tree: &SearchTree) -> String {
    let mut s = serde_json::to_string_pretty(&tree.to_dump()).expect("dump serializes");
    s.push('\n');
    s
}

pub fn tree_from_json(text: &str) -> Result<SearchTree, FormatError> {
    let dump: TreeDump = serde_json::from_str(text)?;
    SearchTree::from_dump(&dump).map_err(|e| FormatError::Invalid(e.to_string()))
}

/// Flat run configuration: search, pair and loss parameters plus oracle
/// endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub c_puct: f64,
    pub n_expand: usize,
    pub temperature: f64,
    pub max_depth: usize,
    pub simulations: usize,
    pub top_k_retrieval: usize,
    pub bleu_merge_threshold: f64,
    pub random_proposal: bool,
    pub epsilon: usize,
    pub delta: f64,
    pub gap_weight: f64,
    pub length_weight: f64,
    pub split_reflection_paragraphs: bool,
    pub beta: f64,
    pub gamma: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    /// `"mock"` or `"http"`.
    pub backend: String,
    pub policy_url: String,
    pub value_url: String,
    pub retriever_url: String,
    pub reflection_url: String,
    pub scorer_url: String,
    pub ref_scorer_url: String,
    pub timeout_ms: u64,
    pub retries: u32,
    pub auth_token: Option<String>,
    /// Round whose policy produced the reference log-probabilities.
    pub reference_round: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = EngineConfig::default();
        let p = PairConfig::default();
        let w = LossWeights::default();
        RunConfig {
            c_puct: e.c_puct,
            n_expand: e.n_expand,
            temperature: e.temperature,
            max_depth: e.max_depth,
            simulations: e.simulations,
            top_k_retrieval: e.top_k_retrieval,
            bleu_merge_threshold: e.bleu_merge_threshold,
            random_proposal: e.random_proposal,
            epsilon: p.epsilon,
            delta: p.delta,
            gap_weight: p.gap_weight,
            length_weight: p.length_weight,
            split_reflection_paragraphs: p.split_reflection_paragraphs,
            beta: w.beta,
            gamma: w.gamma,
            alpha1: w.alpha1,
            alpha2: w.alpha2,
            alpha3: w.alpha3,
            backend: "mock".into(),
            policy_url: String::new(),
            value_url: String::new(),
            retriever_url: String::new(),
            reflection_url: String::new(),
            scorer_url: String::new(),
            ref_scorer_url: String::new(),
            timeout_ms: 30_000,
            retries: 2,
            auth_token: None,
            reference_round: None,
        }
    }
}

impl RunConfig {
    pub fn engine(&self, rng_seed: u64) -> EngineConfig {
        EngineConfig {
            c_puct: self.c_puct,
            n_expand: self.n_expand,
            temperature: self.temperature,
            max_depth: self.max_depth,
            simulations: self.simulations,
            top_k_retrieval: self.top_k_retrieval,
            bleu_merge_threshold: self.bleu_merge_threshold,
            random_proposal: self.random_proposal,
            rng_seed,
        }
    }

    pub fn pairs(&self) -> PairConfig {
        PairConfig {
            epsilon: self.epsilon,
            delta: self.delta,
            gap_weight: self.gap_weight,
            length_weight: self.length_weight,
            split_reflection_paragraphs: self.split_reflection_paragraphs,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            gamma: self.gamma,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            alpha3: self.alpha3,
        }
    }

    pub fn endpoint(&self, url: &str) -> OracleEndpoint {
        OracleEndpoint {
            base_url: url.to_string(),
            timeout: std::time::Duration::from_millis(self.timeout_ms),
            retries: self.retries,
            auth_token: self.auth_token.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.engine(0).validate().map_err(|e| e.to_string())?;
        self.pairs().validate().map_err(|e| e.to_string())?;
        match self.backend.as_str() {
            "mock" => Ok(()),
            "http" => {
                let urls = [
                    ("policy_url", &self.policy_url),
                    ("value_url", &self.value_url),
                    ("retriever_url", &self.retriever_url),
                ];
                match urls.iter().find(|(_, u)| u.is_empty()) {
                    Some((name, _)) => Err(format!("http backend needs {name}")),
                    None => Ok(()),
                }
            }
            other => Err(format!("unknown backend {other:?}")),
        }
    }
}

/// Seed of one problem's search within a run.
pub fn problem_seed(run_seed: u64, problem_id: &str) -> u64 {
    derive_seed(run_seed, &format!("search/{problem_id}"))
}

pub fn pair_seed(run_seed: u64, problem_id: &str) -> u64 {
    derive_seed(run_seed, &format!("pairs/{problem_id}"))
}

pub fn reflection_seed(run_seed: u64, problem_id: &str) -> u64 {
    derive_seed(run_seed, &format!("reflection/{problem_id}"))
}

/// The data side of one training round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundManifest {
    /// 0 is the warmup round.
    pub round_index: usize,
    pub config: RunConfig,
    pub problems: String,
    pub trees_dir: String,
    pub pair_files: Vec<String>,
    pub seed: u64,
    pub problem_seeds: BTreeMap<String, u64>,
}

impl RoundManifest {
    pub fn validate(&self) -> Result<(), String> {
        self.config.validate()?;
        if let Some(r) = self.config.reference_round {
            if r >= self.round_index.max(1) {
                return Err(format!("reference round {r} is not earlier than round {}", self.round_index));
            }
        }
        for (id, s) in &self.problem_seeds {
            if *s != problem_seed(self.seed, id) {
                return Err(format!("seed of {id} does not derive from the run seed"));
            }
        }
        Ok(())
    }
}

/// The tag-skeleton stage of the warmup corpus: proposals and final answers
/// only.
pub fn warmup_stage1(traj: &Trajectory) -> Trajectory {
    Trajectory::new(
        traj.steps.iter().filter(|s| matches!(s, Step::Proposal(_) | Step::FinalAnswer(_))).cloned().collect(),
    )
}

/// Splits a one-trajectory-per-line corpus. Stage 2 is the input unchanged.
pub fn warmup_split(corpus: &str, num_options: usize) -> (String, String, Vec<FormatError>) {
    let mut stage1 = String::new();
    let mut stage2 = String::new();
    let mut errors = Vec::new();
    for (i, line) in corpus.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_trajectory(line, num_options) {
            Ok(t) if t.terminal() => {
                stage1.push_str(&warmup_stage1(&t).raw_text());
                stage1.push('\n');
                stage2.push_str(line);
                stage2.push('\n');
            }
            Ok(_) => errors.push(FormatError::Line { line: i + 1, message: "trajectory has no final answer".into() }),
            Err(e) => errors.push(FormatError::Line { line: i + 1, message: e.to_string() }),
        }
    }
    (stage1, stage2, errors)
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub problem_id: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub problem_id: String,
    pub output: String,
    pub extracted: Option<usize>,
    pub guessed: bool,
}

fn final_answer_pattern() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?is)<final_answer>(.*?)</final_answer>").expect("valid pattern"))
}

fn letter_pattern() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b([A-Z])\b").expect("valid pattern"))
}

/// The answer in a final-answer tag, else the first standalone in-range
/// capital letter.
pub fn extract_answer(text: &str, num_options: usize) -> Option<usize> {
    for cap in final_answer_pattern().captures_iter(text) {
        let body = cap[1].trim();
        let mut chars = body.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            if let Some(i) = letter_index(c, num_options) {
                return Some(i);
            }
        }
    }
    letter_pattern().captures_iter(text).find_map(|cap| letter_index(cap[1].chars().next()?, num_options))
}

/// Guess stream for a problem, independent of the search streams.
pub fn guess(seed: u64, problem_id: &str, num_options: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("eval-guess/{problem_id}")));
    rng.gen_range(0..num_options)
}

pub fn predict(problem: &Problem, output: &str, seed: u64) -> Prediction {
    let extracted = extract_answer(output, problem.num_options());
    Prediction {
        problem_id: problem.id.clone(),
        output: output.to_string(),
        extracted: extracted.or_else(|| Some(guess(seed, &problem.id, problem.num_options()))),
        guessed: extracted.is_none(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileAccuracy {
    pub file: String,
    pub correct: usize,
    pub total: usize,
    pub guessed: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub files: Vec<FileAccuracy>,
    pub average: f64,
}

/// Scores one predictions file. Every problem must be predicted exactly once.
pub fn evaluate_predictions(
    file: &str,
    records: &[PredictionRecord],
    problems: &[Problem],
    seed: u64,
) -> Result<FileAccuracy, FormatError> {
    let by_id: HashMap<&str, &Problem> = problems.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut seen = HashSet::new();
    let (mut correct, mut guessed) = (0, 0);
    for r in records {
        let problem = by_id
            .get(r.problem_id.as_str())
            .ok_or_else(|| FormatError::Invalid(format!("{file}: unknown problem id {}", r.problem_id)))?;
        if !seen.insert(r.problem_id.as_str()) {
            return Err(FormatError::Invalid(format!("{file}: duplicate prediction for {}", r.problem_id)));
        }
        let p = predict(problem, &r.output, seed);
        guessed += usize::from(p.guessed);
        correct += usize::from(p.extracted == Some(problem.gold_answer));
    }
    if seen.len() != problems.len() {
        return Err(FormatError::Invalid(format!("{file}: {} of {} problems predicted", seen.len(), problems.len())));
    }
    let total = records.len();
    Ok(FileAccuracy {
        file: file.to_string(),
        correct,
        total,
        guessed,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
    })
}

pub fn eval_report(files: Vec<FileAccuracy>) -> EvalReport {
    let average =
        if files.is_empty() { 0.0 } else { files.iter().map(|f| f.accuracy).sum::<f64>() / files.len() as f64 };
    EvalReport { files, average }
}

/// Follows the most visited child from the root (lowest index on ties).
pub fn greedy_trajectory(tree: &SearchTree) -> Trajectory {
    let mut id = tree.root();
    let mut steps = Vec::new();
    loop {
        let node = tree.node(id).expect("node exists");
        let best = node.children.iter().copied().filter(|c| tree.node(*c).is_ok_and(|n| n.visits > 0)).fold(
            None,
            |best: Option<crate::tree::NodeId>, c| match best {
                Some(b) if tree.node(b).unwrap().visits >= tree.node(c).unwrap().visits => Some(b),
                _ => Some(c),
            },
        );
        match best {
            Some(c) => {
                steps.push(tree.node(c).unwrap().step.clone().expect("non-root has a step"));
                id = c;
            }
            None => break,
        }
    }
    Trajectory::new(steps)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TreeStats {
    pub problem_id: String,
    pub nodes: usize,
    /// Count of nodes per depth, root at index 0.
    pub depth_histogram: Vec<usize>,
    pub terminals: usize,
    pub correct_leaves: usize,
    pub non_thought_terminals: usize,
    pub non_thought_fraction: f64,
    /// Count of terminal paths per length in steps.
    pub terminal_length_histogram: Vec<usize>,
}

fn bump(hist: &mut Vec<usize>, i: usize, by: usize) {
    if hist.len() <= i {
        hist.resize(i + 1, 0);
    }
    hist[i] += by;
}

pub fn tree_stats(tree: &SearchTree) -> TreeStats {
    let mut s = TreeStats { problem_id: tree.problem.id.clone(), nodes: tree.len(), ..Default::default() };
    for node in tree.nodes() {
        bump(&mut s.depth_histogram, node.depth, 1);
        if node.is_terminal {
            s.terminals += 1;
            s.correct_leaves += usize::from(node.is_correct == Some(true));
            bump(&mut s.terminal_length_histogram, node.depth, 1);
            let path = tree.path_to(node.id).expect("node exists");
            if is_non_thought_terminal(&path).unwrap_or(false) {
                s.non_thought_terminals += 1;
            }
        }
    }
    s.non_thought_fraction = fraction(s.non_thought_terminals, s.terminals);
    s
}

fn fraction(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StatsSummary {
    pub trees: Vec<TreeStats>,
    pub total_nodes: usize,
    pub depth_histogram: Vec<usize>,
    pub terminals: usize,
    pub correct_leaves: usize,
    pub non_thought_fraction: f64,
    pub terminal_length_histogram: Vec<usize>,
    pub mean_terminal_length: f64,
    pub pair_sources: BTreeMap<PairSource, usize>,
}

pub fn summarize(trees: Vec<TreeStats>, pairs: &[PairRecord]) -> StatsSummary {
    let mut s = StatsSummary::default();
    let mut non_thought = 0;
    for t in &trees {
        s.total_nodes += t.nodes;
        s.terminals += t.terminals;
        s.correct_leaves += t.correct_leaves;
        non_thought += t.non_thought_terminals;
        for (i, &c) in t.depth_histogram.iter().enumerate() {
            bump(&mut s.depth_histogram, i, c);
        }
        for (i, &c) in t.terminal_length_histogram.iter().enumerate() {
            bump(&mut s.terminal_length_histogram, i, c);
        }
    }
    s.non_thought_fraction = fraction(non_thought, s.terminals);
    let weighted: usize = s.terminal_length_histogram.iter().enumerate().map(|(i, c)| i * c).sum();
    s.mean_terminal_length = if s.terminals == 0 { 0.0 } else { weighted as f64 / s.terminals as f64 };
    for p in pairs {
        *s.pair_sources.entry(p.source).or_insert(0) += 1;
    }
    s.trees = trees;
    s
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Scorers and value oracle used to fill [`LossInputs`] for a pair.
pub struct ScoringOracles<'a> {
    pub policy: &'a dyn Scorer,
    pub reference: &'a dyn Scorer,
    pub value: &'a dyn ValueOracle,
}

pub fn loss_inputs(
    problem: &Problem,
    pair: &PreferencePair,
    oracles: &ScoringOracles<'_>,
) -> Result<LossInputs, ScoreError> {
    let prefix = render_prefix(problem, &pair.prefix);
    let chosen = pair.chosen.raw_text();
    let rejected = pair.rejected.raw_text();
    let value_at = |t: &Trajectory| -> Result<f64, OracleError> {
        let full = pair.prefix.concat(t);
        oracles.value.estimate(&State::new(problem, &full)).map(crate::oracles::clamp_value)
    };
    Ok(LossInputs {
        logp_chosen_policy: oracles.policy.logprob(&prefix, &chosen, &pair.mask_spans_chosen)?,
        logp_rejected_policy: oracles.policy.logprob(&prefix, &rejected, &pair.mask_spans_rejected)?,
        logp_chosen_ref: oracles.reference.logprob(&prefix, &chosen, &pair.mask_spans_chosen)?,
        logp_rejected_ref: oracles.reference.logprob(&prefix, &rejected, &pair.mask_spans_rejected)?,
        v_chosen: value_at(&pair.chosen)?,
        v_rejected: value_at(&pair.rejected)?,
        q_chosen: pair.q_chosen,
        q_rejected: pair.q_rejected,
    })
}

pub fn pair_id(problem_id: &str, index: usize) -> String {
    format!("{problem_id}#{index}")
}

pub fn score_pair(
    problem: &Problem,
    pair: &PreferencePair,
    id: String,
    oracles: &ScoringOracles<'_>,
    weights: &LossWeights,
) -> Result<LossRecord, ScoreError> {
    let inputs = loss_inputs(problem, pair, oracles)?;
    Ok(LossRecord::new(id, loss_terms(&inputs, weights)?))
}

/// File kinds accepted by [`validate_text`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Problems,
    Pairs,
    Losses,
    Predictions,
    Corpus,
    Tree,
    Manifest,
    EvalReport,
}

impl std::str::FromStr for FileKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "problems" => FileKind::Problems,
            "pairs" => FileKind::Pairs,
            "losses" => FileKind::Losses,
            "predictions" => FileKind::Predictions,
            "corpus" => FileKind::Corpus,
            "tree" => FileKind::Tree,
            "manifest" => FileKind::Manifest,
            "eval" => FileKind::EvalReport,
            other => return Err(format!("unknown file kind {other:?}")),
        })
    }
}

fn each_line<F: FnMut(&str) -> Result<(), String>>(text: &str, mut f: F) -> Vec<FormatError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .filter_map(|(i, l)| f(l).err().map(|message| FormatError::Line { line: i + 1, message }))
        .collect()
}

/// Schema check of a file's contents. Pair texts are re-parsed with
/// `num_options` options; mask spans must match the texts.
pub fn validate_text(kind: FileKind, text: &str, num_options: usize) -> Vec<FormatError> {
    let json = |e: serde_json::Error| e.to_string();
    match kind {
        FileKind::Problems => parse_problems(text).1,
        FileKind::Pairs => each_line(text, |l| {
            let r: PairRecord = serde_json::from_str(l).map_err(json)?;
            let pair = r.to_pair(num_options).map_err(|e: GrammarError| e.to_string())?;
            if pair.chosen.is_empty() || pair.rejected.is_empty() {
                return Err("empty completion".into());
            }
            Ok(())
        }),
        FileKind::Losses => each_line(text, |l| {
            let r: LossRecord = serde_json::from_str(l).map_err(json)?;
            let vals = [r.dpo, r.mse, r.lm, r.reg, r.total];
            if vals.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err("non-finite loss".into())
            }
        }),
        FileKind::Predictions => {
            each_line(text, |l| serde_json::from_str::<PredictionRecord>(l).map(drop).map_err(json))
        }
        FileKind::Corpus => each_line(text, |l| {
            let t = parse_trajectory(l, num_options).map_err(|e| e.to_string())?;
            if t.terminal() {
                Ok(())
            } else {
                Err("trajectory has no final answer".into())
            }
        }),
        FileKind::Tree => tree_from_json(text).err().into_iter().collect(),
        FileKind::Manifest => match serde_json::from_str::<RoundManifest>(text) {
            Ok(m) => m.validate().err().map(FormatError::Invalid).into_iter().collect(),
            Err(e) => vec![e.into()],
        },
        FileKind::EvalReport => serde_json::from_str::<EvalReport>(text).err().map(Into::into).into_iter().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::tests::EEZ_TRAJECTORY;

    #[test]
    fn problems_with_letter_or_index() {
        let text = concat!(
            r#"{"id":"a","question":"q","options":["x","y","z","w"],"answer":"C"}"#,
            "\n\n",
            r#"{"id":"b","question":"q","options":["x","y","z","w"],"answer":1}"#,
            "\n",
            "{broken\n",
            r#"{"id":"c","question":"q","options":["x","y"],"answer":"D"}"#,
            "\n",
            r#"{"id":"a","question":"q","options":["x","y"],"answer":0}"#,
            "\n",
        );
        let (ps, errs) = parse_problems(text);
        assert_eq!(ps.iter().map(|p| p.gold_answer).collect::<Vec<_>>(), vec![2, 1]);
        let lines: Vec<usize> = errs
            .iter()
            .map(|e| match e {
                FormatError::Line { line, .. } => *line,
                _ => 0,
            })
            .collect();
        assert_eq!(lines, vec![4, 5, 6]);
    }

    #[test]
    fn ids_are_file_safe() {
        assert!(check_id("syn-0001").is_ok());
        assert!(check_id("../x").is_err());
        assert!(check_id("").is_err());
        assert!(check_id("a/b").is_err());
    }

    #[test]
    fn warmup_keeps_proposal_and_answer() {
        let (s1, s2, errs) = warmup_split(EEZ_TRAJECTORY, 4);
        assert!(errs.is_empty());
        let t = parse_trajectory(s1.trim(), 4).unwrap();
        assert_eq!(t.len(), 2);
        assert!(matches!(t.steps[0], Step::Proposal(_)));
        assert!(t.terminal());
        assert_eq!(s2.trim(), EEZ_TRAJECTORY.trim());
        let plain = "<step><proposal>B</proposal></step> <step><final_answer>B</final_answer></step>";
        let (s1, s2, _) = warmup_split(plain, 4);
        assert_eq!(s1, s2);
    }

    #[test]
    fn extraction_order() {
        assert_eq!(extract_answer("blah <final_answer>c</final_answer> A", 4), Some(2));
        assert_eq!(extract_answer("<FINAL_ANSWER> B </FINAL_ANSWER>", 4), Some(1));
        assert_eq!(extract_answer("I think D is right, not A", 4), Some(3));
        assert_eq!(extract_answer("<final_answer>Q</final_answer> then B", 4), Some(1));
        assert_eq!(extract_answer("Eventually, option E", 4), None);
        assert_eq!(extract_answer("nothing here", 4), None);
        assert_eq!(extract_answer("A", 4), Some(0));
    }

    fn problems(n: usize) -> Vec<Problem> {
        (0..n)
            .map(|i| {
                Problem::new(format!("p{i}"), "q", vec!["a".into(), "b".into(), "c".into(), "d".into()], 0).unwrap()
            })
            .collect()
    }

    #[test]
    fn mixed_accuracy() {
        let ps = problems(5);
        let outputs = [
            "<final_answer>A</final_answer>",
            "<final_answer>A</final_answer>",
            "<final_answer>A</final_answer>",
            "<final_answer>B</final_answer>",
            "no idea",
        ];
        let recs: Vec<_> = ps
            .iter()
            .zip(outputs)
            .map(|(p, o)| PredictionRecord { problem_id: p.id.clone(), output: o.into() })
            .collect();
        for seed in 0..8 {
            let acc = evaluate_predictions("f", &recs, &ps, seed).unwrap();
            let guessed_right = guess(seed, "p4", 4) == 0;
            assert_eq!(acc.guessed, 1);
            assert_eq!(acc.accuracy, if guessed_right { 0.8 } else { 0.6 });
        }
        let mut missing = recs.clone();
        missing.pop();
        assert!(evaluate_predictions("f", &missing, &ps, 0).is_err());
        let mut unknown = recs.clone();
        unknown[0].problem_id = "zz".into();
        assert!(evaluate_predictions("f", &unknown, &ps, 0).is_err());
    }

    #[test]
    fn guesses_reproducible() {
        assert_eq!(guess(5, "x", 4), guess(5, "x", 4));
        let spread: HashSet<usize> = (0..64).map(|s| guess(s, "x", 4)).collect();
        assert_eq!(spread.len(), 4);
    }

    #[test]
    fn stats_fraction_and_histogram() {
        use crate::grammar::ActionStep;
        let p = problems(1).remove(0);
        let mut t = SearchTree::new(p, 0);
        let pr = t.add_child(t.root(), Step::Proposal(0), 1.0).unwrap();
        let a = t
            .add_child(
                pr,
                Step::Action(ActionStep {
                    thought: None,
                    tool: "retriever".into(),
                    input: "x".into(),
                    observation: Some("o".into()),
                }),
                1.0,
            )
            .unwrap();
        let th = t.add_child(a, Step::Thought("t".into()), 1.0).unwrap();
        t.add_child(th, Step::FinalAnswer(0), 1.0).unwrap();
        t.add_child(th, Step::FinalAnswer(1), 1.0).unwrap();
        t.add_child(a, Step::FinalAnswer(0), 1.0).unwrap();
        let th2 = t.add_child(pr, Step::Thought("u".into()), 1.0).unwrap();
        t.add_child(th2, Step::FinalAnswer(2), 1.0).unwrap();
        let s = tree_stats(&t);
        assert_eq!(s.terminals, 4);
        assert_eq!(s.non_thought_terminals, 1);
        assert_eq!(s.non_thought_fraction, 0.25);
        assert_eq!(s.depth_histogram.iter().sum::<usize>(), s.nodes);
        assert_eq!(s.correct_leaves, 2);
        let sum = summarize(vec![s.clone(), s], &[]);
        assert_eq!(sum.terminals, 8);
        assert_eq!(sum.non_thought_fraction, 0.25);
    }

    #[test]
    fn config_round_trip() {
        let c = RunConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.engine(7), EngineConfig { rng_seed: 7, ..EngineConfig::default() });
        assert_eq!(c.pairs(), PairConfig::default());
        assert_eq!(c.weights(), LossWeights::default());
        let bad = RunConfig { backend: "http".into(), ..RunConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn manifest_checks_seeds() {
        let mut m = RoundManifest {
            round_index: 1,
            config: RunConfig::default(),
            problems: "p.jsonl".into(),
            trees_dir: "trees".into(),
            pair_files: vec![],
            seed: 3,
            problem_seeds: BTreeMap::from([("a".to_string(), problem_seed(3, "a"))]),
        };
        assert!(m.validate().is_ok());
        m.problem_seeds.insert("b".into(), 1);
        assert!(m.validate().is_err());
    }
}
