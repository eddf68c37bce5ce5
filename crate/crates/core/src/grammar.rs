//! The XML step language.
//!
//! Every reasoning trajectory is a sequence of `<step>` elements. A step holds
//! exactly one of:
//!
//! * `<proposal>`: an early guess at the answer, one option letter;
//! * `<thought>`: free-form reasoning;
//! * an optional `<thought>` followed by `<action>`, `<action_input>` and,
//!   once retrieval has run, `<observation>`;
//! * `<final_answer>`: a single option letter.
//!
//! Tag names are matched case-insensitively and always written lowercase.
//! Text content is XML-escaped (`&`, `<`, `>`) on output and unescaped on
//! input, so arbitrary prose survives a round trip.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of answer options per problem.
pub const DEFAULT_NUM_OPTIONS: usize = 4;

/// Largest supported option count (letters `A`..`Z`).
pub const MAX_NUM_OPTIONS: usize = 26;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GrammarError {
    #[error("unparsable step: {0}")]
    Unparsable(String),
    #[error("trajectory has no final answer")]
    NotTerminal,
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

fn unparsable<T>(reason: impl Into<String>) -> Result<T, GrammarError> {
    Err(GrammarError::Unparsable(reason.into()))
}

/// Maps an option index to its uppercase letter (`0 -> 'A'`).
pub fn option_letter(index: usize) -> Option<char> {
    if index < MAX_NUM_OPTIONS {
        Some((b'A' + index as u8) as char)
    } else {
        None
    }
}

/// Maps an option letter (either case) to its index, if it is below `num_options`.
pub fn letter_index(letter: char, num_options: usize) -> Option<usize> {
    if !letter.is_ascii_alphabetic() {
        return None;
    }
    let index = (letter.to_ascii_uppercase() as u8 - b'A') as usize;
    (index < num_options).then_some(index)
}

/// A multiple-choice question with its gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub question: String,
    pub options: Vec<String>,
    pub gold_answer: usize,
}

impl Problem {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        options: Vec<String>,
        gold_answer: usize,
    ) -> Result<Self, GrammarError> {
        let problem = Problem { id: id.into(), question: question.into(), options, gold_answer };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<(), GrammarError> {
        if self.options.is_empty() {
            return Err(GrammarError::InvalidProblem("no options".into()));
        }
        if self.options.len() > MAX_NUM_OPTIONS {
            return Err(GrammarError::InvalidProblem(format!(
                "{} options exceeds the limit of {MAX_NUM_OPTIONS}",
                self.options.len()
            )));
        }
        if self.gold_answer >= self.options.len() {
            return Err(GrammarError::InvalidProblem(format!(
                "gold answer {} out of range for {} options",
                self.gold_answer,
                self.options.len()
            )));
        }
        Ok(())
    }

    pub fn num_options(&self) -> usize {
        self.options.len()
    }
}

/// A retrieval call embedded in a step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionStep {
    /// Reasoning that precedes the call inside the same step.
    pub thought: Option<String>,
    pub tool: String,
    pub input: String,
    /// Empty until the retriever has run.
    pub observation: Option<String>,
}

/// One parsed reasoning step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    Proposal(usize),
    Thought(String),
    Action(ActionStep),
    FinalAnswer(usize),
}

/// Half-open character interval `[start, end)` over a serialized text.
///
/// Offsets count Unicode scalar values, not bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    fn shifted(self, by: usize) -> Span {
        Span { start: self.start + by, end: self.end + by }
    }
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Span { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(span: Span) -> Self {
        (span.start, span.end)
    }
}

pub(crate) fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            _ => out.push(ch),
        }
    }
    out
}

pub(crate) fn unescape(text: &str) -> String {
    if !text.contains('&') {
        return text.to_string();
    }
    text.replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&")
}

/// Incremental writer that tracks masked content spans in character offsets.
struct StepWriter {
    out: String,
    chars: usize,
    masked: Vec<Span>,
}

impl StepWriter {
    fn new() -> Self {
        StepWriter { out: String::new(), chars: 0, masked: Vec::new() }
    }

    fn raw(&mut self, text: &str) {
        self.out.push_str(text);
        self.chars += text.chars().count();
    }

    fn element(&mut self, tag: &str, content: &str, masked: bool) {
        self.raw("<");
        self.raw(tag);
        self.raw(">");
        let start = self.chars;
        self.raw(&escape(content));
        if masked {
            self.masked.push(Span { start, end: self.chars });
        }
        self.raw("</");
        self.raw(tag);
        self.raw(">");
    }
}

impl Step {
    /// Canonical serialized form.
    pub fn raw_text(&self) -> String {
        self.serialize_with_spans().0
    }

    /// Serializes the step and reports the content spans of every
    /// `<proposal>` and `<observation>` element.
    pub fn serialize_with_spans(&self) -> (String, Vec<Span>) {
        let mut w = StepWriter::new();
        w.raw("<step>");
        match self {
            Step::Proposal(index) => {
                w.element("proposal", &letter_string(*index), true);
            }
            Step::Thought(text) => w.element("thought", text, false),
            Step::Action(action) => {
                if let Some(thought) = &action.thought {
                    w.element("thought", thought, false);
                    w.raw(" ");
                }
                w.element("action", &action.tool, false);
                w.raw(" ");
                w.element("action_input", &action.input, false);
                if let Some(observation) = &action.observation {
                    w.raw(" ");
                    w.element("observation", observation, true);
                }
            }
            Step::FinalAnswer(index) => {
                w.element("final_answer", &letter_string(*index), false);
            }
        }
        w.raw("</step>");
        (w.out, w.masked)
    }

    pub fn is_final(&self) -> bool {
        matches!(self, Step::FinalAnswer(_))
    }

    pub fn is_action(&self) -> bool {
        matches!(self, Step::Action(_))
    }

    pub fn final_answer(&self) -> Option<usize> {
        match self {
            Step::FinalAnswer(index) => Some(*index),
            _ => None,
        }
    }

    /// Checks option indices against the owning problem.
    pub fn validate(&self, num_options: usize) -> Result<(), GrammarError> {
        match self {
            Step::Proposal(i) | Step::FinalAnswer(i) if *i >= num_options => {
                unparsable(format!("option index {i} out of range"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw_text())
    }
}

fn letter_string(index: usize) -> String {
    option_letter(index).map(String::from).unwrap_or_default()
}

#[derive(Debug, PartialEq)]
enum Token<'a> {
    Open(String),
    Close(String),
    Text(&'a str),
}

fn tokenize(input: &str) -> Result<Vec<Token<'_>>, GrammarError> {
    let mut tokens = Vec::new();
    let mut rest = input;
    while !rest.is_empty() {
        if let Some(after) = rest.strip_prefix('<') {
            let end = match after.find('>') {
                Some(end) => end,
                None => return unparsable("unterminated tag"),
            };
            let body = &after[..end];
            let (closing, name) = match body.strip_prefix('/') {
                Some(name) => (true, name),
                None => (false, body),
            };
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphabetic() || c == '_') {
                return unparsable(format!("malformed tag <{body}>"));
            }
            let name = name.to_ascii_lowercase();
            tokens.push(if closing { Token::Close(name) } else { Token::Open(name) });
            rest = &after[end + 1..];
        } else {
            let end = rest.find('<').unwrap_or(rest.len());
            tokens.push(Token::Text(&rest[..end]));
            rest = &rest[end..];
        }
    }
    Ok(tokens)
}

const LEAF_TAGS: [&str; 6] = ["proposal", "thought", "action", "action_input", "observation", "final_answer"];

fn parse_letter(content: &str, num_options: usize) -> Option<usize> {
    let mut chars = content.trim().chars();
    match (chars.next(), chars.next()) {
        (Some(letter), None) => letter_index(letter, num_options),
        _ => None,
    }
}

/// Extracts the option from proposal prose: a bare letter, or prose holding
/// exactly one standalone uppercase option letter.
fn parse_proposal(content: &str, num_options: usize) -> Option<usize> {
    if let Some(index) = parse_letter(content, num_options) {
        return Some(index);
    }
    let mut found = None;
    let chars: Vec<char> = content.chars().collect();
    for (pos, &ch) in chars.iter().enumerate() {
        if !ch.is_ascii_uppercase() {
            continue;
        }
        let standalone =
            (pos == 0 || !chars[pos - 1].is_alphanumeric()) && chars.get(pos + 1).is_none_or(|c| !c.is_alphanumeric());
        if !standalone {
            continue;
        }
        if let Some(index) = letter_index(ch, num_options) {
            if found.is_some() {
                return None;
            }
            found = Some(index);
        }
    }
    found
}

fn non_empty(tag: &str, content: &str) -> Result<String, GrammarError> {
    let text = unescape(content.trim());
    if text.is_empty() {
        return unparsable(format!("empty <{tag}>"));
    }
    Ok(text)
}

/// Parses one `<step>` element.
pub fn parse_step(text: &str, num_options: usize) -> Result<Step, GrammarError> {
    let tokens = tokenize(text.trim())?;
    let mut iter = tokens.into_iter().filter(|t| !matches!(t, Token::Text(s) if s.trim().is_empty())).peekable();

    match iter.next() {
        Some(Token::Open(name)) if name == "step" => {}
        _ => return unparsable("expected <step>"),
    }

    let mut children: Vec<(String, String)> = Vec::new();
    loop {
        match iter.next() {
            Some(Token::Close(name)) if name == "step" => break,
            Some(Token::Open(name)) => {
                if !LEAF_TAGS.contains(&name.as_str()) {
                    return unparsable(format!("unknown tag <{name}>"));
                }
                let content = match iter.peek() {
                    Some(Token::Text(s)) => {
                        let s = *s;
                        iter.next();
                        s
                    }
                    _ => "",
                };
                match iter.next() {
                    Some(Token::Close(close)) if close == name => {}
                    _ => return unparsable(format!("<{name}> is not closed")),
                }
                children.push((name, content.to_string()));
            }
            Some(Token::Text(_)) => return unparsable("bare text inside <step>"),
            Some(Token::Close(name)) => return unparsable(format!("unexpected </{name}>")),
            None => return unparsable("missing </step>"),
        }
    }
    if iter.next().is_some() {
        return unparsable("content after </step>");
    }

    let tags: Vec<&str> = children.iter().map(|(t, _)| t.as_str()).collect();
    let content = |i: usize| children[i].1.as_str();
    match tags.as_slice() {
        ["proposal"] => parse_proposal(&unescape(content(0)), num_options)
            .map(Step::Proposal)
            .ok_or_else(|| GrammarError::Unparsable("proposal has no single option letter".into())),
        ["thought"] => Ok(Step::Thought(non_empty("thought", content(0))?)),
        ["final_answer"] => parse_letter(&unescape(content(0)), num_options)
            .map(Step::FinalAnswer)
            .ok_or_else(|| GrammarError::Unparsable("final answer is not one option letter".into())),
        _ => parse_action(&children),
    }
}

fn parse_action(children: &[(String, String)]) -> Result<Step, GrammarError> {
    let mut rest = children;
    let mut thought = None;
    if let [(tag, content), tail @ ..] = rest {
        if tag == "thought" {
            thought = Some(non_empty("thought", content)?);
            rest = tail;
        }
    }
    let (tool, input, observation) = match rest {
        [(a, tool), (b, input)] if a == "action" && b == "action_input" => (tool, input, None),
        [(a, tool), (b, input), (c, obs)] if a == "action" && b == "action_input" && c == "observation" => {
            (tool, input, Some(unescape(obs.trim())))
        }
        _ => {
            let tags: Vec<&str> = children.iter().map(|(t, _)| t.as_str()).collect();
            return unparsable(format!("illegal tag sequence {tags:?}"));
        }
    };
    Ok(Step::Action(ActionStep {
        thought,
        tool: non_empty("action", tool)?,
        input: non_empty("action_input", input)?,
        observation,
    }))
}

/// An ordered sequence of steps from the root of a search tree.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn new(steps: Vec<Step>) -> Self {
        Trajectory { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// True iff the last step is a final answer.
    pub fn terminal(&self) -> bool {
        self.steps.last().is_some_and(Step::is_final)
    }

    pub fn final_answer(&self) -> Option<usize> {
        self.steps.last().and_then(Step::final_answer)
    }

    pub fn validate(&self, num_options: usize, max_depth: usize) -> Result<(), GrammarError> {
        if self.steps.len() > max_depth {
            return Err(GrammarError::InvalidTrajectory(format!(
                "{} steps exceeds max depth {max_depth}",
                self.steps.len()
            )));
        }
        for (i, step) in self.steps.iter().enumerate() {
            step.validate(num_options)?;
            if step.is_final() && i + 1 != self.steps.len() {
                return Err(GrammarError::InvalidTrajectory("final answer before the last step".into()));
            }
        }
        Ok(())
    }

    /// Steps joined with single spaces.
    pub fn raw_text(&self) -> String {
        self.serialize_with_spans().0
    }

    /// Serialized text plus the character spans of all proposal and
    /// observation contents.
    pub fn serialize_with_spans(&self) -> (String, Vec<Span>) {
        let mut out = String::new();
        let mut chars = 0;
        let mut spans = Vec::new();
        for (i, step) in self.steps.iter().enumerate() {
            if i > 0 {
                out.push(' ');
                chars += 1;
            }
            let (text, step_spans) = step.serialize_with_spans();
            spans.extend(step_spans.into_iter().map(|s| s.shifted(chars)));
            chars += text.chars().count();
            out.push_str(&text);
        }
        (out, spans)
    }

    pub fn concat(&self, other: &Trajectory) -> Trajectory {
        let mut steps = self.steps.clone();
        steps.extend(other.steps.iter().cloned());
        Trajectory { steps }
    }
}

impl From<Vec<Step>> for Trajectory {
    fn from(steps: Vec<Step>) -> Self {
        Trajectory { steps }
    }
}

/// Parses a whitespace-separated sequence of `<step>` elements.
pub fn parse_trajectory(text: &str, num_options: usize) -> Result<Trajectory, GrammarError> {
    const CLOSE: &str = "</step>";
    let mut steps = Vec::new();
    let mut rest = text.trim_start();
    while !rest.is_empty() {
        let lower = rest.to_ascii_lowercase();
        let end = match lower.find(CLOSE) {
            Some(pos) => pos + CLOSE.len(),
            None => return unparsable("missing </step>"),
        };
        steps.push(parse_step(&rest[..end], num_options)?);
        rest = rest[end..].trim_start();
    }
    let traj = Trajectory { steps };
    if traj.steps.iter().rev().skip(1).any(Step::is_final) {
        return Err(GrammarError::InvalidTrajectory("final answer before the last step".into()));
    }
    Ok(traj)
}

/// True iff the trajectory reaches its final answer without any thought
/// after the last retrieval (or anywhere, when nothing was retrieved).
pub fn is_non_thought_terminal(traj: &Trajectory) -> Result<bool, GrammarError> {
    if !traj.terminal() {
        return Err(GrammarError::NotTerminal);
    }
    let body = &traj.steps[..traj.steps.len() - 1];
    let start = body.iter().rposition(Step::is_action).map_or(0, |i| i + 1);
    Ok(!body[start..].iter().any(|s| matches!(s, Step::Thought(_))))
}
