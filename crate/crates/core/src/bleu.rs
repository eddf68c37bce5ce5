//! Sentence-level BLEU-4 used to merge near-duplicate expansions.
//!
//! Tokens are Unicode words (UAX #29), so CJK ideographs count one token
//! each. Orders 2..=4 use add-one smoothing; unigram precision is left
//! unsmoothed so texts with no shared word always score zero.

use std::collections::HashMap;

use unicode_segmentation::UnicodeSegmentation;

pub const MAX_ORDER: usize = 4;

pub fn tokenize(text: &str) -> Vec<String> {
    text.unicode_words().map(str::to_lowercase).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU-4 of `candidate` against a single `reference`, in [0, 1].
pub fn bleu4(candidate: &str, reference: &str) -> f64 {
    bleu_tokens(&tokenize(candidate), &tokenize(reference))
}

pub fn bleu_tokens(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return if candidate == reference { 1.0 } else { 0.0 };
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_ORDER {
        let cand = ngram_counts(candidate, n);
        let refs = ngram_counts(reference, n);
        let total: usize = cand.values().sum();
        let matched: usize = cand.iter().map(|(gram, &c)| c.min(refs.get(gram).copied().unwrap_or(0))).sum();
        let precision = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        log_sum += precision.ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let brevity = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    brevity * (log_sum / MAX_ORDER as f64).exp()
}

/// The larger of the two directed scores.
pub fn symmetric_bleu4(a: &str, b: &str) -> f64 {
    let (ta, tb) = (tokenize(a), tokenize(b));
    bleu_tokens(&ta, &tb).max(bleu_tokens(&tb, &ta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_one() {
        let s = "the coastal state does not have territorial sovereignty";
        assert!((bleu4(s, s) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_is_zero() {
        assert_eq!(bleu4("alpha beta gamma", "delta epsilon"), 0.0);
    }

    #[test]
    fn hand_computed_value() {
        // cand: a b c d e (5), ref: a b c d f (5)
        // p1 = 4/5, p2 = (3+1)/(4+1), p3 = (2+1)/(3+1), p4 = (1+1)/(2+1), BP = 1
        let expected = (0.8f64 * 0.8 * 0.75 * (2.0 / 3.0)).powf(0.25);
        assert!((bleu4("a b c d e", "a b c d f") - expected).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_applies_to_short_candidate() {
        // cand: a b (2), ref: a b c d (4): p1 = 1, p2 = 1, p3 = p4 = 1 (0+1)/(0+1)
        let expected = (1.0f64 - 2.0).exp();
        assert!((bleu4("a b", "a b c d") - expected).abs() < 1e-12);
        // reverse: p1 = 2/4, p2 = 2/4, p3 = 1/3, p4 = 1/2
        let reverse = (0.5f64 * 0.5 * (1.0 / 3.0) * 0.5).powf(0.25);
        assert!((symmetric_bleu4("a b", "a b c d") - reverse).abs() < 1e-12);
    }

    #[test]
    fn cjk_characters_tokenize_individually() {
        assert_eq!(tokenize("专属经济区").len(), 5);
    }
}
