use std::collections::HashMap;
use std::hash::Hash;

use super::MetricError;

/// Lowercased alphanumeric word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(AsRef::as_ref).collect())
                .or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU-4 with clipped n-gram precisions and brevity penalty.
///
/// A zero precision for n ≥ 2 is smoothed to `(matches + 1) / (total + 1)`;
/// a zero unigram precision makes the score 0. The brevity penalty uses the
/// reference length closest to the candidate (shorter on ties).
pub fn bleu4<T: AsRef<str>, R: AsRef<str>>(
    candidate: &[T],
    references: &[Vec<R>],
) -> Result<f64, MetricError> {
    if candidate.is_empty() {
        return Err(MetricError::EmptyCandidate);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let slot = max_ref.entry(g).or_insert(0);
                *slot = (*slot).max(c);
            }
        }
        let total: usize = cand.values().sum();
        let matches: usize = cand
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let precision = if matches > 0 {
            matches as f64 / total as f64
        } else if n == 1 {
            return Ok(0.0);
        } else {
            (matches as f64 + 1.0) / (total as f64 + 1.0)
        };
        log_sum += precision.ln() / 4.0;
    }

    let c = candidate.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * log_sum.exp())
}

/// Pluggable semantic similarity in `[0, 1]`.
pub trait SimilarityScorer: Send + Sync {
    fn score(&self, candidate: &str, reference: &str) -> Result<f64, MetricError>;
}

/// Lexical stand-in: F1 between candidate and reference token multisets.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenF1Scorer;

fn multiset<T: Eq + Hash>(items: impl IntoIterator<Item = T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for i in items {
        *m.entry(i).or_insert(0) += 1;
    }
    m
}

impl SimilarityScorer for TokenF1Scorer {
    fn score(&self, candidate: &str, reference: &str) -> Result<f64, MetricError> {
        let c = tokenize(candidate);
        let r = tokenize(reference);
        if c.is_empty() && r.is_empty() {
            return Ok(1.0);
        }
        if c.is_empty() || r.is_empty() {
            return Ok(0.0);
        }
        let rc = multiset(r.iter());
        let overlap: usize = multiset(c.iter())
            .iter()
            .map(|(t, &n)| n.min(rc.get(t).copied().unwrap_or(0)))
            .sum();
        if overlap == 0 {
            return Ok(0.0);
        }
        let p = overlap as f64 / c.len() as f64;
        let rec = overlap as f64 / r.len() as f64;
        Ok(2.0 * p * rec / (p + rec))
    }
}

/// Delegates to `scorer`; fails when none is bound.
pub fn semantic_similarity(
    candidate: &str,
    reference: &str,
    scorer: Option<&dyn SimilarityScorer>,
) -> Result<f64, MetricError> {
    scorer
        .ok_or(MetricError::ScorerUnavailable)?
        .score(candidate, reference)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_identity_and_disjoint() {
        let x = tokenize("the patient has acute chest pain radiating to the left arm");
        assert!((bleu4(&x, &[x.clone()]).unwrap() - 1.0).abs() < 1e-12);
        let y = tokenize("completely different words entirely here");
        assert_eq!(bleu4(&y, &[x]).unwrap(), 0.0);
        assert_eq!(bleu4::<&str, &str>(&[], &[vec!["a"]]), Err(MetricError::EmptyCandidate));
    }

    #[test]
    fn bleu_is_order_sensitive() {
        let a = tokenize("aspirin then nitroglycerin then heparin");
        let b = tokenize("heparin then nitroglycerin then aspirin");
        assert!(bleu4(&b, &[a.clone()]).unwrap() < bleu4(&a, &[a.clone()]).unwrap());
    }

    #[test]
    fn similarity_examples() {
        let s = TokenF1Scorer;
        assert_eq!(semantic_similarity("a b", "a b", Some(&s)).unwrap(), 1.0);
        assert_eq!(semantic_similarity("a b", "c d", Some(&s)).unwrap(), 0.0);
        assert_eq!(semantic_similarity("a b", "a c", Some(&s)).unwrap(), 0.5);
        assert_eq!(semantic_similarity("a", "a", None), Err(MetricError::ScorerUnavailable));
    }
}
