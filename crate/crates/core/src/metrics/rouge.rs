//! ROUGE-L over word tokens.

use serde::{Deserialize, Serialize};

/// Lowercase, split on runs of non-alphanumeric characters, no stemming.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Longest common subsequence length, O(|a|·|b|) time, O(|b|) memory.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// F-measure of LCS precision and recall; 0 when either side is empty or
/// nothing matches.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

pub fn rouge_l_text(candidate: &str, reference: &str) -> f64 {
    rouge_l(&tokenize(candidate), &tokenize(reference))
}

/// Multiset unigram-overlap F1. Backs the offline mock scorer.
pub fn unigram_f1(candidate: &str, reference: &str) -> f64 {
    use std::collections::HashMap;
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &r {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &c {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / c.len() as f64;
    let rec = overlap as f64 / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

/// How per-reference scores combine when a study has several references.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiRefPolicy {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("candidate has no references")]
pub struct NoReferences;

pub fn score_candidate<F>(
    candidate: &str,
    references: &[&str],
    metric: F,
    policy: MultiRefPolicy,
) -> Result<f64, NoReferences>
where
    F: Fn(&str, &str) -> f64,
{
    if references.is_empty() {
        return Err(NoReferences);
    }
    let scores = references.iter().map(|r| metric(candidate, r));
    Ok(match policy {
        MultiRefPolicy::Max => scores.fold(f64::NEG_INFINITY, f64::max),
        MultiRefPolicy::Mean => scores.sum::<f64>() / references.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenization() {
        assert_eq!(
            tokenize("No  pleural-effusion; Heart OK."),
            ["no", "pleural", "effusion", "heart", "ok"]
        );
        assert!(tokenize(" ,.; ").is_empty());
    }

    #[test]
    fn identity_and_disjoint() {
        assert_eq!(rouge_l_text("a b c", "a b c"), 1.0);
        assert_eq!(rouge_l_text("a b", "c d"), 0.0);
        assert_eq!(rouge_l_text("", "c d"), 0.0);
    }

    #[test]
    fn partial_overlap() {
        // LCS("the cat sat", "the cat ate") = 2, P = R = 2/3.
        let f = rouge_l_text("the cat sat", "the cat ate");
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn multi_reference_policies() {
        let refs = [
            "the heart is normal",
            "no acute findings",
            "lungs are clear",
        ];
        let max = score_candidate(
            "no acute findings",
            &refs,
            rouge_l_text,
            MultiRefPolicy::Max,
        )
        .unwrap();
        assert_eq!(max, 1.0);
        let single = score_candidate(
            "heart normal",
            &refs[..1],
            rouge_l_text,
            MultiRefPolicy::Mean,
        )
        .unwrap();
        assert_eq!(single, rouge_l_text("heart normal", refs[0]));
        assert_eq!(
            score_candidate("x", &[], rouge_l_text, MultiRefPolicy::Max),
            Err(NoReferences)
        );
    }

    #[test]
    fn unigram_f1_counts_multiset_overlap() {
        // cand {a, a, b}, ref {a, c}: overlap 1, P = 1/3, R = 1/2, F1 = 0.4.
        assert!((unigram_f1("a a b", "a c") - 0.4).abs() < 1e-12);
        assert_eq!(unigram_f1("x", "y"), 0.0);
    }
}
