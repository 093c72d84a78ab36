//! ROUGE-1, ROUGE-2 and ROUGE-L (whole-summary LCS) scoring.
//!
//! Text is lowercased, punctuation characters become tokens of their own
//! and everything is split on whitespace. There is no stemming and no
//! stopword removal.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RougeError {
    #[error("cannot score an empty corpus")]
    EmptyCorpus,
    #[error("unsupported n-gram order {0}; expected 1 or 2")]
    UnsupportedOrder(usize),
}

/// Precision, recall and F1 of one ROUGE variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        if candidate_total == 0 || reference_total == 0 {
            return Self::default();
        }
        let p = overlap as f64 / candidate_total as f64;
        let r = overlap as f64 / reference_total as f64;
        Self::from_pr(p, r)
    }

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { precision, recall, f1 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub r1: Prf,
    pub r2: Prf,
    pub rl: Prf,
}

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.extend(ch.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn ngram_counts<S: AsRef<str>>(words: &[S], n: usize) -> BTreeMap<Vec<&str>, usize> {
    let mut counts = BTreeMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap for `n` in {1, 2}.
pub fn rouge_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> Result<Prf, RougeError> {
    if !(1..=2).contains(&n) {
        return Err(RougeError::UnsupportedOrder(n));
    }
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let overlap = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    Ok(Prf::from_counts(overlap, c.values().sum(), r.values().sum()))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Prf {
    let a: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let b: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    Prf::from_counts(lcs_len(&a, &b), a.len(), b.len())
}

pub fn score_words<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> RougeScores {
    RougeScores {
        r1: rouge_n(candidate, reference, 1).expect("order 1"),
        r2: rouge_n(candidate, reference, 2).expect("order 2"),
        rl: rouge_l(candidate, reference),
    }
}

pub fn score_texts(candidate: &str, reference: &str) -> RougeScores {
    score_words(&tokenize(candidate), &tokenize(reference))
}

/// Unweighted mean of per-pair precision, recall and F1 for each variant.
pub fn corpus_rouge<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<S>)]) -> Result<RougeScores, RougeError> {
    if pairs.is_empty() {
        return Err(RougeError::EmptyCorpus);
    }
    Ok(mean_scores(&pairs.iter().map(|(c, r)| score_words(c, r)).collect::<Vec<_>>()))
}

pub fn mean_scores(scores: &[RougeScores]) -> RougeScores {
    let n = scores.len() as f64;
    let mean = |get: &dyn Fn(&RougeScores) -> Prf| {
        let (p, r, f) =
            scores.iter().map(get).fold((0.0, 0.0, 0.0), |(p, r, f), x| (p + x.precision, r + x.recall, f + x.f1));
        Prf { precision: p / n, recall: r / n, f1: f / n }
    };
    RougeScores { r1: mean(&|s| s.r1), r2: mean(&|s| s.r2), rl: mean(&|s| s.rl) }
}
