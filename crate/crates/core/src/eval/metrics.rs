use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

/// Ranked retrieval output for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_id: usize,
    pub ranked: Vec<usize>,
    pub target: usize,
}

/// Generated comment next to its reference, EOS already stripped.
#[derive(Debug, Clone, PartialEq)]
pub struct CommentPair<T> {
    pub query_id: usize,
    pub hypothesis: Vec<T>,
    pub reference: Vec<T>,
}

impl<T> CommentPair<T> {
    pub fn new(query_id: usize, hypothesis: Vec<T>, reference: Vec<T>) -> Self {
        Self {
            query_id,
            hypothesis,
            reference,
        }
    }
}

/// Added to zero n-gram precisions so corpus BLEU stays finite.
pub const BLEU_EPSILON: f64 = 1e-9;

pub fn recall_at_k(results: &[RetrievalResult], k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::contract("recall over an empty result list"));
    }
    if k == 0 {
        return Err(Error::contract("recall@k needs k >= 1"));
    }
    let hits = results
        .iter()
        .filter(|r| r.ranked.iter().take(k).any(|&d| d == r.target))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

fn ngrams<T: Hash + Eq + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w).or_insert(0) += 1;
    }
    out
}

/// Clipped overlap count and hypothesis n-gram total.
fn clipped<T: Hash + Eq + Clone>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let h = ngrams(hyp, n);
    let r = ngrams(reference, n);
    let overlap = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (overlap, h.values().sum())
}

fn nonempty<T>(pairs: &[CommentPair<T>], what: &str) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::contract(format!("{what} over no pairs")));
    }
    Ok(())
}

/// Corpus BLEU with uniform weights over n-gram orders 1..=max_n and the
/// standard brevity penalty. Orders for which the hypotheses contain no
/// n-grams at all are left out of the geometric mean; zero clipped counts
/// are replaced by [`BLEU_EPSILON`].
pub fn bleu<T: Hash + Eq + Clone>(pairs: &[CommentPair<T>], max_n: usize) -> Result<f64> {
    nonempty(pairs, "bleu")?;
    if max_n == 0 {
        return Err(Error::contract("bleu needs max_n >= 1"));
    }
    let hyp_len: usize = pairs.iter().map(|p| p.hypothesis.len()).sum();
    let ref_len: usize = pairs.iter().map(|p| p.reference.len()).sum();
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=max_n {
        let (mut hit, mut total) = (0, 0);
        for p in pairs {
            let (h, t) = clipped(&p.hypothesis, &p.reference, n);
            hit += h;
            total += t;
        }
        if total == 0 {
            continue;
        }
        let precision = if hit == 0 {
            BLEU_EPSILON
        } else {
            hit as f64 / total as f64
        };
        log_sum += precision.ln();
        orders += 1;
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * (log_sum / orders as f64).exp())
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// ROUGE-n F1 of one pair. Two texts without any n-grams count as a match.
pub fn rouge_n_pair<T: Hash + Eq + Clone>(hyp: &[T], reference: &[T], n: usize) -> f64 {
    let (overlap, hyp_total) = clipped(hyp, reference, n);
    let ref_total: usize = ngrams(reference, n).values().sum();
    match (hyp_total, ref_total) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => f1(overlap as f64 / hyp_total as f64, overlap as f64 / ref_total as f64),
    }
}

/// Mean per-pair ROUGE-n F1.
pub fn rouge_n<T: Hash + Eq + Clone>(pairs: &[CommentPair<T>], n: usize) -> Result<f64> {
    nonempty(pairs, "rouge")?;
    if n == 0 {
        return Err(Error::contract("rouge needs n >= 1"));
    }
    let s: f64 = pairs
        .iter()
        .map(|p| rouge_n_pair(&p.hypothesis, &p.reference, n))
        .sum();
    Ok(s / pairs.len() as f64)
}

/// Multiset unigram F1 of one pair.
pub fn token_f1_pair<T: Hash + Eq + Clone>(hyp: &[T], reference: &[T]) -> f64 {
    rouge_n_pair(hyp, reference, 1)
}

pub fn token_f1<T: Hash + Eq + Clone>(pairs: &[CommentPair<T>]) -> Result<f64> {
    nonempty(pairs, "token-F1")?;
    let s: f64 = pairs
        .iter()
        .map(|p| token_f1_pair(&p.hypothesis, &p.reference))
        .sum();
    Ok(s / pairs.len() as f64)
}

pub fn exact_match<T: PartialEq>(pairs: &[CommentPair<T>]) -> Result<f64> {
    nonempty(pairs, "exact match")?;
    let hits = pairs.iter().filter(|p| p.hypothesis == p.reference).count();
    Ok(hits as f64 / pairs.len() as f64)
}
