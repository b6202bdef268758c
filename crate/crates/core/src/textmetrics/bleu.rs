use std::collections::HashMap;

use log::warn;

use super::TokenSeq;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BleuOptions {
    /// Add one to every k-gram match and total count.
    pub add_one_smoothing: bool,
}

fn ngram_counts(tokens: &[String], k: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in tokens.windows(k) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Clipped k-gram matches and the candidate's k-gram total.
fn modified_precision(cand: &[String], reference: &[String], k: usize) -> (usize, usize) {
    let c = ngram_counts(cand, k);
    let r = ngram_counts(reference, k);
    let matched = c
        .iter()
        .map(|(g, &n)| n.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, cand.len().saturating_sub(k - 1))
}

pub fn bleu_n(candidate: &TokenSeq, reference: &TokenSeq, n: usize) -> f64 {
    bleu_n_with(candidate, reference, n, &BleuOptions::default())
}

/// Sentence BLEU up to order `n`. Orders longer than the candidate are
/// skipped (uniform weights over the remaining orders), so that a short
/// candidate identical to its reference scores 1.
pub fn bleu_n_with(candidate: &TokenSeq, reference: &TokenSeq, n: usize, opts: &BleuOptions) -> f64 {
    assert!(n >= 1, "BLEU order must be at least 1");
    let (cand, reference) = (candidate.tokens(), reference.tokens());
    if cand.is_empty() || reference.is_empty() {
        warn!("BLEU on an empty candidate or reference scores 0");
        return 0.0;
    }
    let order = n.min(cand.len());
    let mut log_sum = 0.0;
    for k in 1..=order {
        let (mut m, mut t) = modified_precision(cand, reference, k);
        if opts.add_one_smoothing {
            m += 1;
            t += 1;
        }
        if m == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let (c, r) = (cand.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * (log_sum / order as f64).exp()
}
