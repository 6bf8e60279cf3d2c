use std::collections::HashMap;
use std::hash::Hash;

use crate::encoder::ConceptSet;
use crate::error::{Error, Result};

fn ngram_counts<T: Eq + Hash>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU-n: geometric mean of clipped 1..n-gram precisions times
/// the brevity penalty, without smoothing. The effective reference length per
/// candidate is the closest one, shorter on ties.
pub fn bleu_n<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>], n: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::contract("BLEU needs at least one candidate"));
    }
    if !(1..=4).contains(&n) {
        return Err(Error::contract(format!("BLEU order must be 1..=4, got {n}")));
    }
    if candidates.len() != references.len() {
        return Err(Error::dim("bleu", &[candidates.len()], &[references.len()]));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::contract("every candidate needs a reference"));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("non-empty");
        for k in 1..=n {
            let mut max_ref: HashMap<&[T], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in ngram_counts(cand, k) {
                matched[k - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[k - 1] += c;
            }
        }
    }
    if c_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

/// Mean fraction of each concept set that appears in its caption; an empty
/// set scores 1.
pub fn concept_recall(captions: &[Vec<usize>], concepts: &[ConceptSet]) -> Result<f64> {
    if captions.len() != concepts.len() {
        return Err(Error::dim("concept_recall", &[captions.len()], &[concepts.len()]));
    }
    if captions.is_empty() {
        return Err(Error::contract("concept recall over zero samples"));
    }
    let total: f64 = captions
        .iter()
        .zip(concepts)
        .map(|(cap, cs)| {
            if cs.is_empty() {
                1.0
            } else {
                cs.ids().iter().filter(|id| cap.contains(id)).count() as f64 / cs.len() as f64
            }
        })
        .sum();
    Ok(total / captions.len() as f64)
}
