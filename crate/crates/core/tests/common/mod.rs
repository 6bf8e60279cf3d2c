#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use r2m::datakit::{self, Grammar};
use r2m::encoder::{ConceptSet, Vocabulary};
use r2m::numcore::{ParamStore, Tensor};
use r2m::seq2seq::{ModelDims, Network};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small random network with `vocab` outputs.
pub fn small_model(seed: u64, vocab: usize, d: usize) -> (ParamStore, Network) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let net = Network::new(&mut store, ModelDims::desk(vocab, d, d), &mut r).unwrap();
    (store, net)
}

/// 1–3 distinct non-reserved ids.
pub fn random_concepts(r: &mut impl Rng, vocab: usize) -> ConceptSet {
    let k = r.random_range(1..=3.min(vocab - 3));
    let mut ids = Vec::new();
    while ids.len() < k {
        let c = r.random_range(3..vocab);
        if !ids.contains(&c) {
            ids.push(c);
        }
    }
    ConceptSet::certain(ids).unwrap()
}

pub fn random_matrix(r: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::randn(&[rows, cols], scale, r)
}

/// Hinge triplet loss by enumerating every negative in both directions.
pub fn brute_triplet(s: &Tensor, m: f64) -> f64 {
    let b = s.rows();
    let mut total = 0.0;
    for i in 0..b {
        let mut img = 0.0f64;
        let mut cap = 0.0f64;
        for j in (0..b).filter(|&j| j != i) {
            img = img.max(((s.get(j, i) - s.get(i, i)) + m).max(0.0));
            cap = cap.max(((s.get(i, j) - s.get(i, i)) + m).max(0.0));
        }
        total += img + cap;
    }
    total * (1.0 / b as f64)
}

/// Corpus BLEU with n-grams counted by linear scans.
pub fn naive_bleu(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], n: usize) -> f64 {
    fn grams(t: &[String], k: usize) -> Vec<Vec<String>> {
        if t.len() < k {
            return vec![];
        }
        (0..=t.len() - k).map(|i| t[i..i + k].to_vec()).collect()
    }
    fn count(list: &[Vec<String>], g: &[String]) -> usize {
        list.iter().filter(|x| x.as_slice() == g).count()
    }
    let mut log_p = 0.0;
    for k in 1..=n {
        let (mut hit, mut tot) = (0usize, 0usize);
        for (c, rs) in cands.iter().zip(refs) {
            let cg = grams(c, k);
            let mut seen: Vec<Vec<String>> = Vec::new();
            for g in &cg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g.clone());
                let max_ref = rs.iter().map(|r| count(&grams(r, k), g)).max().unwrap_or(0);
                hit += count(&cg, g).min(max_ref);
            }
            tot += cg.len();
        }
        if hit == 0 {
            return 0.0;
        }
        log_p += (hit as f64 / tot as f64).ln();
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let mut r = 0usize;
    for (cand, rs) in cands.iter().zip(refs) {
        let mut best = rs[0].len();
        for x in rs {
            let (dx, db) = (x.len().abs_diff(cand.len()), best.abs_diff(cand.len()));
            if dx < db || (dx == db && x.len() < best) {
                best = x.len();
            }
        }
        r += best;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_p / n as f64).exp()
}

pub fn random_sentence(r: &mut impl Rng, words: &[&str], max: usize) -> Vec<String> {
    let len = r.random_range(1..=max);
    (0..len).map(|_| words[r.random_range(0..words.len())].to_string()).collect()
}

/// The first `n` corpus sentences (seeded) whose concept sets are pairwise distinct.
pub fn distinct_concept_corpus(n: usize, seed: u64) -> (Vocabulary, Vec<String>, Vec<Vec<String>>) {
    let g = Grammar::desk_default();
    let vocab = Vocabulary::from_words(g.all_words().iter().map(String::as_str));
    let dictionary: Vec<String> = g.nouns().iter().map(|s| s.to_string()).collect();
    let dict = datakit::dictionary_ids(&dictionary, &vocab);
    let pool = datakit::synth_corpus(&g, 50 * n, seed).unwrap();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut out = Vec::new();
    for s in pool {
        let mut ids = datakit::extract_concepts(&vocab.encode(&s), &dict).ids();
        ids.sort();
        if seen.insert(ids) {
            out.push(s);
            if out.len() == n {
                break;
            }
        }
    }
    assert_eq!(out.len(), n);
    (vocab, dictionary, out)
}
