//! Synthetic unpaired data: a template grammar, concept extraction, simulated
//! detections and image features, plus the on-disk formats.

mod grammar;
pub mod io;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use grammar::{Domain, Grammar, Piece, SlotKind, Template};

use crate::encoder::{ConceptSet, Vocabulary};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Detections scoring below this are dropped before encoding.
pub const DETECTION_THRESHOLD: f64 = 0.3;

/// Lowercase, whitespace split.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_lowercase).collect()
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws `n` corpus-domain sentences.
pub fn synth_corpus(g: &Grammar, n: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    synth_sentences(g, Domain::Corpus, n, seed)
}

pub fn synth_sentences(g: &Grammar, domain: Domain, n: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if n == 0 {
        return Err(Error::contract("need at least one sentence"));
    }
    if g.templates_for(domain).is_empty() {
        return Err(Error::contract(format!("grammar has no {domain} templates")));
    }
    let mut rng = rng_for(seed, domain as u64);
    Ok((0..n).map(|_| g.sample(domain, &mut rng).1).collect())
}

/// Dictionary hits of `tokens`, in first-occurrence order, each with score 1.
pub fn extract_concepts(tokens: &[usize], dictionary: &HashSet<usize>) -> ConceptSet {
    let mut seen = HashSet::new();
    let ids: Vec<usize> = tokens
        .iter()
        .copied()
        .filter(|t| dictionary.contains(t) && seen.insert(*t))
        .collect();
    ConceptSet::certain(ids).expect("unique ids with unit scores")
}

/// Uniform scores per concept; if none reaches the threshold the best one is redrawn above it.
pub fn simulate_detections(ids: &[usize], seed: u64) -> ConceptSet {
    let mut rng = rng_for(seed, 7);
    let mut items: Vec<(usize, f64)> = ids.iter().map(|&i| (i, rng.random::<f64>())).collect();
    if let Some(best) = items
        .iter_mut()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .filter(|b| b.1 < DETECTION_THRESHOLD)
    {
        best.1 = DETECTION_THRESHOLD + (1.0 - DETECTION_THRESHOLD) * rng.random::<f64>();
    }
    ConceptSet::new(items).expect("scores in [0,1]")
}

/// Fixed appearance model standing in for a pretrained image encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Appearance {
    /// `vocab × d_app` concept appearance vectors.
    pub table: Tensor,
    /// `d_app × d_img` lift.
    pub lift: Tensor,
}

impl Appearance {
    pub fn random(vocab: usize, d_app: usize, d_img: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, 11);
        Self {
            table: Tensor::randn(&[vocab, d_app], 1.0, &mut rng),
            lift: Tensor::randn(&[d_app, d_img], 1.0 / (d_app as f64).sqrt(), &mut rng),
        }
    }

    pub fn d_img(&self) -> usize {
        self.lift.cols()
    }
}

/// Mean appearance of the concepts, lifted to `d_img`, plus Gaussian noise.
pub fn synth_image_features(concepts: &[usize], app: &Appearance, noise_sigma: f64, seed: u64) -> Result<Vec<f64>> {
    let d_app = app.table.cols();
    let mut mean = vec![0.0; d_app];
    for &c in concepts {
        if c >= app.table.rows() {
            return Err(Error::Vocabulary(format!("concept id {c} has no appearance row")));
        }
        for (m, x) in mean.iter_mut().zip(app.table.row_slice(c)) {
            *m += x / concepts.len() as f64;
        }
    }
    let mut feat = Tensor::row(mean).matmul(&app.lift)?.into_data();
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::contract(e.to_string()))?;
        let mut rng = rng_for(seed, 13);
        for f in &mut feat {
            *f += normal.sample(&mut rng);
        }
    }
    Ok(feat)
}

/// Disjoint train/val/test index lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl DatasetSplit {
    /// Shuffles `0..n` and cuts it by the given fractions.
    pub fn new(n: usize, val_frac: f64, test_frac: f64, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_for(seed, 17));
        let n_val = (n as f64 * val_frac).round() as usize;
        let n_test = (n as f64 * test_frac).round() as usize;
        let test = idx.split_off(n - n_test);
        let val = idx.split_off(n - n_test - n_val);
        Self {
            train: idx,
            val,
            test,
            seed,
        }
    }
}

/// A synthetic image: its hidden caption, detector output and feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub caption: Vec<String>,
    pub detections: ConceptSet,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_corpus: usize,
    pub n_images: usize,
    pub d_app: usize,
    pub d_img: usize,
    pub noise_sigma: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_corpus: 2000,
            n_images: 500,
            d_app: 32,
            d_img: 64,
            noise_sigma: 0.05,
            val_frac: 0.1,
            test_frac: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub dictionary: Vec<String>,
    pub corpus: Vec<Vec<String>>,
    pub images: Vec<ImageSample>,
    pub corpus_split: DatasetSplit,
    pub image_split: DatasetSplit,
}

impl Dataset {
    pub fn dictionary_ids(&self) -> HashSet<usize> {
        dictionary_ids(&self.dictionary, &self.vocab)
    }
}

pub fn dictionary_ids(words: &[String], vocab: &Vocabulary) -> HashSet<usize> {
    words.iter().filter_map(|w| vocab.id(w)).collect()
}

/// Builds the unpaired corpus and image sets. Captions of images are drawn from
/// the image-domain templates and fillers, so no image has a matching corpus sentence
/// except by coincidence of nouns.
pub fn generate(g: &Grammar, cfg: &SynthConfig) -> Result<Dataset> {
    let vocab = Vocabulary::from_words(g.all_words().iter().map(String::as_str));
    let dictionary: Vec<String> = g.nouns().iter().map(|s| s.to_string()).collect();
    let dict = dictionary_ids(&dictionary, &vocab);
    let corpus = synth_corpus(g, cfg.n_corpus, cfg.seed)?;
    let captions = synth_sentences(g, Domain::Image, cfg.n_images, cfg.seed)?;
    let app = Appearance::random(vocab.len(), cfg.d_app, cfg.d_img, cfg.seed);
    let mut images = Vec::with_capacity(captions.len());
    for (k, caption) in captions.into_iter().enumerate() {
        let sample_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
        let truth = extract_concepts(&vocab.encode(&caption), &dict).ids();
        let feature = synth_image_features(&truth, &app, cfg.noise_sigma, sample_seed)?;
        images.push(ImageSample {
            caption,
            detections: simulate_detections(&truth, sample_seed),
            feature,
        });
    }
    Ok(Dataset {
        corpus_split: DatasetSplit::new(cfg.n_corpus, cfg.val_frac, cfg.test_frac, cfg.seed),
        image_split: DatasetSplit::new(cfg.n_images, cfg.val_frac, cfg.test_frac, cfg.seed ^ 0x5eed),
        vocab,
        dictionary,
        corpus,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn extracts_dictionary_words_in_order() {
        let s = words("a man riding on the back of a motorcycle");
        let vocab = Vocabulary::from_words(s.iter().map(String::as_str).chain(["dog"]));
        let dict = dictionary_ids(&words("man motorcycle dog"), &vocab);
        let got = extract_concepts(&vocab.encode(&s), &dict);
        assert_eq!(got.ids(), vec![vocab.id("man").unwrap(), vocab.id("motorcycle").unwrap()]);
        assert!(got.items().iter().all(|&(_, p)| p == 1.0));

        let none = extract_concepts(&vocab.encode(&words("a the of")), &dict);
        assert!(none.is_empty());
        let twice = extract_concepts(&vocab.encode(&words("dog and dog")), &dict);
        assert_eq!(twice.len(), 1);
    }

    #[test]
    fn corpus_is_seeded() {
        let g = Grammar::desk_default();
        assert_eq!(synth_corpus(&g, 50, 3).unwrap(), synth_corpus(&g, 50, 3).unwrap());
        assert_ne!(synth_corpus(&g, 50, 3).unwrap(), synth_corpus(&g, 50, 4).unwrap());
        assert!(synth_corpus(&g, 0, 3).is_err());
    }

    #[test]
    fn every_template_occurs() {
        let g = Grammar::desk_default();
        let mut rng = rng_for(9, 0);
        let mut seen = HashSet::new();
        for _ in 0..1000 {
            seen.insert(g.sample(Domain::Corpus, &mut rng).0);
        }
        assert_eq!(seen.len(), g.templates_for(Domain::Corpus).len());
    }

    #[test]
    fn identity_lift_gives_mean_embedding() {
        let table = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![4.0, 4.0]]).unwrap();
        let app = Appearance {
            table,
            lift: Tensor::identity(2),
        };
        assert_eq!(synth_image_features(&[0, 1], &app, 0.0, 1).unwrap(), vec![0.5, 1.0]);
        let a = synth_image_features(&[0, 2], &app, 0.1, 5).unwrap();
        assert_eq!(a, synth_image_features(&[0, 2], &app, 0.1, 5).unwrap());
        // disjoint sets over orthogonal rows
        let x = synth_image_features(&[0], &app, 0.0, 1).unwrap();
        let y = synth_image_features(&[1], &app, 0.0, 1).unwrap();
        assert_eq!(x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>(), 0.0);
    }

    #[test]
    fn detections_always_pass_threshold() {
        for seed in 0..500 {
            let d = simulate_detections(&[4, 9, 11], seed);
            assert!(d.items().iter().any(|&(_, p)| p >= DETECTION_THRESHOLD));
            assert_eq!(d.ids(), vec![4, 9, 11]);
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let s = DatasetSplit::new(101, 0.1, 0.2, 4);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert_eq!((s.val.len(), s.test.len()), (10, 20));
    }

    #[test]
    fn generation_is_reproducible() {
        let g = Grammar::desk_default();
        let cfg = SynthConfig {
            n_corpus: 40,
            n_images: 20,
            ..SynthConfig::default()
        };
        let a = generate(&g, &cfg).unwrap();
        let b = generate(&g, &cfg).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.images, b.images);
        let dict = a.dictionary_ids();
        for img in &a.images {
            let kept = crate::encoder::filter_concepts(&img.detections, &dict, DETECTION_THRESHOLD);
            assert!(!kept.is_empty());
            assert!(img.feature.iter().all(|x| x.is_finite()));
        }
    }
}
