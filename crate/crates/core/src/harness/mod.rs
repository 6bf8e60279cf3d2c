//! Four-stage training curriculum, batching, evaluation and checkpoint plumbing.

mod check;
mod config;
mod metrics;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use check::{full_model_check, param_groups, GRADCHECK_EPS, GRADCHECK_TOL};
pub use config::TrainConfig;
pub use metrics::{bleu_n, concept_recall};

use crate::datakit::{self, extract_concepts, ImageSample, DETECTION_THRESHOLD};
use crate::encoder::{filter_concepts, ConceptSet, Vocabulary};
use crate::error::{Error, Result};
use crate::losses::{
    corpus_loss, image_loss, rec_loss, similarity_matrix, triplet_loss, xe_loss, LossWeights,
};
use crate::numcore::{checkpoint, Adam, Graph, ParamId, ParamStore, Tensor, Var};
use crate::seq2seq::{beam_search, decode_greedy, decode_teacher_forced, reconstruct, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    /// Cross-entropy on the corpus.
    Xe = 1,
    /// Cross-entropy plus text reconstruction.
    Supervised = 2,
    /// Triplet matching on images.
    Matching = 3,
    /// Matching plus image reconstruction.
    Unsupervised = 4,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Xe, Stage::Supervised, Stage::Matching, Stage::Unsupervised];

    pub fn number(self) -> usize {
        self as usize
    }

    pub fn from_number(n: usize) -> Result<Self> {
        Stage::ALL
            .get(n.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::contract(format!("stage must be 1..=4, got {n}")))
    }

    pub fn uses_images(self) -> bool {
        self >= Stage::Matching
    }

    pub fn lr(self, cfg: &TrainConfig) -> f64 {
        cfg.lr[self.number() - 1]
    }

    pub fn epochs(self, cfg: &TrainConfig) -> usize {
        cfg.epochs[self.number() - 1]
    }
}

/// Corpus sentences as training targets (ending in `<#end>`) with their concepts.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusData {
    pub targets: Vec<Vec<usize>>,
    pub concepts: Vec<ConceptSet>,
}

impl CorpusData {
    pub fn new(sentences: &[Vec<String>], vocab: &Vocabulary, dictionary: &HashSet<usize>) -> Self {
        let mut targets = Vec::with_capacity(sentences.len());
        let mut concepts = Vec::with_capacity(sentences.len());
        for s in sentences {
            let mut ids = vocab.encode(s);
            concepts.push(extract_concepts(&ids, dictionary));
            ids.push(Vocabulary::END_ID);
            targets.push(ids);
        }
        Self { targets, concepts }
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
            concepts: idx.iter().map(|&i| self.concepts[i].clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Image features with their thresholded detections. References are kept for
/// evaluation only; training never reads them.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageData {
    pub features: Vec<Vec<f64>>,
    pub concepts: Vec<ConceptSet>,
    pub references: Vec<Vec<String>>,
}

impl ImageData {
    pub fn new(samples: &[ImageSample], dictionary: &HashSet<usize>) -> Self {
        Self {
            features: samples.iter().map(|s| s.feature.clone()).collect(),
            concepts: samples
                .iter()
                .map(|s| filter_concepts(&s.detections, dictionary, DETECTION_THRESHOLD))
                .collect(),
            references: samples.iter().map(|s| s.caption.clone()).collect(),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            concepts: idx.iter().map(|&i| self.concepts[i].clone()).collect(),
            references: idx.iter().map(|&i| self.references[i].clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// What a stage trains on; stages 1–2 accept only text, 3–4 only images.
#[derive(Clone, Copy, Debug)]
pub enum StageData<'a> {
    Corpus(&'a CorpusData),
    Images(&'a ImageData),
}

/// SplitMix64 over the parts, for deriving independent seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Seeded shuffle of `0..n` cut into contiguous batches. Image stages drop a
/// trailing batch smaller than two.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, image_stage: bool) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::contract("cannot batch an empty dataset"));
    }
    if batch_size == 0 || (image_stage && batch_size < 2) {
        return Err(Error::contract(format!("batch size {batch_size} too small")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if image_stage && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
    }
    if out.is_empty() {
        return Err(Error::contract("no batch of at least two images"));
    }
    Ok(out)
}

/// Parameters, vocabulary and dictionary of a model, plus the last completed stage.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub net: Network,
    pub vocab: Vocabulary,
    pub dictionary: Vec<String>,
    pub stage: usize,
}

pub const CONFIG_FILE: &str = "config.txt";
const STAGE_KEY: &str = "meta.stage";

impl Model {
    pub fn new(cfg: &TrainConfig, vocab: Vocabulary, dictionary: Vec<String>) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0xA11]));
        let net = Network::new(&mut store, cfg.dims(vocab.len()), &mut rng)?;
        Ok(Self {
            store,
            net,
            vocab,
            dictionary,
            stage: 0,
        })
    }

    pub fn dictionary_ids(&self) -> HashSet<usize> {
        datakit::dictionary_ids(&self.dictionary, &self.vocab)
    }

    /// Writes the checkpoint plus `config.txt`, `vocab.tsv` and `dictionary.txt` beside it.
    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir)?;
        checkpoint::save(path, &self.store, &[(STAGE_KEY, &Tensor::scalar(self.stage as f64))])?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
        self.vocab.save(&dir.join(datakit::io::VOCAB))?;
        datakit::io::save_dictionary(&dir.join(datakit::io::DICTIONARY), &self.dictionary)?;
        Ok(())
    }

    /// Loads a checkpoint and the files saved next to it.
    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let cfg = TrainConfig::load(&dir.join(CONFIG_FILE))?;
        let vocab = Vocabulary::load(&dir.join(datakit::io::VOCAB))?;
        let dictionary = datakit::io::load_dictionary(&dir.join(datakit::io::DICTIONARY))?;
        let mut model = Self::new(&cfg, vocab, dictionary)?;
        let (meta, tensors): (Vec<_>, Vec<_>) = checkpoint::load(path)?
            .into_iter()
            .partition(|(n, _)| n.starts_with("meta."));
        model.store.load_values(tensors)?;
        model.stage = meta
            .iter()
            .find(|(n, _)| n == STAGE_KEY)
            .map(|(_, t)| t.data()[0] as usize)
            .ok_or_else(|| Error::Checkpoint("missing stage marker".into()))?;
        Ok((model, cfg))
    }
}

/// Parameters updated in each stage. The reconstructor joins at stage 2; stages
/// 3–4 train the prefixes in `cfg.image_trainable`. The word head is never
/// trained on images since no image loss reaches it.
pub fn stage_params(model: &Model, stage: Stage, cfg: &TrainConfig) -> Vec<ParamId> {
    let s = &model.store;
    let keep = |name: &str| match stage {
        Stage::Xe => !name.starts_with("rec.") && !name.starts_with("sim."),
        Stage::Supervised => !name.starts_with("sim."),
        Stage::Matching | Stage::Unsupervised => {
            !name.starts_with("head.") && cfg.image_trainable.iter().any(|p| name.starts_with(p.as_str()))
        }
    };
    s.ids().filter(|&id| keep(s.name(id))).collect()
}

fn order_seed(cfg: &TrainConfig, stage: Stage, epoch: usize, sample: usize) -> u64 {
    if cfg.shuffle_concepts {
        mix_seed(&[cfg.seed, stage.number() as u64, epoch as u64, sample as u64])
    } else {
        mix_seed(&[cfg.seed, sample as u64])
    }
}

/// Encoding seed used at evaluation time for sample `i`.
pub fn eval_order_seed(i: usize) -> u64 {
    mix_seed(&[0xE7A1, i as u64])
}

/// Which terms a batch loss includes.
#[derive(Clone, Copy, Debug)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub with_rec: bool,
    /// Treat the encoded `v` as a fixed target in the reconstruction term.
    pub detach_target: bool,
    pub max_len: usize,
}

impl LossOptions {
    pub fn for_stage(stage: Stage, cfg: &TrainConfig) -> Self {
        Self {
            weights: cfg.weights(),
            with_rec: matches!(stage, Stage::Supervised | Stage::Unsupervised),
            detach_target: cfg.detach_rec_target,
            max_len: cfg.max_len,
        }
    }
}

fn rec_term(g: &mut Graph, v: Var, v_rec: Var, detach: bool) -> Result<Var> {
    let target = if detach { g.constant(g.value(v).clone()) } else { v };
    rec_loss(g, target, v_rec)
}

/// Batch mean of `L_XE`, plus `β·L_rec` when the options ask for it.
pub fn corpus_batch_loss(
    g: &mut Graph,
    net: &Network,
    data: &CorpusData,
    batch: &[usize],
    opts: &LossOptions,
    seed_of: impl Fn(usize) -> u64,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(batch.len());
    for &i in batch {
        let v = net.encode(g, &data.concepts[i], seed_of(i))?;
        let dec = decode_teacher_forced(g, net, v, &data.targets[i])?;
        let xe = xe_loss(g, &dec.logits, &data.targets[i])?;
        terms.push(if opts.with_rec {
            let rec = reconstruct(g, net, &dec.memories)?;
            let rec = rec_term(g, v, rec, opts.detach_target)?;
            corpus_loss(g, xe, rec, opts.weights.beta)?
        } else {
            xe
        });
    }
    let all = g.concat_cols(&terms)?;
    Ok(g.mean(all))
}

/// Triplet matching between image features and reconstructions of greedily
/// decoded captions, plus `γ·L_rec` when the options ask for it. Token choices
/// carry no gradient; the memory chain does.
pub fn image_batch_loss(
    g: &mut Graph,
    net: &Network,
    data: &ImageData,
    batch: &[usize],
    opts: &LossOptions,
    seed_of: impl Fn(usize) -> u64,
) -> Result<Var> {
    let mut recons = Vec::with_capacity(batch.len());
    let mut recs = Vec::with_capacity(batch.len());
    let mut feats = Vec::with_capacity(batch.len());
    for &i in batch {
        let v = net.encode(g, &data.concepts[i], seed_of(i))?;
        let (_, dec) = decode_greedy(g, net, v, opts.max_len)?;
        let r = reconstruct(g, net, &dec.memories)?;
        if opts.with_rec {
            recs.push(rec_term(g, v, r, opts.detach_target)?);
        }
        recons.push(r);
        feats.push(data.features[i].clone());
    }
    let feats = g.constant(Tensor::from_rows(&feats)?);
    let recon = g.concat_rows(&recons)?;
    let s = similarity_matrix(g, feats, recon, &net.similarity)?;
    let trip = triplet_loss(g, s, opts.weights.margin)?;
    if opts.with_rec {
        let all = g.concat_cols(&recs)?;
        let rec = g.mean(all);
        image_loss(g, trip, rec, opts.weights.gamma)
    } else {
        Ok(trip)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    /// Loss of every optimisation step, in order.
    pub losses: Vec<f64>,
    pub epoch_means: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(cfg: &TrainConfig, stage: Stage, epoch: Option<usize>) -> PathBuf {
    match epoch {
        Some(e) => cfg.out_dir.join(format!("stage{}_epoch{:03}.ckpt", stage.number(), e + 1)),
        None => cfg.out_dir.join(format!("stage{}.ckpt", stage.number())),
    }
}

/// Trains one stage with a fresh optimiser. Checkpoints go to `cfg.out_dir`
/// unless `save` is false.
pub fn run_stage(stage: Stage, cfg: &TrainConfig, model: &mut Model, data: StageData, save: bool) -> Result<StageOutcome> {
    run_stage_with(stage, cfg, model, data, save, |_, _| Ok(true))
}

/// [`run_stage`] with a hook after every epoch; returning `false` ends the stage early.
pub fn run_stage_with(
    stage: Stage,
    cfg: &TrainConfig,
    model: &mut Model,
    data: StageData,
    save: bool,
    mut after_epoch: impl FnMut(usize, &Model) -> Result<bool>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if model.stage + 1 != stage.number() && !cfg.allow_out_of_order {
        return Err(Error::contract(format!(
            "stage {} requested but the model has completed stage {}",
            stage.number(),
            model.stage
        )));
    }
    let n = match (stage.uses_images(), data) {
        (false, StageData::Corpus(c)) => c.len(),
        (true, StageData::Images(i)) => i.len(),
        _ => {
            return Err(Error::contract(format!(
                "stage {} cannot train on this data source",
                stage.number()
            )))
        }
    };
    let mut adam = Adam::new(&model.store, stage_params(model, stage, cfg), stage.lr(cfg))?;
    let opts = LossOptions::for_stage(stage, cfg);
    let mut outcome = StageOutcome {
        stage,
        losses: Vec::new(),
        epoch_means: Vec::new(),
        checkpoints: Vec::new(),
    };
    let epochs = stage.epochs(cfg);
    for epoch in 0..epochs {
        let batch_seed = mix_seed(&[cfg.seed, stage.number() as u64, epoch as u64, 0xBA7C]);
        let batches = make_batches(n, cfg.batch_size, batch_seed, stage.uses_images())?;
        let mut sum = 0.0;
        for batch in &batches {
            let (loss, grads) = {
                let mut g = Graph::new(&model.store);
                let seed_of = |i| order_seed(cfg, stage, epoch, i);
                let l = match data {
                    StageData::Corpus(c) => corpus_batch_loss(&mut g, &model.net, c, batch, &opts, seed_of)?,
                    StageData::Images(im) => image_batch_loss(&mut g, &model.net, im, batch, &opts, seed_of)?,
                };
                let value = g.scalar(l);
                if !value.is_finite() {
                    return Err(Error::Numeric {
                        op: "run_stage",
                        detail: format!("stage {} epoch {} loss is {value}", stage.number(), epoch + 1),
                    });
                }
                (value, g.backward(l)?)
            };
            adam.step(&mut model.store, &grads)?;
            outcome.losses.push(loss);
            sum += loss;
        }
        outcome.epoch_means.push(sum / batches.len() as f64);
        let go_on = after_epoch(epoch, model)?;
        if save && cfg.epoch_checkpoints && epoch + 1 < epochs && go_on {
            // mid-stage checkpoints still count as the previous stage
            let p = checkpoint_path(cfg, stage, Some(epoch));
            let done = model.stage;
            model.stage = stage.number() - 1;
            model.save(&p, cfg)?;
            model.stage = done;
            outcome.checkpoints.push(p);
        }
        if !go_on {
            break;
        }
    }
    model.stage = stage.number();
    if save {
        let p = checkpoint_path(cfg, stage, None);
        model.save(&p, cfg)?;
        outcome.checkpoints.push(p);
    }
    Ok(outcome)
}

/// Training inputs read from a `synth-data` directory.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub vocab: Vocabulary,
    pub dictionary: Vec<String>,
    pub corpus: CorpusData,
    pub images: ImageData,
    pub val_images: ImageData,
}

impl TrainData {
    pub fn load(dir: &Path) -> Result<Self> {
        use datakit::io;
        let vocab = Vocabulary::load(&dir.join(io::VOCAB))?;
        let dictionary = io::load_dictionary(&dir.join(io::DICTIONARY))?;
        let dict = datakit::dictionary_ids(&dictionary, &vocab);
        let corpus = CorpusData::new(&io::load_corpus(&dir.join(io::CORPUS))?, &vocab, &dict);
        let images = ImageData::new(&io::load_images(dir, &vocab)?, &dict);
        let pick = |name: &str, n: usize| -> Result<Vec<usize>> {
            let idx = io::load_split(&dir.join(name))?;
            match idx.iter().find(|&&i| i >= n) {
                Some(bad) => Err(Error::contract(format!("{name}: index {bad} out of range {n}"))),
                None => Ok(idx),
            }
        };
        let corpus_train = pick("corpus_train.idx", corpus.len())?;
        let image_train = pick("image_train.idx", images.len())?;
        let image_val = pick("image_val.idx", images.len())?;
        Ok(Self {
            corpus: corpus.subset(&corpus_train),
            val_images: images.subset(&image_val),
            images: images.subset(&image_train),
            vocab,
            dictionary,
        })
    }

    pub fn from_dataset(ds: &datakit::Dataset) -> Self {
        let dict = ds.dictionary_ids();
        let corpus = CorpusData::new(&ds.corpus, &ds.vocab, &dict);
        let images = ImageData::new(&ds.images, &dict);
        Self {
            corpus: corpus.subset(&ds.corpus_split.train),
            val_images: images.subset(&ds.image_split.val),
            images: images.subset(&ds.image_split.train),
            vocab: ds.vocab.clone(),
            dictionary: ds.dictionary.clone(),
        }
    }

    pub fn stage_data(&self, stage: Stage) -> StageData<'_> {
        if stage.uses_images() {
            StageData::Images(&self.images)
        } else {
            StageData::Corpus(&self.corpus)
        }
    }
}

/// Teacher-forced mean per-token cross-entropy over a corpus, with evaluation
/// concept orders.
pub fn corpus_token_xe(model: &Model, data: &CorpusData) -> Result<f64> {
    let (mut total, mut tokens) = (0.0, 0usize);
    for (i, (cs, t)) in data.concepts.iter().zip(&data.targets).enumerate() {
        let mut g = Graph::new(&model.store);
        let v = model.net.encode(&mut g, cs, eval_order_seed(i))?;
        let dec = decode_teacher_forced(&mut g, &model.net, v, t)?;
        total += crate::losses::xe_value(&dec.trace.logits, t)? * t.len() as f64;
        tokens += t.len();
    }
    Ok(total / tokens as f64)
}

/// Decodes a caption per concept set with beam search (`width == 1` is greedy).
pub fn caption_all(model: &Model, concepts: &[ConceptSet], width: usize, max_len: usize) -> Result<Vec<Vec<usize>>> {
    concepts
        .iter()
        .enumerate()
        .map(|(i, cs)| {
            let mut g = Graph::new(&model.store);
            let v = model.net.encode(&mut g, cs, eval_order_seed(i))?;
            if width == 1 {
                Ok(decode_greedy(&mut g, &model.net, v, max_len)?.0)
            } else {
                Ok(beam_search(&mut g, &model.net, v, width, max_len)?.caption)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub bleu: [f64; 4],
    pub concept_recall: f64,
    pub captions: Vec<String>,
}

impl EvalReport {
    /// `key=value` lines; captions come last as `caption.<i>=...`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, b) in self.bleu.iter().enumerate() {
            writeln!(s, "bleu{}={b}", k + 1).expect("string write");
        }
        writeln!(s, "concept_recall={}", self.concept_recall).expect("string write");
        writeln!(s, "samples={}", self.captions.len()).expect("string write");
        for (i, c) in self.captions.iter().enumerate() {
            writeln!(s, "caption.{i}={c}").expect("string write");
        }
        s
    }
}

/// BLEU-1..4 against the hidden image captions and concept recall against the
/// thresholded detections.
pub fn evaluate(model: &Model, data: &ImageData, width: usize, max_len: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::contract("evaluation split is empty"));
    }
    let caps = caption_all(model, &data.concepts, width, max_len)?;
    let words: Vec<Vec<String>> = caps
        .iter()
        .map(|c| c.iter().map(|&t| model.vocab.token(t).unwrap_or("<UNK>").to_string()).collect())
        .collect();
    let refs: Vec<Vec<Vec<String>>> = data.references.iter().map(|r| vec![r.clone()]).collect();
    let mut bleu = [0.0; 4];
    for (n, b) in bleu.iter_mut().enumerate() {
        *b = bleu_n(&words, &refs, n + 1)?;
    }
    Ok(EvalReport {
        bleu,
        concept_recall: concept_recall(&caps, &data.concepts)?,
        captions: words.iter().map(|w| w.join(" ")).collect(),
    })
}
