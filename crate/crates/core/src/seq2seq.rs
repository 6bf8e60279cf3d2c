//! Decoder (encoder → fusion memory → recurrent memory → word head) and reconstructor.

use std::cmp::Ordering;

use rand::Rng;

use crate::encoder::{encode_concepts, ConceptSet, Embedding, LstmParams, Vocabulary};
use crate::error::{Error, Result};
use crate::fusion::{fm_forward, FmAttention, FmParams};
use crate::losses::SimilarityHead;
use crate::memory::{rm_step, RmAttention, RmParams};
use crate::numcore::{log_softmax, Graph, ParamId, ParamStore, Tensor, Var};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDims {
    pub vocab: usize,
    pub d: usize,
    pub heads: usize,
    /// Fusion memory key and value widths.
    pub d_k: usize,
    pub d_v: usize,
    /// Recurrent memory key and value widths.
    pub d_key: usize,
    pub d_val: usize,
    pub mem_rows: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub d_img: usize,
    pub shared_embeddings: bool,
    pub head_bias: bool,
    pub cosine: bool,
}

impl ModelDims {
    /// Desk-scale shape with `λ₁ = d_k` and `λ₂ = d_K`.
    pub fn desk(vocab: usize, d: usize, d_img: usize) -> Self {
        let heads = 2;
        let w = d / heads;
        Self {
            vocab,
            d,
            heads,
            d_k: w,
            d_v: w,
            d_key: w,
            d_val: w,
            mem_rows: 1,
            lambda1: w as f64,
            lambda2: w as f64,
            d_img,
            shared_embeddings: true,
            head_bias: true,
            cosine: false,
        }
    }
}

/// `logits = M·W_dᵀ + b` over the vocabulary.
#[derive(Clone, Copy, Debug)]
pub struct WordHead {
    /// `vocab × d`
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

/// Parameter handles for every block of the model.
#[derive(Clone, Debug)]
pub struct Network {
    pub dims: ModelDims,
    pub words: Embedding,
    pub concepts: Embedding,
    pub encoder: LstmParams,
    pub fusion: FmParams,
    pub decoder_rm: RmParams,
    pub reconstructor_rm: RmParams,
    pub head: WordHead,
    pub similarity: SimilarityHead,
}

impl Network {
    pub fn new(store: &mut ParamStore, dims: ModelDims, rng: &mut impl Rng) -> Result<Self> {
        let d = dims.d;
        let words = Embedding::register(store, "emb.words", dims.vocab, d, rng);
        let concepts = if dims.shared_embeddings {
            words
        } else {
            Embedding::register(store, "emb.concepts", dims.vocab, d, rng)
        };
        let encoder = LstmParams::register(store, "enc.lstm", d, d, rng);
        let fusion = FmParams::register(store, "dec.fm", d, dims.heads, dims.d_k, dims.d_v, dims.lambda1, rng)?;
        let rm = |store: &mut ParamStore, prefix: &str, rng: &mut _| {
            RmParams::register(
                store,
                prefix,
                d,
                dims.heads,
                dims.d_key,
                dims.d_val,
                dims.mem_rows,
                dims.lambda2,
                rng,
            )
        };
        let decoder_rm = rm(store, "dec.rm", rng)?;
        let reconstructor_rm = rm(store, "rec.rm", rng)?;
        let head = WordHead {
            weight: store.add("head.w", Tensor::randn(&[dims.vocab, d], 1.0 / (d as f64).sqrt(), rng)),
            bias: dims
                .head_bias
                .then(|| store.add("head.b", Tensor::zeros(&[1, dims.vocab]))),
        };
        let similarity = SimilarityHead::register(store, "sim", dims.d_img, d, dims.cosine, rng);
        Ok(Self {
            dims,
            words,
            concepts,
            encoder,
            fusion,
            decoder_rm,
            reconstructor_rm,
            head,
            similarity,
        })
    }

    pub fn encode(&self, g: &mut Graph, concepts: &ConceptSet, order_seed: u64) -> Result<Var> {
        encode_concepts(g, concepts, &self.concepts, &self.encoder, order_seed)
    }

    pub fn zero_memory(&self, g: &mut Graph) -> Var {
        g.constant(Tensor::zeros(&[self.dims.mem_rows, self.dims.d]))
    }
}

pub fn word_logits(g: &mut Graph, memory: Var, head: &WordHead) -> Result<Var> {
    let (rows, _) = g.shape(memory);
    if rows != 1 {
        return Err(Error::contract(format!("word head needs one memory row, got {rows}")));
    }
    let w = g.param(head.weight);
    let logits = g.matmul_t(memory, w)?;
    match head.bias {
        Some(b) => {
            let b = g.param(b);
            g.add(logits, b)
        }
        None => Ok(logits),
    }
}

/// Everything recorded while decoding one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeTrace {
    /// Emitted (greedy) or consumed-target (teacher forced) token per step.
    pub tokens: Vec<usize>,
    pub logits: Vec<Vec<f64>>,
    pub fm: Vec<FmAttention>,
    pub rm: Vec<RmAttention>,
    /// `M_0 .. M_len`; `M_0` is the zero initial memory.
    pub memories: Vec<Tensor>,
}

impl DecodeTrace {
    pub fn steps(&self) -> usize {
        self.tokens.len()
    }
}

/// Graph handles of a decoded sentence alongside its trace.
pub struct Decoded {
    pub logits: Vec<Var>,
    /// Memory after each step, `M_1 .. M_len`.
    pub memories: Vec<Var>,
    pub trace: DecodeTrace,
}

struct StepOut {
    memory: Var,
    logits: Var,
    fm: FmAttention,
    rm: RmAttention,
}

fn decoder_step(g: &mut Graph, net: &Network, v: Var, prev: usize, m_prev: Var) -> Result<StepOut> {
    let table = g.param(net.words.table);
    let w_prev = g.gather_rows(table, &[prev])?;
    let fm = fm_forward(g, v, w_prev, &net.fusion)?;
    let rm = rm_step(g, m_prev, fm.feature, &net.decoder_rm)?;
    let logits = word_logits(g, rm.memory, &net.head)?;
    Ok(StepOut {
        memory: rm.memory,
        logits,
        fm: fm.attention,
        rm: rm.attention,
    })
}

struct Recorder {
    decoded: Decoded,
}

impl Recorder {
    fn new(g: &mut Graph, net: &Network) -> (Self, Var) {
        let m0 = net.zero_memory(g);
        let trace = DecodeTrace {
            tokens: Vec::new(),
            logits: Vec::new(),
            fm: Vec::new(),
            rm: Vec::new(),
            memories: vec![g.value(m0).clone()],
        };
        let decoded = Decoded {
            logits: Vec::new(),
            memories: Vec::new(),
            trace,
        };
        (Self { decoded }, m0)
    }

    fn record(&mut self, g: &Graph, step: StepOut, token: usize) -> Var {
        let t = &mut self.decoded.trace;
        t.tokens.push(token);
        t.logits.push(g.value(step.logits).data().to_vec());
        t.fm.push(step.fm);
        t.rm.push(step.rm);
        t.memories.push(g.value(step.memory).clone());
        self.decoded.logits.push(step.logits);
        self.decoded.memories.push(step.memory);
        step.memory
    }
}

/// Teacher forcing: step `t` consumes target `t−1` (`<#start>` first) and
/// emits one logit row per target.
pub fn decode_teacher_forced(g: &mut Graph, net: &Network, v: Var, targets: &[usize]) -> Result<Decoded> {
    if targets.last() != Some(&Vocabulary::END_ID) {
        return Err(Error::contract("teacher-forced targets must end with <#end>"));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= net.dims.vocab) {
        return Err(Error::Vocabulary(format!("unknown token id {bad}")));
    }
    let (mut rec, mut m) = Recorder::new(g, net);
    let mut prev = Vocabulary::START_ID;
    for &t in targets {
        let step = decoder_step(g, net, v, prev, m)?;
        m = rec.record(g, step, t);
        prev = t;
    }
    Ok(rec.decoded)
}

/// Lowest index among the maximal entries.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding; stops after emitting `<#end>` or `max_len` tokens.
/// The returned caption excludes `<#end>`.
pub fn decode_greedy(g: &mut Graph, net: &Network, v: Var, max_len: usize) -> Result<(Vec<usize>, Decoded)> {
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let (mut rec, mut m) = Recorder::new(g, net);
    let mut prev = Vocabulary::START_ID;
    let mut caption = Vec::new();
    for _ in 0..max_len {
        let step = decoder_step(g, net, v, prev, m)?;
        let tok = argmax(g.value(step.logits).data());
        m = rec.record(g, step, tok);
        if tok == Vocabulary::END_ID {
            break;
        }
        caption.push(tok);
        prev = tok;
    }
    Ok((caption, rec.decoded))
}

/// Sum of token log-probabilities of `caption` (plus `<#end>` when `finished`).
pub fn sequence_log_prob(trace: &DecodeTrace) -> f64 {
    trace
        .logits
        .iter()
        .zip(&trace.tokens)
        .map(|(l, &t)| log_softmax(l)[t])
        .sum()
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub memory: Var,
}

impl Hypothesis {
    fn last(&self) -> usize {
        self.tokens.last().copied().unwrap_or(Vocabulary::START_ID)
    }

    fn finished(&self) -> bool {
        self.tokens.last() == Some(&Vocabulary::END_ID)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    /// Caption without the trailing `<#end>`.
    pub caption: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

/// Higher score first; equal scores fall back to lexicographically smaller tokens.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-wise beam search over summed token log-probabilities.
///
/// Each round expands every live hypothesis by every token and keeps the best
/// `width` candidates overall; candidates ending in `<#end>` move to the
/// finished pool and leave the beam. Search ends when the beam is empty, no
/// live hypothesis can still beat the pool, or `max_len` is reached.
pub fn beam_search(g: &mut Graph, net: &Network, v: Var, width: usize, max_len: usize) -> Result<BeamResult> {
    if width == 0 {
        return Err(Error::contract("beam width must be at least 1"));
    }
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let m0 = net.zero_memory(g);
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        memory: m0,
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates = Vec::new();
        for hyp in &alive {
            let step = decoder_step(g, net, v, hyp.last(), hyp.memory)?;
            let lp = log_softmax(g.value(step.logits).data());
            for (tok, l) in lp.into_iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + l,
                    memory: step.memory,
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(width);
        alive.clear();
        for c in candidates {
            if c.finished() {
                pool.push(c);
            } else {
                alive.push(c);
            }
        }
        let best_pool = pool.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if alive.is_empty() || alive.iter().all(|h| h.log_prob <= best_pool) {
            break;
        }
    }
    pool.sort_by(rank);
    alive.sort_by(rank);
    let (best, finished) = match pool.first() {
        Some(h) => (h, true),
        None => (alive.first().expect("beam keeps at least one hypothesis"), false),
    };
    let mut caption = best.tokens.clone();
    if finished {
        caption.pop();
    }
    Ok(BeamResult {
        caption,
        log_prob: best.log_prob,
        finished,
    })
}

/// Replays decoder memories through the reconstructor RM from a zero state and
/// returns the final reconstructed memory row `ṽ`.
pub fn reconstruct(g: &mut Graph, net: &Network, memories: &[Var]) -> Result<Var> {
    if memories.is_empty() {
        return Err(Error::contract("cannot reconstruct from an empty trace"));
    }
    let rm = &net.reconstructor_rm;
    let mut m = g.constant(Tensor::zeros(&[rm.rows, rm.d]));
    for &md in memories {
        m = rm_step(g, m, md, rm)?.memory;
    }
    Ok(m)
}
