//! Vocabulary, concept filtering and the LSTM concept encoder.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{read_to_string, Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

pub const START: &str = "<#start>";
pub const END: &str = "<#end>";
pub const UNK: &str = "<UNK>";

/// Token ↔ id table. Ids `0`, `1`, `2` are always `<#start>`, `<#end>`, `<UNK>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    to_id: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    pub const START_ID: usize = 0;
    pub const END_ID: usize = 1;
    pub const UNK_ID: usize = 2;

    /// Reserved tokens followed by `words` in first-seen order, duplicates skipped.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self {
            to_id: HashMap::new(),
            tokens: Vec::new(),
        };
        for t in [START, END, UNK] {
            v.push(t);
        }
        for w in words {
            if !v.to_id.contains_key(w) {
                v.push(w);
            }
        }
        v
    }

    fn push(&mut self, tok: &str) {
        self.to_id.insert(tok.to_string(), self.tokens.len());
        self.tokens.push(tok.to_string());
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.to_id.get(token).copied()
    }

    /// Id of `token`, mapping unknown words to `<UNK>`.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, words: &[String]) -> Vec<usize> {
        words.iter().map(|w| self.id_or_unk(w)).collect()
    }

    /// Joins token ids into text, stopping at `<#end>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != Self::END_ID)
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `token<TAB>id` lines.
    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn parse_tsv(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, detail: String| Error::Parse {
            path: origin.to_string(),
            line,
            detail,
        };
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| err(n + 1, "expected token<TAB>id".into()))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|e| err(n + 1, format!("bad id: {e}")))?;
            entries.push((n + 1, tok.to_string(), id));
        }
        let mut tokens = vec![None; entries.len()];
        for (line, tok, id) in entries {
            let slot = tokens
                .get_mut(id)
                .ok_or_else(|| err(line, format!("id {id} not contiguous")))?;
            if slot.is_some() {
                return Err(err(line, format!("duplicate id {id}")));
            }
            *slot = Some(tok);
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.expect("dense")).collect();
        for (i, r) in [START, END, UNK].iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(r) {
                return Err(Error::Vocabulary(format!("reserved token {r} must have id {i}")));
            }
        }
        let mut to_id = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if to_id.insert(t.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("token {t} appears twice")));
            }
        }
        Ok(Self { to_id, tokens })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_tsv(&read_to_string(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

/// Scored set of concept (vocabulary) ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConceptSet {
    items: Vec<(usize, f64)>,
}

impl ConceptSet {
    pub fn new(items: Vec<(usize, f64)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for &(id, s) in &items {
            if !seen.insert(id) {
                return Err(Error::contract(format!("concept {id} listed twice")));
            }
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::contract(format!("score {s} outside [0,1]")));
            }
        }
        Ok(Self { items })
    }

    /// All ids with score 1.
    pub fn certain(ids: impl IntoIterator<Item = usize>) -> Result<Self> {
        Self::new(ids.into_iter().map(|i| (i, 1.0)).collect())
    }

    pub fn items(&self) -> &[(usize, f64)] {
        &self.items
    }

    pub fn ids(&self) -> Vec<usize> {
        self.items.iter().map(|&(i, _)| i).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.items.iter().any(|&(i, _)| i == id)
    }
}

/// Keeps detections that are in `dictionary` and score at least `threshold`, in input order.
pub fn filter_concepts(detections: &ConceptSet, dictionary: &HashSet<usize>, threshold: f64) -> ConceptSet {
    ConceptSet {
        items: detections
            .items
            .iter()
            .copied()
            .filter(|&(id, s)| dictionary.contains(&id) && s >= threshold)
            .collect(),
    }
}

/// Word embedding table, `vocab × d`.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn register(store: &mut ParamStore, name: &str, vocab: usize, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            table: store.add(name, Tensor::randn(&[vocab, d], 0.3, rng)),
        }
    }

    pub fn rows(&self, store: &ParamStore) -> usize {
        store.get(self.table).rows()
    }
}

/// One gate of an LSTM: `x·W + h·U + b`.
#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

/// Standard LSTM cell weights; the input width equals the embedding width.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub input: GateParams,
    pub forget: GateParams,
    pub output: GateParams,
    pub candidate: GateParams,
    pub hidden: usize,
}

impl LstmParams {
    pub fn register(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut gate = |name: &str, bias: f64| GateParams {
            w: store.add(
                format!("{prefix}.w_{name}"),
                Tensor::randn(&[input, hidden], 1.0 / (input as f64).sqrt(), rng),
            ),
            u: store.add(
                format!("{prefix}.u_{name}"),
                Tensor::randn(&[hidden, hidden], 1.0 / (hidden as f64).sqrt(), rng),
            ),
            b: store.add(format!("{prefix}.b_{name}"), Tensor::filled(&[1, hidden], bias)),
        };
        Self {
            input: gate("i", 0.0),
            forget: gate("f", 1.0),
            output: gate("o", 0.0),
            candidate: gate("c", 0.0),
            hidden,
        }
    }
}

fn gate_pre(g: &mut Graph, p: &GateParams, x: Var, h: Var) -> Result<Var> {
    let (w, u, b) = (g.param(p.w), g.param(p.u), g.param(p.b));
    let xw = g.matmul(x, w)?;
    let hu = g.matmul(h, u)?;
    let s = g.add(xw, hu)?;
    g.add(s, b)
}

/// One LSTM step on `1×d` rows, returning `(h', c')`.
pub fn lstm_step(g: &mut Graph, x: Var, h: Var, c: Var, p: &LstmParams) -> Result<(Var, Var)> {
    let i = gate_pre(g, &p.input, x, h)?;
    let i = g.sigmoid(i);
    let f = gate_pre(g, &p.forget, x, h)?;
    let f = g.sigmoid(f);
    let o = gate_pre(g, &p.output, x, h)?;
    let o = g.sigmoid(o);
    let cand = gate_pre(g, &p.candidate, x, h)?;
    let cand = g.tanh(cand);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// The order in which concept ids are fed to the LSTM for a given seed.
pub fn concept_order(concepts: &ConceptSet, order_seed: u64) -> Vec<usize> {
    let mut ids = concepts.ids();
    if ids.is_empty() {
        return vec![Vocabulary::UNK_ID];
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));
    ids
}

/// Encodes a concept set into the final LSTM hidden state `v` (`1×d`).
///
/// Concepts are fed in a seed-determined shuffled order from a zero state; an
/// empty set is encoded as the single token `<UNK>`.
pub fn encode_concepts(
    g: &mut Graph,
    concepts: &ConceptSet,
    emb: &Embedding,
    lstm: &LstmParams,
    order_seed: u64,
) -> Result<Var> {
    let order = concept_order(concepts, order_seed);
    let table = g.param(emb.table);
    let rows = g.shape(table).0;
    if let Some(&bad) = order.iter().find(|&&i| i >= rows) {
        return Err(Error::Vocabulary(format!("concept id {bad} outside vocabulary of {rows}")));
    }
    let mut h = g.constant(Tensor::zeros(&[1, lstm.hidden]));
    let mut c = g.constant(Tensor::zeros(&[1, lstm.hidden]));
    for k in 0..order.len() {
        let x = g.gather_rows(table, &order[k..k + 1])?;
        (h, c) = lstm_step(g, x, h, c, lstm)?;
    }
    Ok(h)
}
