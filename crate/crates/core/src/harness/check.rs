use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{ConceptSet, Vocabulary};
use crate::error::Result;
use crate::losses::{image_loss, rec_loss, similarity_matrix, triplet_loss, xe_loss};
use crate::numcore::{grad_check, Graph, GradReport, ParamId, ParamStore, Tensor, Var};
use crate::seq2seq::{decode_greedy, decode_teacher_forced, reconstruct, ModelDims, Network};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Named parameter groups as reported by `gradcheck`.
pub fn param_groups(store: &ParamStore) -> Vec<(&'static str, Vec<ParamId>)> {
    let by = |pred: &dyn Fn(&str) -> bool| -> Vec<ParamId> { store.ids().filter(|&id| pred(store.name(id))).collect() };
    vec![
        ("embeddings", by(&|n| n.starts_with("emb."))),
        ("encoder_lstm", by(&|n| n.starts_with("enc."))),
        ("fusion_memory", by(&|n| n.starts_with("dec.fm."))),
        ("decoder_rm", by(&|n| n.starts_with("dec.rm.") && !n.contains(".gate."))),
        ("reconstructor_rm", by(&|n| n.starts_with("rec.rm.") && !n.contains(".gate."))),
        ("gates", by(&|n| n.contains(".gate."))),
        ("word_head", by(&|n| n.starts_with("head."))),
        ("projection", by(&|n| n.starts_with("sim."))),
    ]
}

struct Probe {
    concepts: Vec<ConceptSet>,
    targets: Vec<Vec<usize>>,
    features: Tensor,
    pinned: Vec<Vec<usize>>,
}

/// Text and image losses summed over a small fixed batch, with the image-side
/// tokens pinned so that the loss is smooth in the parameters.
fn probe_loss(g: &mut Graph, net: &Network, p: &Probe, margin: f64) -> Result<Var> {
    let mut terms = Vec::new();
    for (k, (cs, t)) in p.concepts.iter().zip(&p.targets).enumerate() {
        let v = net.encode(g, cs, k as u64)?;
        let dec = decode_teacher_forced(g, net, v, t)?;
        terms.push(xe_loss(g, &dec.logits, t)?);
        let rec = reconstruct(g, net, &dec.memories)?;
        terms.push(rec_loss(g, v, rec)?);
    }
    let mut recons = Vec::new();
    let mut img_rec = Vec::new();
    for (k, (cs, toks)) in p.concepts.iter().zip(&p.pinned).enumerate() {
        let v = net.encode(g, cs, 100 + k as u64)?;
        let dec = decode_teacher_forced(g, net, v, toks)?;
        let r = reconstruct(g, net, &dec.memories)?;
        img_rec.push(rec_loss(g, v, r)?);
        recons.push(r);
    }
    let feats = g.constant(p.features.clone());
    let recon = g.concat_rows(&recons)?;
    let s = similarity_matrix(g, feats, recon, &net.similarity)?;
    let trip = triplet_loss(g, s, margin)?;
    let rec_cat = g.concat_cols(&img_rec)?;
    let rec_mean = g.mean(rec_cat);
    terms.push(image_loss(g, trip, rec_mean, 1.0)?);
    let all = g.concat_cols(&terms)?;
    Ok(g.sum(all))
}

/// Gradient check of every parameter group on a random model and batch.
pub fn full_model_check(dims: &ModelDims, seed: u64) -> Result<Vec<(&'static str, GradReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let net = Network::new(&mut store, dims.clone(), &mut rng)?;
    let words = 3..dims.vocab;
    let batch = 3;
    let mut concepts = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..batch {
        let mut ids: Vec<usize> = Vec::new();
        while ids.len() < 2 {
            let c = rng.random_range(words.clone());
            if !ids.contains(&c) {
                ids.push(c);
            }
        }
        concepts.push(ConceptSet::certain(ids)?);
        let len = rng.random_range(2..5);
        let mut t: Vec<usize> = (0..len).map(|_| rng.random_range(words.clone())).collect();
        t.push(Vocabulary::END_ID);
        targets.push(t);
    }
    let features = Tensor::randn(&[batch, dims.d_img], 1.0, &mut rng);
    let mut pinned = Vec::new();
    {
        let mut g = Graph::new(&store);
        for (k, cs) in concepts.iter().enumerate() {
            let v = net.encode(&mut g, cs, 100 + k as u64)?;
            let (mut cap, _) = decode_greedy(&mut g, &net, v, 4)?;
            if cap.is_empty() {
                cap.push(3 + k);
            }
            cap.push(Vocabulary::END_ID);
            pinned.push(cap);
        }
    }
    let probe = Probe {
        concepts,
        targets,
        features,
        pinned,
    };
    let mut out = Vec::new();
    for (name, ids) in param_groups(&store) {
        if ids.is_empty() {
            continue;
        }
        let report = grad_check(&mut store, &ids, GRADCHECK_EPS, |g| probe_loss(g, &net, &probe, 1.0))?;
        out.push((name, report));
    }
    Ok(out)
}
