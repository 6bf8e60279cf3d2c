//! Training objectives: token cross-entropy, reconstruction distance, in-batch
//! hardest-negative triplet ranking, and their weighted combinations.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{log_softmax, Graph, ParamId, ParamStore, Tensor, Var};

/// Loss weights: `β` for text reconstruction, `γ` for image reconstruction, margin `m`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 1.0,
            gamma: 1.0,
            margin: 0.2,
        }
    }
}

/// Projects raw image features into the model width for scoring against
/// reconstructed concept vectors.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityHead {
    /// `d_img × d`
    pub projection: ParamId,
    pub cosine: bool,
}

impl SimilarityHead {
    pub fn register(store: &mut ParamStore, prefix: &str, d_img: usize, d: usize, cosine: bool, rng: &mut impl Rng) -> Self {
        Self {
            projection: store.add(
                format!("{prefix}.w_p"),
                Tensor::randn(&[d_img, d], 1.0 / (d_img as f64).sqrt(), rng),
            ),
            cosine,
        }
    }
}

/// Mean over steps of `−log softmax(logits_t)[target_t]`.
pub fn xe_loss(g: &mut Graph, logits: &[Var], targets: &[usize]) -> Result<Var> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::dim("xe_loss", &[logits.len()], &[targets.len()]));
    }
    let terms = logits
        .iter()
        .zip(targets)
        .map(|(&l, &t)| g.neg_log_softmax(l, t))
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.concat_cols(&terms)?;
    Ok(g.mean(stacked))
}

/// Value-only cross-entropy over recorded logit rows.
pub fn xe_value(logits: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::dim("xe_value", &[logits.len()], &[targets.len()]));
    }
    let total: f64 = logits.iter().zip(targets).map(|(l, &t)| -log_softmax(l)[t]).sum();
    Ok(total / logits.len() as f64)
}

/// `‖v − ṽ‖²`.
pub fn rec_loss(g: &mut Graph, v: Var, v_rec: Var) -> Result<Var> {
    let diff = g.sub(v, v_rec)?;
    Ok(g.sum_sq(diff))
}

/// `L_S = xe + β·rec`.
pub fn corpus_loss(g: &mut Graph, xe: Var, rec: Var, beta: f64) -> Result<Var> {
    let r = g.scale(rec, beta);
    g.add(xe, r)
}

/// `L_I = trip + γ·rec`.
pub fn image_loss(g: &mut Graph, trip: Var, rec: Var, gamma: f64) -> Result<Var> {
    let r = g.scale(rec, gamma);
    g.add(trip, r)
}

/// `S[i][j] = ⟨W_p·feat_i, recon_j⟩` (cosine when the head asks for it).
pub fn similarity_matrix(g: &mut Graph, feats: Var, recons: Var, head: &SimilarityHead) -> Result<Var> {
    let (bf, _) = g.shape(feats);
    let (br, _) = g.shape(recons);
    if bf != br {
        return Err(Error::dim("similarity_matrix", &[bf], &[br]));
    }
    let w = g.param(head.projection);
    let proj = g.matmul(feats, w)?;
    if head.cosine {
        let p = g.normalize_rows(proj);
        let r = g.normalize_rows(recons);
        g.matmul_t(p, r)
    } else {
        g.matmul_t(proj, recons)
    }
}

/// Hardest in-batch negatives for anchor `i`: `(image j ≠ i maximising S[j][i],
/// caption j ≠ i maximising S[i][j])`, ties to the smaller index.
pub fn hardest_negatives(s: &Tensor, i: usize) -> (usize, usize) {
    let b = s.rows();
    let mut img = None::<usize>;
    let mut cap = None::<usize>;
    for j in (0..b).filter(|&j| j != i) {
        if img.is_none_or(|k| s.get(j, i) > s.get(k, i)) {
            img = Some(j);
        }
        if cap.is_none_or(|k| s.get(i, j) > s.get(i, k)) {
            cap = Some(j);
        }
    }
    (img.expect("B ≥ 2"), cap.expect("B ≥ 2"))
}

/// Batch-mean hinge triplet ranking loss with hardest in-batch negatives in
/// both directions.
pub fn triplet_loss(g: &mut Graph, s: Var, margin: f64) -> Result<Var> {
    let (b, c) = g.shape(s);
    if b != c {
        return Err(Error::dim("triplet_loss", &[b, c], &[b, b]));
    }
    if b < 2 {
        return Err(Error::contract("triplet loss needs a batch of at least 2"));
    }
    let sv = g.value(s).clone();
    let mut diag = Vec::with_capacity(b);
    let mut neg_img = Vec::with_capacity(b);
    let mut neg_cap = Vec::with_capacity(b);
    for i in 0..b {
        let (ji, jc) = hardest_negatives(&sv, i);
        diag.push((i, i));
        neg_img.push((ji, i));
        neg_cap.push((i, jc));
    }
    let pos = g.pick(s, &diag)?;
    let ni = g.pick(s, &neg_img)?;
    let nc = g.pick(s, &neg_cap)?;
    let a = g.sub(ni, pos)?;
    let a = g.shift(a, margin);
    let a = g.relu(a);
    let c = g.sub(nc, pos)?;
    let c = g.shift(c, margin);
    let c = g.relu(c);
    let both = g.add(a, c)?;
    let total = g.sum(both);
    Ok(g.scale(total, 1.0 / b as f64))
}

/// Value-only triplet loss, same semantics as [`triplet_loss`].
pub fn triplet_value(s: &Tensor, margin: f64) -> Result<f64> {
    let params = ParamStore::new();
    let mut g = Graph::new(&params);
    let sv = g.constant(s.clone());
    let l = triplet_loss(&mut g, sv, margin)?;
    Ok(g.scalar(l))
}
