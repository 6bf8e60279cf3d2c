//! Fusion memory: multi-head self-attention over the stacked concept vector
//! and previous word embedding, flattened through a linear layer into the
//! fusion-aware feature `f_t`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct FmHead {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Clone, Debug)]
pub struct FmParams {
    pub heads: Vec<FmHead>,
    /// `(2·H·d_v) × d`
    pub fc_w: ParamId,
    /// `1 × d`
    pub fc_b: ParamId,
    pub lambda: f64,
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl FmParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        d_k: usize,
        d_v: usize,
        lambda: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::contract(format!("fusion scale must be positive, got {lambda}")));
        }
        let std = 1.0 / (d as f64).sqrt();
        let heads = (0..heads)
            .map(|h| FmHead {
                query: store.add(format!("{prefix}.h{h}.u_q"), Tensor::randn(&[d, d_k], std, rng)),
                key: store.add(format!("{prefix}.h{h}.u_k"), Tensor::randn(&[d, d_k], std, rng)),
                value: store.add(format!("{prefix}.h{h}.u_v"), Tensor::randn(&[d, d_v], std, rng)),
            })
            .collect::<Vec<_>>();
        let fan_in = 2 * heads.len() * d_v;
        Ok(Self {
            fc_w: store.add(
                format!("{prefix}.fc_w"),
                Tensor::randn(&[fan_in, d], 1.0 / (fan_in as f64).sqrt(), rng),
            ),
            fc_b: store.add(format!("{prefix}.fc_b"), Tensor::zeros(&[1, d])),
            heads,
            lambda,
            d,
            d_k,
            d_v,
        })
    }
}

/// Per-head `2×2` attention, row-major: `[v→v, w→v, v→w, w→w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FmAttention {
    pub heads: Vec<[f64; 4]>,
}

pub struct FmOutput {
    /// Fusion-aware feature, `1×d`.
    pub feature: Var,
    /// Column-concatenated head outputs, `2 × (H·d_v)`.
    pub fused: Var,
    pub attention: FmAttention,
    /// Scaled pre-softmax scores per head, same layout as the attention.
    pub scores: Vec<[f64; 4]>,
}

fn four(t: &Tensor) -> [f64; 4] {
    let d = t.data();
    [d[0], d[1], d[2], d[3]]
}

pub fn fm_forward(g: &mut Graph, v: Var, w_prev: Var, p: &FmParams) -> Result<FmOutput> {
    if g.shape(v) != (1, p.d) || g.shape(w_prev) != (1, p.d) {
        let (a, b) = (g.shape(v), g.shape(w_prev));
        return Err(Error::dim("fm_forward", &[a.0, a.1], &[b.0, b.1]));
    }
    let x = g.concat_rows(&[v, w_prev])?;
    let inv_sqrt = 1.0 / p.lambda.sqrt();
    let mut outs = Vec::with_capacity(p.heads.len());
    let mut attention = Vec::with_capacity(p.heads.len());
    let mut scores = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        let (uq, uk, uv) = (g.param(head.query), g.param(head.key), g.param(head.value));
        let q = g.matmul(x, uq)?;
        let k = g.matmul(x, uk)?;
        let logits = g.matmul_t(q, k)?;
        let logits = g.scale(logits, inv_sqrt);
        scores.push(four(g.value(logits)));
        let a = g.softmax_rows(logits)?;
        attention.push(four(g.value(a)));
        let values = g.matmul(x, uv)?;
        outs.push(g.matmul(a, values)?);
    }
    let fused = g.concat_cols(&outs)?;
    let width = 2 * p.heads.len() * p.d_v;
    let flat = g.reshape(fused, 1, width)?;
    let (w, b) = (g.param(p.fc_w), g.param(p.fc_b));
    let lin = g.matmul(flat, w)?;
    let feature = g.add(lin, b)?;
    Ok(FmOutput {
        feature,
        fused,
        attention: FmAttention { heads: attention },
        scores,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn setup(heads: usize, seed: u64) -> (ParamStore, FmParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let p = FmParams::register(&mut s, "fm", 8, heads, 4, 4, 4.0, &mut rng).unwrap();
        (s, p)
    }

    fn row(seed: u64) -> Tensor {
        Tensor::randn(&[1, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let (mut s, p) = setup(2, 1);
        for h in &p.heads {
            s.get_mut(h.query).data_mut().fill(0.0);
            s.get_mut(h.key).data_mut().fill(0.0);
        }
        let mut g = Graph::new(&s);
        let v = g.constant(row(2));
        let w = g.constant(row(3));
        let out = fm_forward(&mut g, v, w, &p).unwrap();
        for a in &out.attention.heads {
            assert_eq!(a, &[0.5; 4]);
        }
    }

    #[test]
    fn identical_inputs_give_identical_rows() {
        let (s, p) = setup(2, 4);
        let mut g = Graph::new(&s);
        let v = g.constant(row(9));
        let out = fm_forward(&mut g, v, v, &p).unwrap();
        let fused = g.value(out.fused);
        assert_eq!(fused.row_slice(0), fused.row_slice(1));
    }

    #[test]
    fn shapes_propagate() {
        let (s, p) = setup(2, 4);
        let mut g = Graph::new(&s);
        let v = g.constant(row(1));
        let w = g.constant(row(2));
        let out = fm_forward(&mut g, v, w, &p).unwrap();
        assert_eq!(g.shape(out.fused), (2, 8));
        assert_eq!(g.shape(out.feature), (1, 8));
    }

    #[test]
    fn rejects_bad_scale_and_width() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(FmParams::register(&mut s, "x", 8, 1, 4, 4, 0.0, &mut rng).is_err());
        let (s, p) = setup(1, 0);
        let mut g = Graph::new(&s);
        let v = g.constant(Tensor::zeros(&[1, 7]));
        assert!(matches!(fm_forward(&mut g, v, v, &p), Err(Error::Dimension { .. })));
    }

    #[test]
    fn scaling_query_and_key_scales_scores_by_square() {
        let (s, p) = setup(2, 8);
        let c = 1.7;
        let mut scaled = s.clone();
        for h in &p.heads {
            for id in [h.query, h.key] {
                scaled.get_mut(id).data_mut().iter_mut().for_each(|x| *x *= c);
            }
        }
        let run = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let v = g.constant(row(5));
            let w = g.constant(row(6));
            fm_forward(&mut g, v, w, &p).unwrap().scores
        };
        for (a, b) in run(&s).iter().zip(run(&scaled)) {
            for k in 0..4 {
                assert!((a[k] * c * c - b[k]).abs() < 1e-12 * (1.0 + b[k].abs()));
            }
        }
    }
}
