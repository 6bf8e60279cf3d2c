//! Recurrent memory unit.
//!
//! One step maps `(M_{t-1}, f_t)` to `M_t`:
//!
//! 1. memory-guided attention: queries from `M_{t-1}`, keys and values from
//!    the stack `[M_{t-1}; f_t]`, one softmax per head scaled by `1/√λ₂`;
//! 2. module ψ: `h = LN₁(M' + M_{t-1})`, `M̃ = LN₂(h + MLP(h))`;
//! 3. relational gate: `M_t = g_i ⊙ tanh(M̃) + g_f ⊙ M_{t-1}` with
//!    `g = σ(f_t·W + tanh(M_{t-1})·U + b)` for the input and forget gates.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct RmHead {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Row-wise MLP with two layer norms (module ψ).
#[derive(Clone, Copy, Debug)]
pub struct PsiParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct GatePair {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct RmParams {
    pub heads: Vec<RmHead>,
    pub psi: PsiParams,
    pub input_gate: GatePair,
    pub forget_gate: GatePair,
    pub lambda: f64,
    pub d: usize,
    pub rows: usize,
}

impl RmParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        d_key: usize,
        d_val: usize,
        rows: usize,
        lambda: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads * d_val != d {
            return Err(Error::contract(format!(
                "heads·d_V must equal d ({heads}·{d_val} != {d})"
            )));
        }
        if !(lambda > 0.0) {
            return Err(Error::contract(format!("memory scale must be positive, got {lambda}")));
        }
        let std = 1.0 / (d as f64).sqrt();
        let mut mat = |name: String, r: usize, c: usize| store.add(name, Tensor::randn(&[r, c], std, rng));
        let heads = (0..heads)
            .map(|h| RmHead {
                query: mat(format!("{prefix}.h{h}.w_q"), d, d_key),
                key: mat(format!("{prefix}.h{h}.w_k"), d, d_key),
                value: mat(format!("{prefix}.h{h}.w_v"), d, d_val),
            })
            .collect();
        let w1 = mat(format!("{prefix}.psi.w1"), d, d);
        let w2 = mat(format!("{prefix}.psi.w2"), d, d);
        let wi = mat(format!("{prefix}.gate.w_i"), d, d);
        let ui = mat(format!("{prefix}.gate.u_i"), d, d);
        let wf = mat(format!("{prefix}.gate.w_f"), d, d);
        let uf = mat(format!("{prefix}.gate.u_f"), d, d);
        let mut vec = |name: String, v: f64| store.add(name, Tensor::filled(&[1, d], v));
        let psi = PsiParams {
            w1,
            b1: vec(format!("{prefix}.psi.b1"), 0.0),
            w2,
            b2: vec(format!("{prefix}.psi.b2"), 0.0),
            ln1_gain: vec(format!("{prefix}.psi.ln1_gain"), 1.0),
            ln1_bias: vec(format!("{prefix}.psi.ln1_bias"), 0.0),
            ln2_gain: vec(format!("{prefix}.psi.ln2_gain"), 1.0),
            ln2_bias: vec(format!("{prefix}.psi.ln2_bias"), 0.0),
        };
        let input_gate = GatePair {
            w: wi,
            u: ui,
            b: vec(format!("{prefix}.gate.b_i"), 0.0),
        };
        let forget_gate = GatePair {
            w: wf,
            u: uf,
            b: vec(format!("{prefix}.gate.b_f"), 0.0),
        };
        Ok(Self {
            heads,
            psi,
            input_gate,
            forget_gate,
            lambda,
            d,
            rows,
        })
    }
}

/// Per-head attention of each memory row over `[memory rows..., f_t]`.
/// With one memory row each head holds `[M→M, f→M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmAttention {
    pub heads: Vec<Vec<f64>>,
}

pub struct RmStep {
    pub memory: Var,
    pub attended: Var,
    pub gain: Var,
    pub input_gate: Var,
    pub forget_gate: Var,
    pub attention: RmAttention,
}

fn check_inputs(g: &Graph, m_prev: Var, f: Var, p: &RmParams) -> Result<()> {
    let (r, c) = g.shape(m_prev);
    let fs = g.shape(f);
    if c != p.d || r != p.rows || fs != (1, p.d) {
        return Err(Error::dim("rm_step", &[r, c], &[fs.0, fs.1]));
    }
    Ok(())
}

/// Memory-guided multi-head attention, giving `M'` with the memory's shape.
pub fn rm_attend(g: &mut Graph, m_prev: Var, f: Var, p: &RmParams) -> Result<(Var, RmAttention)> {
    check_inputs(g, m_prev, f, p)?;
    let kv = g.concat_rows(&[m_prev, f])?;
    let inv_sqrt = 1.0 / p.lambda.sqrt();
    let mut outs = Vec::with_capacity(p.heads.len());
    let mut att = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        let (wq, wk, wv) = (g.param(head.query), g.param(head.key), g.param(head.value));
        let q = g.matmul(m_prev, wq)?;
        let k = g.matmul(kv, wk)?;
        let logits = g.matmul_t(q, k)?;
        let logits = g.scale(logits, inv_sqrt);
        let a = g.softmax_rows(logits)?;
        att.push(g.value(a).data().to_vec());
        let values = g.matmul(kv, wv)?;
        outs.push(g.matmul(a, values)?);
    }
    let out = g.concat_cols(&outs)?;
    Ok((out, RmAttention { heads: att }))
}

fn linear_rows(g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let (w, b) = (g.param(w), g.param(b));
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// Module ψ: residual + LN, row-wise tanh MLP, residual + LN.
pub fn psi(g: &mut Graph, attended: Var, m_prev: Var, p: &RmParams) -> Result<Var> {
    let ps = &p.psi;
    let res = g.add(attended, m_prev)?;
    let (g1, b1) = (g.param(ps.ln1_gain), g.param(ps.ln1_bias));
    let h = g.layer_norm(res, g1, b1, LN_EPS)?;
    let hidden = linear_rows(g, h, ps.w1, ps.b1)?;
    let hidden = g.tanh(hidden);
    let mlp = linear_rows(g, hidden, ps.w2, ps.b2)?;
    let res2 = g.add(h, mlp)?;
    let (g2, b2) = (g.param(ps.ln2_gain), g.param(ps.ln2_bias));
    g.layer_norm(res2, g2, b2, LN_EPS)
}

fn gate(g: &mut Graph, f: Var, tanh_m: Var, pair: &GatePair) -> Result<Var> {
    let (w, u, b) = (g.param(pair.w), g.param(pair.u), g.param(pair.b));
    let fw = g.matmul(f, w)?;
    let mu = g.matmul(tanh_m, u)?;
    let s = g.add_row(mu, fw)?;
    let s = g.add_row(s, b)?;
    Ok(g.sigmoid(s))
}

/// Relational gate, returning `(M_t, g_i, g_f)`.
pub fn relational_gate(g: &mut Graph, f: Var, m_prev: Var, gain: Var, p: &RmParams) -> Result<(Var, Var, Var)> {
    let tanh_m = g.tanh(m_prev);
    let gi = gate(g, f, tanh_m, &p.input_gate)?;
    let gf = gate(g, f, tanh_m, &p.forget_gate)?;
    let tg = g.tanh(gain);
    let write = g.mul(gi, tg)?;
    let keep = g.mul(gf, m_prev)?;
    let m = g.add(write, keep)?;
    Ok((m, gi, gf))
}

pub fn rm_step(g: &mut Graph, m_prev: Var, f: Var, p: &RmParams) -> Result<RmStep> {
    let (attended, attention) = rm_attend(g, m_prev, f, p)?;
    let gain = psi(g, attended, m_prev, p)?;
    let (memory, input_gate, forget_gate) = relational_gate(g, f, m_prev, gain, p)?;
    Ok(RmStep {
        memory,
        attended,
        gain,
        input_gate,
        forget_gate,
        attention,
    })
}
