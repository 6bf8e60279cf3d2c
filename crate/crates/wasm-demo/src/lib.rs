//! Three small interactive views over the model blocks, compiled to
//! WebAssembly for `www/index.html`. Every export returns a JSON string so the
//! page needs no bindings beyond `JSON.parse`; the same functions run natively
//! in the tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use r2m::fusion::{fm_forward, FmParams};
use r2m::losses::{hardest_negatives, triplet_value};
use r2m::memory::{rm_step, RmParams};
use r2m::numcore::{Graph, ParamStore, Tensor};

const D: usize = 8;

fn err(msg: impl std::fmt::Display) -> String {
    json!({ "error": msg.to_string() }).to_string()
}

fn blocks(seed: u64, heads: usize) -> Result<(ParamStore, FmParams, RmParams, Tensor, Tensor), String> {
    if heads == 0 || D % heads != 0 {
        return Err(format!("heads must divide {D}"));
    }
    let w = D / heads;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let fm = FmParams::register(&mut store, "fm", D, heads, w, w, w as f64, &mut rng).map_err(|e| e.to_string())?;
    let rm = RmParams::register(&mut store, "rm", D, heads, w, w, 1, w as f64, &mut rng).map_err(|e| e.to_string())?;
    let v = Tensor::randn(&[1, D], 1.0, &mut rng);
    let word = Tensor::randn(&[1, D], 1.0, &mut rng);
    Ok((store, fm, rm, v, word))
}

/// Fusion and memory attention for a random model. `sharpness` multiplies the
/// query and key projections, so scores scale by its square.
pub fn attention_json(seed: u64, heads: usize, sharpness: f64) -> Result<Value, String> {
    let (mut store, fm, rm, v, word) = blocks(seed, heads)?;
    let qk = fm
        .heads
        .iter()
        .flat_map(|h| [h.query, h.key])
        .chain(rm.heads.iter().flat_map(|h| [h.query, h.key]));
    for id in qk.collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|x| *x *= sharpness);
    }
    let mut g = Graph::new(&store);
    let (vv, wv) = (g.constant(v), g.constant(word));
    let f = fm_forward(&mut g, vv, wv, &fm).map_err(|e| e.to_string())?;
    let m0 = g.constant(Tensor::zeros(&[1, D]));
    let step = rm_step(&mut g, m0, f.feature, &rm).map_err(|e| e.to_string())?;
    let step = rm_step(&mut g, step.memory, f.feature, &rm).map_err(|e| e.to_string())?;
    Ok(json!({
        "fm": f.attention.heads,
        "fm_scores": f.scores,
        "rm": step.attention.heads,
        "feature": g.value(f.feature).data(),
    }))
}

/// Distance of `M_t` from `M_{t-1}` (copy) and from `tanh(M̃_t)` (overwrite)
/// over `steps` updates with the gate biases pinned.
pub fn gate_curve_json(seed: u64, input_bias: f64, forget_bias: f64, steps: usize) -> Result<Value, String> {
    if !(1..=200).contains(&steps) {
        return Err("steps must be in 1..=200".into());
    }
    let (mut store, _, rm, m_init, f) = blocks(seed, 2)?;
    store.get_mut(rm.input_gate.b).data_mut().fill(input_bias);
    store.get_mut(rm.forget_gate.b).data_mut().fill(forget_bias);
    let mut g = Graph::new(&store);
    let f = g.constant(f);
    let mut m = g.constant(m_init);
    let mut rows = Vec::with_capacity(steps);
    let dist = |a: &[f64], b: &mut dyn Iterator<Item = f64>| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    for t in 1..=steps {
        let s = rm_step(&mut g, m, f, &rm).map_err(|e| e.to_string())?;
        let new = g.value(s.memory).data();
        let copy = dist(new, &mut g.value(m).data().iter().copied());
        let overwrite = dist(new, &mut g.value(s.gain).data().iter().map(|x| x.tanh()));
        let mean = |v| g.value(v).data().iter().sum::<f64>() / D as f64;
        rows.push(json!({
            "t": t,
            "copy_gap": copy,
            "overwrite_gap": overwrite,
            "g_i": mean(s.input_gate),
            "g_f": mean(s.forget_gate),
            "max_abs": g.value(s.memory).max_abs(),
        }));
        m = s.memory;
    }
    Ok(Value::Array(rows))
}

/// Parses one matrix row per line, entries separated by spaces or commas.
pub fn parse_matrix(text: &str) -> Result<Tensor, String> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| format!("row {}: bad number `{t}`", i + 1)))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let t = Tensor::from_rows(&rows).map_err(|e| e.to_string())?;
    if t.rows() != t.cols() {
        return Err(format!("similarity matrix must be square, got {}×{}", t.rows(), t.cols()));
    }
    Ok(t)
}

/// Triplet loss of a similarity matrix with per-anchor hardest negatives and hinge values.
pub fn triplet_json(matrix: &str, margin: f64) -> Result<Value, String> {
    let s = parse_matrix(matrix)?;
    let loss = triplet_value(&s, margin).map_err(|e| e.to_string())?;
    let items: Vec<Value> = (0..s.rows())
        .map(|i| {
            let (ji, jc) = hardest_negatives(&s, i);
            json!({
                "anchor": i,
                "image_negative": ji,
                "caption_negative": jc,
                "image_hinge": (margin - s.get(i, i) + s.get(ji, i)).max(0.0),
                "caption_hinge": (margin - s.get(i, i) + s.get(i, jc)).max(0.0),
            })
        })
        .collect();
    Ok(json!({ "loss": loss, "items": items }))
}

fn finish(r: Result<Value, String>) -> String {
    r.map_or_else(err, |v| v.to_string())
}

#[wasm_bindgen]
pub fn attention(seed: u32, heads: u32, sharpness: f64) -> String {
    finish(attention_json(seed as u64, heads as usize, sharpness))
}

#[wasm_bindgen]
pub fn gate_curve(seed: u32, input_bias: f64, forget_bias: f64, steps: u32) -> String {
    finish(gate_curve_json(seed as u64, input_bias, forget_bias, steps as usize))
}

#[wasm_bindgen]
pub fn triplet(matrix: &str, margin: f64) -> String {
    finish(triplet_json(matrix, margin))
}
