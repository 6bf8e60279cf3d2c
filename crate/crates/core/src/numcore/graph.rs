//! Tape-style reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] records every operation as a node appended in evaluation
//! order, so the node list is already topologically sorted. [`Graph::backward`]
//! walks it once in reverse and returns the gradient of each parameter leaf
//! that was touched.

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Pick {
        x: Var,
        flat: Vec<usize>,
    },
    NormalizeRows(Var),
    Sum(Var),
    Mean(Var),
    SumSq(Var),
    NegLogSoftmax {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradient of a scalar loss with respect to each parameter reached by the graph.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Global L2 norm over every gradient entry.
    pub fn norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    backward_done: bool,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            backward_done: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.shape();
        (s[0], s[1])
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Leaf holding a constant; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = if t.shape().len() == 1 {
            Tensor::row(t.into_data())
        } else {
            t
        };
        self.push(t, Op::Const)
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = self.params.get(id);
        let t = if t.shape().len() == 1 {
            Tensor::row(t.data().to_vec())
        } else {
            t.clone()
        };
        let v = self.push(t, Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            let (sa, sb) = (self.shape(a), self.shape(b));
            return Err(Error::dim(op, &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds the `1×n` row `row` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let (r, n2) = self.shape(row);
        if r != 1 || n != n2 {
            return Err(Error::dim("add_row", &[m, n], &[r, n2]));
        }
        let bias = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|xr| xr.iter().zip(bias).map(|(a, b)| a + b))
            .collect();
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| c * x);
        self.push(t, Op::Scale(a, c))
    }

    /// Adds the constant `c` to every entry.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x + c);
        self.push(t, Op::Shift(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose().expect("rank 2");
        self.push(t, Op::Transpose(a))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let bt = self.transpose(b);
        self.matmul(a, bt)
    }

    /// Stacks inputs vertically; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(Error::dim("concat_rows", &[rows, cols], &[r, c]));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(parts.to_vec())))
    }

    /// Places inputs side by side; all must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::dim("concat_cols", &[rows, cols], &[r, c]));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a).clone().reshape(vec![rows, cols])?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric {
                op: "softmax_rows",
                detail: "NaN input".into(),
            });
        }
        let (m, n) = self.shape(a);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            out.extend(softmax(va.row_slice(r)));
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::SoftmaxRows(a)))
    }

    /// Row-wise layer normalisation followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.shape(x);
        if n == 0 {
            return Err(Error::dim("layer_norm", &[m, n], &[1]));
        }
        if self.shape(gain) != (1, n) || self.shape(bias) != (1, n) {
            let g = self.shape(gain);
            return Err(Error::dim("layer_norm", &[m, n], &[g.0, g.1]));
        }
        let vx = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in vx.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    /// `max(0, x)` elementwise.
    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    /// Selects rows of `table`, in order, into a new `rows.len() × cols` matrix.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(table);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Vocabulary(format!("row {r} out of range for {m} rows")));
            }
            data.extend_from_slice(self.value(table).row_slice(r));
        }
        let t = Tensor::matrix(rows.len(), n, data)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Gathers individual `(row, col)` entries into a `1×k` row.
    pub fn pick(&mut self, x: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.shape(x);
        let mut flat = Vec::with_capacity(entries.len());
        for &(r, c) in entries {
            if r >= m || c >= n {
                return Err(Error::dim("pick", &[m, n], &[r, c]));
            }
            flat.push(r * n + c);
        }
        let vx = self.value(x).data();
        let t = Tensor::row(flat.iter().map(|&i| vx[i]).collect());
        Ok(self.push(t, Op::Pick { x, flat }))
    }

    /// Scales each row to unit L2 norm (rows of zeros stay zero).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let va = self.value(a);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = va.row_slice(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            out.extend(row.iter().map(|x| x / norm));
        }
        let t = Tensor::matrix(m, n, out).expect("same shape");
        self.push(t, Op::NormalizeRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Squared L2 norm of all entries.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(s), Op::SumSq(a))
    }

    /// `−log softmax(logits)[target]` for a `1×V` logit row.
    pub fn neg_log_softmax(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (r, n) = self.shape(logits);
        if r != 1 {
            return Err(Error::dim("neg_log_softmax", &[r, n], &[1, n]));
        }
        if target >= n {
            return Err(Error::Vocabulary(format!("target {target} outside {n} logits")));
        }
        let row = self.value(logits).data();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - row[target];
        if !loss.is_finite() {
            return Err(Error::Numeric {
                op: "neg_log_softmax",
                detail: format!("non-finite loss {loss}"),
            });
        }
        let probs = row.iter().map(|x| (x - lse).exp()).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::NegLogSoftmax {
                logits,
                target,
                probs,
            },
        ))
    }

    /// Reverse pass from a `1×1` node. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::contract("backward already ran on this graph"));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::contract(format!(
                "backward seed must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients {
            grads: vec![None; self.params.len()],
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let nodes = &self.nodes;
            let val = |v: Var| nodes[v.0].value.data();
            let size = |v: Var| nodes[v.0].value.len();
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; size(v)]);
                f(buf);
            };
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    let shape = self.params.get(*id).shape().to_vec();
                    out.grads[id.0] = Some(Tensor::new(shape, g)?);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).1;
                    acc(*a, &mut |ga| matmul_nt_into(&g, val(*b), ga, m, n, k));
                    acc(*b, &mut |gb| matmul_tn_into(val(*a), &g, gb, m, k, n));
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |ga| add_into(ga, &g));
                    acc(*b, &mut |gb| add_into(gb, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |ga| add_into(ga, &g));
                    acc(*b, &mut |gb| gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * vb[i];
                        }
                    });
                    acc(*b, &mut |gb| {
                        for i in 0..gb.len() {
                            gb[i] += g[i] * va[i];
                        }
                    });
                }
                Op::AddRow(x, row) => {
                    let n = self.shape(*row).1;
                    acc(*x, &mut |gx| add_into(gx, &g));
                    acc(*row, &mut |gr| {
                        for chunk in g.chunks(n) {
                            add_into(gr, chunk);
                        }
                    });
                }
                Op::Scale(a, c) => acc(*a, &mut |ga| {
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y)
                }),
                Op::Shift(a) | Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, &g)),
                Op::Transpose(a) => {
                    let (r, c) = self.shape(*a);
                    acc(*a, &mut |ga| {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = size(p);
                        acc(p, &mut |gp| add_into(gp, &g[off..off + len]));
                        off += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = (node.value.rows(), node.value.cols());
                    let mut col_off = 0;
                    for &p in parts {
                        let c = self.shape(p).1;
                        acc(p, &mut |gp| {
                            for i in 0..rows {
                                let src = &g[i * total + col_off..i * total + col_off + c];
                                add_into(&mut gp[i * c..(i + 1) * c], src);
                            }
                        });
                        col_off += c;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.data();
                    let n = node.value.cols();
                    acc(*a, &mut |ga| {
                        for ((gr, yr), gar) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                gar[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let n = node.value.cols();
                    let gv = val(*gain);
                    acc(*gain, &mut |gg| {
                        for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                gg[j] += gr[j] * hr[j];
                            }
                        }
                    });
                    acc(*bias, &mut |gb| {
                        for gr in g.chunks(n) {
                            add_into(gb, gr);
                        }
                    });
                    acc(*x, &mut |gx| {
                        for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                            let dh: Vec<f64> = (0..n).map(|j| gr[j] * gv[j]).collect();
                            let sum_dh: f64 = dh.iter().sum();
                            let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                            let k = inv_std[r] / n as f64;
                            for j in 0..n {
                                gx[r * n + j] += k * (n as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                            }
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * (1.0 - y[i] * y[i]);
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    });
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            if x[i] > 0.0 {
                                ga[i] += g[i];
                            }
                        }
                    });
                }
                Op::Gather { table, rows } => {
                    let n = self.shape(*table).1;
                    acc(*table, &mut |gt| {
                        for (k, &r) in rows.iter().enumerate() {
                            add_into(&mut gt[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                        }
                    });
                }
                Op::Pick { x, flat } => acc(*x, &mut |gx| {
                    for (k, &i) in flat.iter().enumerate() {
                        gx[i] += g[k];
                    }
                }),
                Op::NormalizeRows(a) => {
                    let n = node.value.cols();
                    let y = node.value.data();
                    let x = val(*a);
                    acc(*a, &mut |ga| {
                        for r in 0..ga.len() / n {
                            let xs = &x[r * n..(r + 1) * n];
                            let norm = xs.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                            let ys = &y[r * n..(r + 1) * n];
                            let gs = &g[r * n..(r + 1) * n];
                            let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                ga[r * n + j] += (gs[j] - ys[j] * dot) / norm;
                            }
                        }
                    });
                }
                Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
                Op::Mean(a) => {
                    let k = g[0] / size(*a) as f64;
                    acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += k));
                }
                Op::SumSq(a) => {
                    let x = val(*a);
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += 2.0 * g[0] * x[i];
                        }
                    });
                }
                Op::NegLogSoftmax {
                    logits,
                    target,
                    probs,
                } => acc(*logits, &mut |gl| {
                    for (j, p) in probs.iter().enumerate() {
                        let y = if j == *target { 1.0 } else { 0.0 };
                        gl[j] += g[0] * (p - y);
                    }
                }),
            }
        }
        Ok(out)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `log softmax(row)` computed via log-sum-exp.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values.iter().map(|(n, t)| s.add(*n, t.clone())).collect();
        (s, ids)
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let params = ParamStore::new();
        let mut g = Graph::new(&params);
        let a = g.constant(Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap());
        let i = g.constant(Tensor::identity(2));
        let p = g.matmul(a, i).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

        let r = g.constant(Tensor::row(vec![1., 0.]));
        let c = g.constant(Tensor::from_rows(&[vec![0.], vec![5.]]).unwrap());
        let o = g.matmul(r, c).unwrap();
        assert_eq!(g.value(o).data(), &[0.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let params = ParamStore::new();
        let mut g = Graph::new(&params);
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let p = g.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((g.value(p).get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let params = ParamStore::new();
        let mut g = Graph::new(&params);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let params = ParamStore::new();
        let mut g = Graph::new(&params);
        let x = g.constant(
            Tensor::from_rows(&[vec![0., 0.], vec![2f64.ln(), 0.], vec![1000., 0.]]).unwrap(),
        );
        let s = g.softmax_rows(x).unwrap();
        let v = g.value(s);
        assert_relative_eq!(v.get(0, 0), 0.5);
        assert_relative_eq!(v.get(1, 0), 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(v.get(1, 1), 1.0 / 3.0, epsilon = 1e-12);
        assert_eq!(v.get(2, 0), 1.0);
        assert!(v.get(2, 1) < 1e-300);
        assert!(v.is_finite());
    }

    #[test]
    fn softmax_rejects_nan() {
        let params = ParamStore::new();
        let mut g = Graph::new(&params);
        let x = g.constant(Tensor::row(vec![f64::NAN, 0.]));
        assert!(matches!(g.softmax_rows(x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let params = ParamStore::new();
        let mut g = Graph::new(&params);
        let one = g.constant(Tensor::row(vec![1., 1.]));
        let zero = g.constant(Tensor::row(vec![0., 0.]));
        let x = g.constant(Tensor::row(vec![1., -1.]));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        assert_relative_eq!(g.value(y).data()[0], 1.0, epsilon = 1e-5);
        assert_relative_eq!(g.value(y).data()[1], -1.0, epsilon = 1e-5);

        let c = g.constant(Tensor::row(vec![5., 5.]));
        let y = g.layer_norm(c, one, zero, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0., 0.]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g9 = g.constant(Tensor::filled(&[1, 9], 1.0));
        let b9 = g.constant(Tensor::zeros(&[1, 9]));
        let r = g.constant(Tensor::randn(&[1, 9], 3.0, &mut rng).reshape(vec![1, 9]).unwrap());
        let y = g.layer_norm(r, g9, b9, 1e-5).unwrap();
        let d = g.value(y).data();
        let mean = d.iter().sum::<f64>() / 9.0;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 9.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_gain_width_mismatch() {
        let params = ParamStore::new();
        let mut g = Graph::new(&params);
        let x = g.constant(Tensor::row(vec![1., 2., 3.]));
        let gain = g.constant(Tensor::row(vec![1., 1.]));
        assert!(matches!(
            g.layer_norm(x, gain, gain, 1e-5),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn backward_square_and_product() {
        let (s, ids) = store_with(&[("x", Tensor::scalar(3.0)), ("y", Tensor::scalar(5.0))]);
        let mut g = Graph::new(&s);
        let x = g.param(ids[0]);
        let sq = g.mul(x, x).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap().data(), &[6.0]);

        let (s, ids) = store_with(&[("x", Tensor::scalar(2.0)), ("y", Tensor::scalar(5.0))]);
        let mut g = Graph::new(&s);
        let (x, y) = (g.param(ids[0]), g.param(ids[1]));
        let p = g.mul(x, y).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap().data(), &[5.0]);
        assert_eq!(grads.get(ids[1]).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let (s, ids) = store_with(&[("x", Tensor::scalar(3.0))]);
        let mut g = Graph::new(&s);
        let x = g.param(ids[0]);
        let y = g.sum_sq(x);
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_seed() {
        let (s, ids) = store_with(&[("x", Tensor::row(vec![1., 2.]))]);
        let mut g = Graph::new(&s);
        let x = g.param(ids[0]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn pick_and_gather_route_gradients() {
        let (s, ids) = store_with(&[("t", Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap())]);
        let mut g = Graph::new(&s);
        let t = g.param(ids[0]);
        let rows = g.gather_rows(t, &[1, 1, 0]).unwrap();
        let picked = g.pick(t, &[(0, 1)]).unwrap();
        let a = g.sum(rows);
        let b = g.sum(picked);
        let l = g.add(a, b).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap().data(), &[1., 2., 2., 2.]);
    }
}
