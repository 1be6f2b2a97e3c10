use std::collections::HashMap;

use rand::Rng;

use super::{ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Relu(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Transpose(Var),
    MaskedFill(Var, Vec<bool>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded computation. Nodes are appended in creation order, so the record
/// is topologically sorted by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound_params: HashMap<ParamId, Var>,
}

const LAYER_NORM_EPS: f64 = 1e-6;

fn shape_str(t: &Tensor) -> String {
    format!("{:?}", t.shape())
}

fn require_matrix(t: &Tensor, what: &str) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::Dimension(format!(
            "{what} expects a matrix, got shape {}",
            shape_str(t)
        )));
    }
    Ok(())
}

/// `a[m×k] · b[k×n]`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g[m×n] · bᵀ` where `b` is `k×n`; result `m×k`.
fn mm_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` where `a` is `m×k` and `g` is `m×n`; result `k×n`.
fn mm_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient left by the last [`Graph::backward`], if the node needs one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, op: Op, mut value: Tensor, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        value.requires_grad = rg;
        value.grad = None;
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; whether it receives a gradient follows the tensor's own flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn variable(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = true;
        self.leaf(t)
    }

    /// Binds a stored parameter as a gradient-carrying leaf. Repeated calls
    /// for the same parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound_params.get(&id) {
            return v;
        }
        let mut t = store.get(id).clone();
        t.grad = None;
        let v = self.variable(t);
        self.bound_params.insert(id, v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound_params.iter().map(|(&p, &v)| (p, v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix(ta, "matmul")?;
        require_matrix(tb, "matmul")?;
        if ta.cols() != tb.rows() {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {} × {}",
                shape_str(ta),
                shape_str(tb)
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = mm(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out)?, &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "{what} needs equal shapes: {} vs {}",
                shape_str(ta),
                shape_str(tb)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), t, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Adds the row vector `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        require_matrix(tx, "add_row")?;
        if tb.numel() != tx.cols() {
            return Err(Error::Dimension(format!(
                "add_row bias {} does not match {}",
                shape_str(tb),
                shape_str(tx)
            )));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % c])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(Op::AddRow(x, bias), t, &[x, bias]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), t, &[a, b]))
    }

    /// Elementwise product with constant weights; no gradient flows into the weights.
    pub fn mul_const(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if weights.len() != tx.numel() {
            return Err(Error::Dimension(format!(
                "mul_const weights of length {} for {}",
                weights.len(),
                shape_str(tx)
            )));
        }
        let data = tx.data().iter().zip(&weights).map(|(a, w)| a * w).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(Op::MulConst(x, weights), t, &[x]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * s).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale(x, s), t, &[x])
    }

    /// `max(x, 0)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(Op::Relu(x), t, &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v.ln()).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(Op::Log(x), t, &[x])
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        require_matrix(tx, "softmax_rows")?;
        let c = tx.cols();
        let mut out = vec![0.0; tx.numel()];
        for (src, dst) in tx.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(src, dst);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(Op::SoftmaxRows(x), t, &[x]))
    }

    /// Row-wise `log softmax`, finite even where the softmax underflows.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        require_matrix(tx, "log_softmax_rows")?;
        let c = tx.cols();
        let mut out = vec![0.0; tx.numel()];
        for (src, dst) in tx.data().chunks(c).zip(out.chunks_mut(c)) {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(Op::LogSoftmaxRows(x), t, &[x]))
    }

    /// Per-row normalisation to zero mean and unit variance, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        require_matrix(tx, "layer_norm")?;
        let c = tx.cols();
        if tg.numel() != c || tb.numel() != c {
            return Err(Error::Dimension(format!(
                "layer_norm gain {} / bias {} do not match {}",
                shape_str(tg),
                shape_str(tb),
                shape_str(tx)
            )));
        }
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; tx.rows()];
        let mut out = vec![0.0; tx.numel()];
        for (r, src) in tx.data().chunks(c).enumerate() {
            let mean = src.iter().sum::<f64>() / c as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (src[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            t,
            &[x, gain, bias],
        ))
    }

    /// Selects rows of `x` by index; an embedding lookup when `x` is a table.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        require_matrix(tx, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::Dimension("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= tx.rows()) {
            return Err(Error::Dimension(format!(
                "gather_rows index {bad} out of range for {}",
                shape_str(tx)
            )));
        }
        let c = tx.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(tx.row(i));
        }
        let t = Tensor::matrix(idx.len(), c, out)?;
        Ok(self.push(Op::GatherRows(x, idx.to_vec()), t, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        for &p in parts {
            require_matrix(self.value(p), "concat_cols")?;
            if self.value(p).rows() != rows {
                return Err(Error::Dimension(format!(
                    "concat_cols row mismatch: {} vs {}",
                    shape_str(self.value(*first)),
                    shape_str(self.value(p))
                )));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, out)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), t, parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        require_matrix(tx, "slice_cols")?;
        if len == 0 || start + len > tx.cols() {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} out of range for {}",
                start + len,
                shape_str(tx)
            )));
        }
        let mut out = Vec::with_capacity(tx.rows() * len);
        for r in 0..tx.rows() {
            out.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let t = Tensor::matrix(tx.rows(), len, out)?;
        Ok(self.push(Op::SliceCols(x, start), t, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            require_matrix(tp, "concat_rows")?;
            if tp.cols() != cols {
                return Err(Error::Dimension(format!(
                    "concat_rows column mismatch: {} vs {}",
                    shape_str(self.value(*first)),
                    shape_str(tp)
                )));
            }
            rows += tp.rows();
            out.extend_from_slice(tp.data());
        }
        let t = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), t, parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        require_matrix(tx, "slice_rows")?;
        if len == 0 || start + len > tx.rows() {
            return Err(Error::Dimension(format!(
                "slice_rows {start}..{} out of range for {}",
                start + len,
                shape_str(tx)
            )));
        }
        let c = tx.cols();
        let out = tx.data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::matrix(len, c, out)?;
        Ok(self.push(Op::SliceRows(x, start), t, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        require_matrix(tx, "transpose")?;
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = tx.data()[i * c + j];
            }
        }
        let t = Tensor::matrix(c, r, out)?;
        Ok(self.push(Op::Transpose(x), t, &[x]))
    }

    /// Replaces entries where `mask` is true by `value`; those entries pass no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: Vec<bool>, value: f64) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.numel() {
            return Err(Error::Dimension(format!(
                "mask of length {} for {}",
                mask.len(),
                shape_str(tx)
            )));
        }
        let data = tx
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(Op::MaskedFill(x, mask), t, &[x]))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    /// Inverted dropout with an explicit RNG; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Contract(format!("dropout probability {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    /// Reverse pass from a scalar. Every node that requires a gradient ends up
    /// holding `d(loss)/d(node)`; contributions from several consumers add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let tl = self.value(loss);
        if !tl.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(tl)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = if node.value.requires_grad() {
                Some(g.unwrap_or_else(|| vec![0.0; node.value.numel()]))
            } else {
                None
            };
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].value.requires_grad() {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            contrib(slot);
        };
        let y = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &|g| {
                    for (o, d) in g.iter_mut().zip(mm_bt(gy, tb.data(), m, k, n)) {
                        *o += d;
                    }
                });
                acc(*b, &|g| {
                    for (o, d) in g.iter_mut().zip(mm_at(ta.data(), gy, m, k, n)) {
                        *o += d;
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &|g| {
                        for (o, d) in g.iter_mut().zip(gy) {
                            *o += d;
                        }
                    });
                }
            }
            Op::AddRow(x, bias) => {
                let c = val(*x).cols();
                acc(*x, &|g| {
                    for (o, d) in g.iter_mut().zip(gy) {
                        *o += d;
                    }
                });
                acc(*bias, &|g| {
                    for (j, d) in gy.iter().enumerate() {
                        g[j % c] += d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &|g| {
                    for ((o, d), w) in g.iter_mut().zip(gy).zip(tb.data()) {
                        *o += d * w;
                    }
                });
                acc(*b, &|g| {
                    for ((o, d), w) in g.iter_mut().zip(gy).zip(ta.data()) {
                        *o += d * w;
                    }
                });
            }
            Op::MulConst(x, w) => acc(*x, &|g| {
                for ((o, d), w) in g.iter_mut().zip(gy).zip(w) {
                    *o += d * w;
                }
            }),
            Op::Scale(x, s) => acc(*x, &|g| {
                for (o, d) in g.iter_mut().zip(gy) {
                    *o += d * s;
                }
            }),
            Op::Relu(x) => {
                let tx = val(*x);
                acc(*x, &|g| {
                    for ((o, d), &v) in g.iter_mut().zip(gy).zip(tx.data()) {
                        if v > 0.0 {
                            *o += d;
                        }
                    }
                });
            }
            Op::Log(x) => {
                let tx = val(*x);
                acc(*x, &|g| {
                    for ((o, d), &v) in g.iter_mut().zip(gy).zip(tx.data()) {
                        *o += d / v;
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let c = y.cols();
                acc(*x, &|g| {
                    for ((o, d), p) in g.chunks_mut(c).zip(gy.chunks(c)).zip(y.data().chunks(c)) {
                        let dot: f64 = d.iter().zip(p).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            o[j] += p[j] * (d[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let c = y.cols();
                acc(*x, &|g| {
                    for ((o, d), ly) in g.chunks_mut(c).zip(gy.chunks(c)).zip(y.data().chunks(c)) {
                        let total: f64 = d.iter().sum();
                        for j in 0..c {
                            o[j] += d[j] - ly[j].exp() * total;
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
                let c = y.cols();
                let tg = val(*gain);
                acc(*x, &|g| {
                    for r in 0..inv_std.len() {
                        let d = &gy[r * c..(r + 1) * c];
                        let h = &xhat[r * c..(r + 1) * c];
                        let dh: Vec<f64> = d.iter().zip(tg.data()).map(|(a, b)| a * b).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / c as f64;
                        for j in 0..c {
                            g[r * c + j] += k * (c as f64 * dh[j] - s1 - h[j] * s2);
                        }
                    }
                });
                acc(*gain, &|g| {
                    for (j, (d, h)) in gy.iter().zip(xhat).enumerate() {
                        g[j % c] += d * h;
                    }
                });
                acc(*bias, &|g| {
                    for (j, d) in gy.iter().enumerate() {
                        g[j % c] += d;
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let c = y.cols();
                acc(*x, &|g| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            g[src * c + j] += gy[r * c + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &|g| {
                        for r in 0..y.rows() {
                            for j in 0..w {
                                g[r * w + j] += gy[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let c = val(*x).cols();
                let w = y.cols();
                acc(*x, &|g| {
                    for r in 0..y.rows() {
                        for j in 0..w {
                            g[r * c + start + j] += gy[r * w + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    acc(p, &|g| {
                        for (o, d) in g.iter_mut().zip(&gy[offset..offset + n]) {
                            *o += d;
                        }
                    });
                    offset += n;
                }
            }
            Op::SliceRows(x, start) => {
                let off = start * y.cols();
                acc(*x, &|g| {
                    for (o, d) in g[off..off + gy.len()].iter_mut().zip(gy) {
                        *o += d;
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                acc(*x, &|g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gy[j * r + i];
                        }
                    }
                });
            }
            Op::MaskedFill(x, mask) => acc(*x, &|g| {
                for ((o, d), &m) in g.iter_mut().zip(gy).zip(mask) {
                    if !m {
                        *o += d;
                    }
                }
            }),
            Op::Sum(x) => acc(*x, &|g| {
                for o in g.iter_mut() {
                    *o += gy[0];
                }
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::identity(2));
        let b = g.constant(Tensor::identity(2));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &Tensor::identity(2));

        let x = g.constant(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let y = g.matmul(x, a).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] × [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_rows_examples() {
        let mut g = Graph::new();
        let x = g.constant(m(&[vec![0.0; 4]]));
        let p = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(p).data(), &[0.25; 4]);

        let x = g.constant(m(&[vec![1000.0, 0.0]]));
        let p = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(p).data()[0], 1.0);
        assert!(g.value(p).data()[1] < 1e-300);
        assert!(g.value(p).is_finite());

        // exp(k) / (e + e² + e³) evaluated at high precision.
        let x = g.constant(m(&[vec![1.0, 2.0, 3.0]]));
        let p = g.softmax_rows(x).unwrap();
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        for (a, b) in g.value(p).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[3, 2]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn relu_gradient_at_negative_and_positive() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![1], vec![0.0]).unwrap());
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2, 2]));
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn shared_input_accumulates_both_paths() {
        // loss = sum(x ⊙ x) + sum(3x)  →  dloss/dx = 2x + 3
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let tri = g.scale(x, 3.0);
        let a = g.sum(sq);
        let b = g.sum(tri);
        let loss = g.add(a, b).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0, -1.0, 4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::zeros(&[2]));
        let x = g.variable(Tensor::zeros(&[2]));
        let y = g.add(c, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.masked_fill(x, vec![false, true, false], -1e9).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -1e9, 3.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2, 2]));
        let mut rng = rand::rng();
        assert_eq!(g.dropout(x, 0.0, &mut rng).unwrap(), x);
    }
}
