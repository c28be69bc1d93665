//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every operation eagerly.
//! Calling [`Graph::backward`] on a scalar (`1 × 1`) node walks the tape in
//! reverse and returns the adjoint of every parameter block that took part.
//! The same graph type is used for inference; it is simply never
//! differentiated there.

use std::collections::HashMap;

use crate::tensor::Mat;
use crate::{Error, Result};

/// Index of a parameter block inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamBlock {
    pub name: String,
    pub value: Mat,
}

/// Registry of every trainable block. Order of registration is the order
/// used by checkpoints and gradient vectors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new block. Names must be unique.
    pub fn register(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(self.blocks.iter().all(|b| b.name != name), "duplicate parameter block {name}");
        self.blocks.push(ParamBlock { name, value });
        ParamId(self.blocks.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.blocks[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.blocks[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.blocks[id.0].name
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.blocks.len()).map(ParamId)
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.blocks.iter().position(|b| b.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.value.is_finite())
    }
}

/// Per-block gradient accumulators aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    blocks: Vec<Mat>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { blocks: store.blocks.iter().map(|b| Mat::zeros(b.value.rows(), b.value.cols())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.blocks[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.blocks[id.0]
    }

    pub fn blocks(&self) -> &[Mat] {
        &self.blocks
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.add_assign(b);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.blocks.iter().map(|b| b.dot(b)).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for b in &mut self.blocks {
            b.scale_assign(c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(Mat::is_finite)
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Gather { src: Var, rows: Vec<usize> },
    Override { base: Var, rows: Vec<(usize, Var)> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddN(Vec<Var>),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Mat, inv_std: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Mat },
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise layer normalisation returning `(output, normalised, inv_std)`.
pub fn layer_norm_rows(x: &Mat, gain: &Mat, bias: &Mat, eps: f64) -> (Mat, Mat, Vec<f64>) {
    let d = x.cols();
    let mut normed = Mat::zeros(x.rows(), d);
    let mut out = Mat::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for c in 0..d {
            let xh = (row[c] - mean) * inv;
            normed.set(r, c, xh);
            out.set(r, c, xh * gain.get(0, c) + bias.get(0, c));
        }
    }
    (out, normed, inv_std)
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        match self.nodes[v.0].op {
            Op::Param(p) => self.store.get(p),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.get(0, 0)
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant input. Adjoints of leaves are available from [`Backward::wrt`].
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(Mat::zeros(0, 0), Op::Param(id));
        self.param_nodes.insert(id, v);
        v
    }

    pub fn gather(&mut self, src: Var, rows: &[usize]) -> Var {
        let value = self.value(src).select_rows(rows);
        self.push(value, Op::Gather { src, rows: rows.to_vec() })
    }

    /// Replaces whole rows of `base` with `1 × d` vectors.
    pub fn override_rows(&mut self, base: Var, rows: &[(usize, Var)]) -> Var {
        let mut value = self.value(base).clone();
        for &(r, v) in rows {
            let src = self.value(v);
            assert_eq!(src.shape(), (1, value.cols()), "override vector must be 1 x d");
            value.row_mut(r).copy_from_slice(src.row(0));
        }
        self.push(value, Op::Override { base, rows: rows.to_vec() })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    /// Sums same-shaped nodes left to right.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n of nothing");
        let mut value = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            value.add_assign(self.value(x));
        }
        self.push(value, Op::AddN(xs.to_vec()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds a `1 × m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), r.cols(), "add_row width mismatch");
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(r.row(0)) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    /// Multiplies `a` by a `1 × 1` node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::ScaleBy(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (value, normed, inv_std) = layer_norm_rows(self.value(x), self.value(gain), self.value(bias), eps);
        self.push(value, Op::LayerNorm { x, gain, bias, normed, inv_std })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        assert!(start + len <= src.cols(), "slice out of range");
        let mut value = Mat::zeros(src.rows(), len);
        for r in 0..src.rows() {
            value.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        self.push(value, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let rows = self.value(xs[0]).rows();
        let cols: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut value = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &x in xs {
                let src = self.value(x);
                assert_eq!(src.rows(), rows, "concat_cols row mismatch");
                value.row_mut(r)[off..off + src.cols()].copy_from_slice(src.row(r));
                off += src.cols();
            }
        }
        self.push(value, Op::ConcatCols(xs.to_vec()))
    }

    /// Mean of the rows, as a `1 × m` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        assert!(src.rows() > 0, "mean of zero rows");
        let mut value = Mat::zeros(1, src.cols());
        for r in 0..src.rows() {
            for (v, s) in value.row_mut(0).iter_mut().zip(src.row(r)) {
                *v += s;
            }
        }
        let n = src.rows() as f64;
        for v in value.row_mut(0) {
            *v /= n;
        }
        self.push(value, Op::MeanRows(x))
    }

    /// Summed negative log-likelihood of `targets[i]` under `softmax(logits[i])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len(), "one target per logit row");
        let probs = softmax_rows(l);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = l.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        self.push(Mat::filled(1, 1, loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Numerical(format!("backward needs a scalar loss, got {:?}", lv.shape())));
        }
        if !lv.get(0, 0).is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {}", lv.get(0, 0))));
        }
        let mut adj: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Mat::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::Gather { src, rows } => {
                    let s = self.value(*src);
                    let mut d = Mat::zeros(s.rows(), s.cols());
                    for (k, &r) in rows.iter().enumerate() {
                        for (a, b) in d.row_mut(r).iter_mut().zip(g.row(k)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut adj, *src, d);
                }
                Op::Override { base, rows } => {
                    let mut d = g.clone();
                    for &(r, v) in rows {
                        accumulate(&mut adj, v, Mat::row_vector(g.row(r).to_vec()));
                        d.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
                    }
                    accumulate(&mut adj, *base, d);
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::MatMulT(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    let da = g.matmul(self.value(*b));
                    let db = g.t_matmul(self.value(*a));
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut adj, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::AddN(xs) => {
                    for &x in xs {
                        accumulate(&mut adj, x, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.map(|x| -x));
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y);
                    let db = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (x, y) in dr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate(&mut adj, *row, dr);
                    accumulate(&mut adj, *a, g);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut adj, *a, g.map(|x| x * c));
                }
                Op::ScaleBy(a, s) => {
                    let c = self.scalar(*s);
                    let ds = g.dot(self.value(*a));
                    accumulate(&mut adj, *s, Mat::filled(1, 1, ds));
                    accumulate(&mut adj, *a, g.map(|x| x * c));
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |x, y| x * y * (1.0 - y));
                    accumulate(&mut adj, *a, d);
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                    accumulate(&mut adj, *a, d);
                }
                Op::Gelu(a) => {
                    let d = g.zip_map(self.value(*a), |x, y| x * gelu_grad(y));
                    accumulate(&mut adj, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols() {
                            d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                    let gm = self.value(*gain);
                    let (rows, d) = normed.shape();
                    let mut dx = Mat::zeros(rows, d);
                    let mut dgain = Mat::zeros(1, d);
                    let mut dbias = Mat::zeros(1, d);
                    for r in 0..rows {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for c in 0..d {
                            let dy = g.get(r, c);
                            let xh = normed.get(r, c);
                            dgain.row_mut(0)[c] += dy * xh;
                            dbias.row_mut(0)[c] += dy;
                            let dxh = dy * gm.get(0, c);
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        let n = d as f64;
                        for c in 0..d {
                            let dxh = g.get(r, c) * gm.get(0, c);
                            let xh = normed.get(r, c);
                            dx.set(r, c, inv_std[r] / n * (n * dxh - sum_dxh - xh * sum_dxh_xh));
                        }
                    }
                    accumulate(&mut adj, *bias, dbias);
                    accumulate(&mut adj, *gain, dgain);
                    accumulate(&mut adj, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let s = self.value(*x);
                    let mut d = Mat::zeros(s.rows(), s.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut adj, *x, d);
                }
                Op::ConcatCols(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let w = self.value(x).cols();
                        let mut d = Mat::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut adj, x, d);
                    }
                }
                Op::MeanRows(x) => {
                    let s = self.value(*x);
                    let n = s.rows() as f64;
                    let mut d = Mat::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        for (a, b) in d.row_mut(r).iter_mut().zip(g.row(0)) {
                            *a = b / n;
                        }
                    }
                    accumulate(&mut adj, *x, d);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let gs = g.get(0, 0);
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let v = d.get(r, t) - 1.0;
                        d.set(r, t, v);
                    }
                    d.scale_assign(gs);
                    accumulate(&mut adj, *logits, d);
                }
            }
        }
        Ok(Backward { adj })
    }

    /// Runs [`Graph::backward`] and collects parameter adjoints.
    pub fn param_gradients(&self, loss: Var) -> Result<Gradients> {
        let back = self.backward(loss)?;
        let mut grads = Gradients::zeros_like(self.store);
        for (&pid, &var) in &self.param_nodes {
            if let Some(g) = back.wrt(var) {
                grads.blocks[pid.0] = g.clone();
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Adjoints produced by a reverse pass. Only leaves and parameters keep
/// theirs.
pub struct Backward {
    adj: Vec<Option<Mat>>,
}

impl Backward {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.adj.get(v.0).and_then(Option::as_ref)
    }
}
