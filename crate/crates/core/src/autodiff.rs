//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only record of primitive operations. Every
//! operation appends a node whose inputs have strictly smaller ids, so the
//! node order is already a topological order. [`Graph::backward`] walks the
//! record once in reverse and returns the gradient of a scalar node with
//! respect to every leaf. The record is never mutated by a backward pass, so
//! it can be traversed any number of times (one traversal per class for the
//! per-class gradient scorers) and the results are bit-identical.
//!
//! Conventions: ReLU has subgradient 0 at exactly 0, max-pooling routes the
//! gradient to the first maximal element of each window, convolution is a
//! stride-1 valid cross-correlation.

use std::collections::BTreeMap;

use crate::error::{Result, UqError};
use crate::tensor::Tensor;

/// Reference to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Reshape(NodeId),
    LogSoftmax(NodeId),
    MaskMul(NodeId, Tensor),
    Select(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only computation record.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf of a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    leaves: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    /// Gradient for a leaf. Leaves the seed does not depend on get zeros.
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.leaves.get(&leaf)
    }

    pub fn take(&mut self, leaf: NodeId) -> Option<Tensor> {
        self.leaves.remove(&leaf)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> UqError {
    UqError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// `[m×k]·[k×n]`, no shape checks.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Splits a conv/pool input shape into `(batch, channels, h, w)`.
fn image_dims(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(UqError::Shape(format!(
            "{op}: expected c×h×w or n×c×h×w input, got {shape:?}"
        ))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(UqError::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Registers an input, parameter or constant.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (av.shape(), bv.shape()) else {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        };
        if k != k2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let data = matmul_raw(av.data(), bv.data(), m, k, n);
        self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), "matmul")
    }

    /// Adds `bias` (shape `[n]`) to every length-`n` row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = *av.shape().last().unwrap();
        if bv.shape() != [n] {
            return Err(shape_err("add_bias", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(a, bias), "add_bias")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        av.check_same_shape(bv)?;
        let mut out = av.clone();
        out.add_scaled(bv, 1.0)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        av.check_same_shape(bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor), "scale")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(a), "relu")
    }

    /// Valid, stride-1 cross-correlation plus per-channel bias.
    ///
    /// `input` is `c_in×h×w` (or batched `n×c_in×h×w`), `kernels` is
    /// `c_out×c_in×kh×kw`, `bias` is `c_out`.
    #[allow(clippy::needless_range_loop)]
    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, kv, bv) = (self.value(input), self.value(kernels), self.value(bias));
        let (n, c, h, w) = image_dims(xv.shape(), "conv2d")?;
        let &[co, ci, kh, kw] = kv.shape() else {
            return Err(shape_err("conv2d", xv.shape(), kv.shape()));
        };
        if ci != c || bv.shape() != [co] {
            return Err(shape_err("conv2d", xv.shape(), kv.shape()));
        }
        if kh > h || kw > w {
            return Err(UqError::Shape(format!(
                "conv2d: kernel {kh}×{kw} larger than input {h}×{w}"
            )));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let (x, k, b) = (xv.data(), kv.data(), bv.data());
        let mut out = vec![0.0; n * co * oh * ow];
        for s in 0..n {
            for o in 0..co {
                let obase = (s * co + o) * oh * ow;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b[o];
                        for q in 0..c {
                            let xbase = (s * c + q) * h * w;
                            let kbase = ((o * c + q) * kh) * kw;
                            for a in 0..kh {
                                let xrow = xbase + (i + a) * w + j;
                                let krow = kbase + a * kw;
                                for bb in 0..kw {
                                    acc += x[xrow + bb] * k[krow + bb];
                                }
                            }
                        }
                        out[obase + i * ow + j] = acc;
                    }
                }
            }
        }
        let shape = if xv.rank() == 3 {
            vec![co, oh, ow]
        } else {
            vec![n, co, oh, ow]
        };
        self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                input,
                kernels,
                bias,
            },
            "conv2d",
        )
    }

    /// Non-overlapping 2×2 max-pooling over the last two axes.
    pub fn maxpool2d(&mut self, input: NodeId) -> Result<NodeId> {
        let xv = self.value(input);
        let (n, c, h, w) = image_dims(xv.shape(), "maxpool2d")?;
        if h < 2 || w < 2 {
            return Err(UqError::Shape(format!(
                "maxpool2d: spatial size {h}×{w} smaller than the 2×2 window"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = xv.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let shape = if xv.rank() == 3 {
            vec![c, oh, ow]
        } else {
            vec![n, c, oh, ow]
        };
        self.push(
            Tensor::from_parts(shape, out),
            Op::MaxPool2d { input, argmax },
            "maxpool2d",
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// Log-softmax along the last axis, stabilised by max subtraction.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let classes = *av.shape().last().unwrap();
        if classes < 2 {
            return Err(UqError::Domain(format!(
                "log_softmax needs at least 2 classes, got {classes}"
            )));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(classes) {
            log_softmax_in_place(row);
        }
        self.push(out, Op::LogSoftmax(a), "log_softmax")
    }

    /// Elementwise product with a constant mask (no gradient to the mask).
    pub fn mask_mul(&mut self, a: NodeId, mask: Tensor) -> Result<NodeId> {
        let av = self.value(a);
        av.check_same_shape(&mask)?;
        let data = av.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(out, Op::MaskMul(a, mask), "mask_mul")
    }

    /// Column `index` of `a` viewed as rows along the last axis; the result
    /// has one entry per row.
    pub fn select(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let av = self.value(a);
        let width = *av.shape().last().unwrap();
        if index >= width {
            return Err(UqError::Shape(format!(
                "select: index {index} out of range for last axis {width}"
            )));
        }
        let data: Vec<f64> = av.data().chunks(width).map(|r| r[index]).collect();
        let out = Tensor::from_parts(vec![data.len()], data);
        self.push(out, Op::Select(a, index), "select")
    }

    /// Picks `indices[r]` from row `r`.
    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let av = self.value(a);
        let width = *av.shape().last().unwrap();
        let rows = av.len() / width;
        if indices.len() != rows || indices.iter().any(|&i| i >= width) {
            return Err(UqError::Shape(format!(
                "gather: {} indices for {rows} rows of width {width}",
                indices.len()
            )));
        }
        let data: Vec<f64> = av
            .data()
            .chunks(width)
            .zip(&indices)
            .map(|(r, &i)| r[i])
            .collect();
        let out = Tensor::from_parts(vec![rows], data);
        self.push(out, Op::Gather(a, indices), "gather")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let out = Tensor::scalar(av.sum() / av.len() as f64);
        self.push(out, Op::Mean(a), "mean")
    }

    /// Smallest distance of any ReLU input to its kink, or of any max-pool
    /// window maximum to its runner-up. Finite-difference checks are only
    /// meaningful when this exceeds the step size.
    pub fn nonsmooth_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for v in self.value(*a).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxPool2d { input, .. } => {
                    let xv = self.value(*input);
                    let (n, c, h, w) = image_dims(xv.shape(), "maxpool2d").unwrap();
                    let x = xv.data();
                    for plane in 0..n * c {
                        let base = plane * h * w;
                        for i in 0..h / 2 {
                            for j in 0..w / 2 {
                                let mut vals = [0.0; 4];
                                for (t, (di, dj)) in
                                    [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate()
                                {
                                    vals[t] = x[base + (2 * i + di) * w + 2 * j + dj];
                                }
                                vals.sort_by(|a, b| b.total_cmp(a));
                                margin = margin.min(vals[0] - vals[1]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Gradient of the scalar node `seed` with respect to every leaf.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients> {
        if seed.0 >= self.nodes.len() {
            return Err(UqError::Contract(format!("unknown node {}", seed.0)));
        }
        if self.value(seed).len() != 1 {
            return Err(UqError::Contract(format!(
                "backward needs a scalar seed, got shape {:?}",
                self.value(seed).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; seed.0 + 1];
        grads[seed.0] = Some(Tensor::full(self.value(seed).shape(), 1.0));

        for id in (0..=seed.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let bt = transpose(bv.data(), k, n);
                    let da = matmul_raw(g.data(), &bt, m, n, k);
                    let at = transpose(av.data(), m, k);
                    let db = matmul_raw(&at, g.data(), k, m, n);
                    accumulate(&mut grads, *a, Tensor::from_parts(vec![m, k], da));
                    accumulate(&mut grads, *b, Tensor::from_parts(vec![k, n], db));
                }
                Op::AddBias(a, bias) => {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *bias, Tensor::from_parts(vec![n], db));
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    let db = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                    accumulate(&mut grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut grads, *a, g.map(|v| v * factor));
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, Tensor::from_parts(av.shape().to_vec(), data));
                }
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                } => {
                    let (dx, dk, db) = self.conv2d_backward(&g, *input, *kernels, *bias);
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *kernels, dk);
                    accumulate(&mut grads, *input, dx);
                }
                Op::MaxPool2d { input, argmax } => {
                    let xv = self.value(*input);
                    let mut dx = vec![0.0; xv.len()];
                    for (gv, &idx) in g.data().iter().zip(argmax) {
                        dx[idx] += gv;
                    }
                    accumulate(&mut grads, *input, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::from_parts(shape, g.into_data()));
                }
                Op::LogSoftmax(a) => {
                    let out = &node.value;
                    let classes = *out.shape().last().unwrap();
                    let mut dx = g.clone();
                    for (drow, orow) in dx.data_mut().chunks_mut(classes).zip(out.data().chunks(classes)) {
                        let total: f64 = drow.iter().sum();
                        for (d, o) in drow.iter_mut().zip(orow) {
                            *d -= o.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::MaskMul(a, mask) => {
                    let data = g.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
                    accumulate(&mut grads, *a, Tensor::from_parts(mask.shape().to_vec(), data));
                }
                Op::Select(a, index) => {
                    let av = self.value(*a);
                    let width = *av.shape().last().unwrap();
                    let mut dx = vec![0.0; av.len()];
                    for (r, gv) in g.data().iter().enumerate() {
                        dx[r * width + index] = *gv;
                    }
                    accumulate(&mut grads, *a, Tensor::from_parts(av.shape().to_vec(), dx));
                }
                Op::Gather(a, indices) => {
                    let av = self.value(*a);
                    let width = *av.shape().last().unwrap();
                    let mut dx = vec![0.0; av.len()];
                    for (r, (gv, &i)) in g.data().iter().zip(indices).enumerate() {
                        dx[r * width + i] = *gv;
                    }
                    accumulate(&mut grads, *a, Tensor::from_parts(av.shape().to_vec(), dx));
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(self.value(*a).shape(), gv));
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let gv = g.data()[0] / av.len() as f64;
                    accumulate(&mut grads, *a, Tensor::full(av.shape(), gv));
                }
            }
        }

        let mut leaves = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let g = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                leaves.insert(NodeId(id), g);
            }
        }
        Ok(Gradients { leaves })
    }

    #[allow(clippy::needless_range_loop)]
    fn conv2d_backward(
        &self,
        g: &Tensor,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
    ) -> (Tensor, Tensor, Tensor) {
        let (xv, kv, bv) = (self.value(input), self.value(kernels), self.value(bias));
        let (n, c, h, w) = image_dims(xv.shape(), "conv2d").unwrap();
        let (co, kh, kw) = (kv.shape()[0], kv.shape()[2], kv.shape()[3]);
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let (x, k, gd) = (xv.data(), kv.data(), g.data());
        let mut dx = vec![0.0; x.len()];
        let mut dk = vec![0.0; k.len()];
        let mut db = vec![0.0; bv.len()];
        for s in 0..n {
            for o in 0..co {
                let gbase = (s * co + o) * oh * ow;
                for i in 0..oh {
                    for j in 0..ow {
                        let gv = gd[gbase + i * ow + j];
                        if gv == 0.0 {
                            continue;
                        }
                        db[o] += gv;
                        for q in 0..c {
                            let xbase = (s * c + q) * h * w;
                            let kbase = ((o * c + q) * kh) * kw;
                            for a in 0..kh {
                                let xrow = xbase + (i + a) * w + j;
                                let krow = kbase + a * kw;
                                for bb in 0..kw {
                                    dk[krow + bb] += gv * x[xrow + bb];
                                    dx[xrow + bb] += gv * k[krow + bb];
                                }
                            }
                        }
                    }
                }
            }
        }
        (
            Tensor::from_parts(xv.shape().to_vec(), dx),
            Tensor::from_parts(kv.shape().to_vec(), dk),
            Tensor::from_parts(bv.shape().to_vec(), db),
        )
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Shifting before subtracting keeps large equal logits exact.
    let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v = (*v - max) - log_sum;
    }
}

/// Standalone log-softmax of a logit vector.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.leaf(logits.clone())?;
    let y = g.log_softmax(x)?;
    Ok(g.value(y).clone())
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences with step `h` and returns the largest componentwise relative
/// error, using `max(|g|, 1e-8)` as the denominator.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(UqError::Domain(format!("step must be positive, got {h}")));
    }
    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p.clone())?;
        let y = f(&mut g, x)?;
        g.value(y).item()
    };
    let mut g = Graph::new();
    let x = g.leaf(point.clone())?;
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = grads.get(x).expect("leaf gradient");

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1e-8));
    }
    Ok(worst)
}

/// A tensor tagged with its parameter name and 1-based layer index.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub layer_index: usize,
    pub value: Tensor,
}

/// Per-layer gradient tensors mirroring a parameter set entry for entry.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    entries: Vec<NamedTensor>,
}

impl GradientBundle {
    pub fn new(entries: Vec<NamedTensor>) -> Result<Self> {
        let mut expected = 1;
        for e in &entries {
            if e.layer_index != expected && e.layer_index != expected + 1 {
                return Err(UqError::Contract(format!(
                    "layer indices must run 1..L without gaps, found {} after {}",
                    e.layer_index, expected
                )));
            }
            expected = e.layer_index;
        }
        Ok(GradientBundle { entries })
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    pub fn layer_count(&self) -> usize {
        self.entries.last().map_or(0, |e| e.layer_index)
    }

    /// Same layout with every entry zeroed.
    pub fn zeros_like(&self) -> GradientBundle {
        GradientBundle {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    layer_index: e.layer_index,
                    value: Tensor::zeros(e.value.shape()),
                })
                .collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &GradientBundle, alpha: f64) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(UqError::Shape(format!(
                "gradient bundles have {} and {} entries",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.value.add_scaled(&b.value, alpha)?;
        }
        Ok(())
    }

    /// Sum of squared entries per layer, indexed by `layer_index - 1`.
    pub fn layer_sq_norms(&self) -> Vec<f64> {
        self.layer_fold(Tensor::sq_norm)
    }

    /// Sum of absolute entries per layer, indexed by `layer_index - 1`.
    pub fn layer_l1_norms(&self) -> Vec<f64> {
        self.layer_fold(Tensor::l1_norm)
    }

    fn layer_fold(&self, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; self.layer_count()];
        for e in &self.entries {
            out[e.layer_index - 1] += f(&e.value);
        }
        out
    }

    pub fn flat(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.value.data().iter().copied())
            .collect()
    }

    pub fn max_abs_diff(&self, other: &GradientBundle) -> Result<f64> {
        let mut worst = 0.0f64;
        for (a, b) in self.entries.iter().zip(&other.entries) {
            worst = worst.max(a.value.max_abs_diff(&b.value)?);
        }
        Ok(worst)
    }
}
