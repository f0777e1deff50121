//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Forward calls append nodes; [`Tape::backward`] walks them in reverse and
//! accumulates gradients for every node, so every parameter that took part
//! in a forward pass gets a gradient and untouched parameters read back as
//! exact zeros. A single tape is single-threaded; independent tapes may run
//! in parallel over shared read-only parameters.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{ParamId, ParamStore};
use crate::tensor::{bilinear_taps, Mask, Tensor};

pub const COSINE_NORM_EPS: f64 = 1e-8;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRowBroadcast { a: NodeId, bias: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Affine { a: NodeId, mul: f64 },
    Gelu { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Softmax { x: NodeId, axis: usize },
    MaskedAttention { q: NodeId, k: NodeId, v: NodeId, mask: Arc<Mask> },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { x: NodeId, start: usize, end: usize },
    GatherRows { x: NodeId, indices: Arc<Vec<usize>> },
    BilinearResize { x: NodeId },
    Reshape { x: NodeId },
    CosineRows { a: NodeId, b: NodeId, norm_eps: f64 },
    CrossEntropy { logits: NodeId, targets: Arc<Vec<usize>>, mask: Arc<Vec<bool>> },
    MeanAll { x: NodeId },
    SumAll { x: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddRowBroadcast { .. } => "add_row_broadcast",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Affine { .. } => "affine",
            Op::Gelu { .. } => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::MaskedAttention { .. } => "masked_attention",
            Op::ConcatRows { .. } => "concat_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::BilinearResize { .. } => "bilinear_resize",
            Op::Reshape { .. } => "reshape",
            Op::CosineRows { .. } => "cosine_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::MeanAll { .. } => "mean_all",
            Op::SumAll { .. } => "sum_all",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradient buffers produced by one backward pass, addressable per node or
/// per parameter.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
    param_nodes: BTreeMap<ParamId, NodeId>,
}

impl Gradients {
    pub fn of_node(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }

    /// Gradient for a parameter; `None` when it never joined the forward
    /// pass (callers treat that as exact zero).
    pub fn of_param(&self, id: ParamId) -> Option<&[f64]> {
        self.param_nodes.get(&id).map(|n| self.grads[n.0].as_slice())
    }

    /// Gradient for a parameter, materializing zeros for absent ones.
    pub fn of_param_or_zeros(&self, id: ParamId, numel: usize) -> Vec<f64> {
        match self.of_param(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; numel],
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: BTreeMap<ParamId, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Index and op name of the first non-finite tensor on the tape, if any.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Constant input; receives a gradient buffer but is not a parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf, cached so repeated uses of a shared parameter within
    /// one tape hit the same node and accumulate into one gradient buffer.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let node = self.push(store.tensor(id).clone(), Op::Leaf);
        self.param_nodes.insert(id, node);
        node
    }

    /// Number of distinct leaf nodes backing a parameter (1 when shared
    /// correctly, 0 when unused).
    pub fn param_leaf_count(&self, id: ParamId) -> usize {
        usize::from(self.param_nodes.contains_key(&id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = crate::tensor::matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(v, Op::Add { a, b })
    }

    /// `[m, n] + [n]`, the bias pattern.
    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.cols();
        assert_eq!(tb.numel(), n, "bias width mismatch");
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let v = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(v, Op::AddRowBroadcast { a, bias })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(v, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(v, Op::Mul { a, b })
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, a: NodeId, mul: f64, add: f64) -> NodeId {
        let v = self.value(a).map(|x| mul * x + add);
        self.push(v, Op::Affine { a, mul })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.affine(a, c, 0.0)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu_fwd);
        self.push(v, Op::Gelu { a })
    }

    /// Per-row layer normalization of a 2-D tensor with learned gain/shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let eps = 1e-5;
        let tx = self.value(x);
        let d = tx.cols();
        assert_eq!(self.value(gamma).numel(), d, "layer_norm gamma width");
        assert_eq!(self.value(beta).numel(), d, "layer_norm beta width");
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[c] + b[c];
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), data).unwrap();
        self.push(v, Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = crate::tensor::softmax(self.value(x), axis)?;
        Ok(self.push(v, Op::Softmax { x, axis }))
    }

    pub fn masked_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: Arc<Mask>,
    ) -> Result<NodeId> {
        let out = crate::tensor::masked_attention(self.value(q), self.value(k), self.value(v), &mask)?;
        Ok(self.push(out, Op::MaskedAttention { q, k, v, mask }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![rows, cols], data).unwrap();
        self.push(v, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w].copy_from_slice(t.row(r));
            }
            offset += w;
        }
        let v = Tensor::new(vec![rows, total], data).unwrap();
        self.push(v, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        assert!(start < end && end <= cols, "slice_cols range {start}..{end} of {cols}");
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let v = Tensor::new(vec![rows, end - start], data).unwrap();
        self.push(v, Op::SliceCols { x, start, end })
    }

    /// Row gather; indices may repeat and may be empty.
    pub fn gather_rows(&mut self, x: NodeId, indices: Arc<Vec<usize>>) -> Result<NodeId> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices.iter() {
            if i >= rows {
                return Err(Error::invalid(format!("gather_rows index {i} >= {rows}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![indices.len(), cols], data).unwrap();
        Ok(self.push(v, Op::GatherRows { x, indices }))
    }

    /// Differentiable bilinear resize of an `[h, w, c]` node.
    pub fn bilinear_resize(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let v = crate::tensor::bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(v, Op::BilinearResize { x }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape { x }))
    }

    /// Per-row cosine similarity vector. With `norm_eps == 0` a zero-norm
    /// row is an error; with a positive eps each norm is clamped from below
    /// so zero rows (padding) stay finite while healthy rows keep exact
    /// positive-scale invariance.
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId, norm_eps: f64) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "cosine_rows shapes {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let t = ta.rows();
        let mut out = vec![0.0; t];
        for i in 0..t {
            let (ar, br) = (ta.row(i), tb.row(i));
            let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            let na: f64 = ar.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = br.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm_eps == 0.0 && (na == 0.0 || nb == 0.0) {
                return Err(Error::NumericDomain(format!("zero-norm row {i} in cosine_rows")));
            }
            out[i] = (dot / (na.max(norm_eps) * nb.max(norm_eps))).clamp(-1.0, 1.0);
        }
        let v = Tensor::new(vec![t], out)?;
        Ok(self.push(v, Op::CosineRows { a, b, norm_eps }))
    }

    /// Mean token-level negative log-likelihood over the supervised rows.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Arc<Vec<usize>>,
        mask: Arc<Vec<bool>>,
    ) -> Result<NodeId> {
        let t = self.value(logits);
        let (rows, vocab) = (t.rows(), t.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape(format!(
                "cross_entropy rows {rows}, targets {}, mask {}",
                targets.len(),
                mask.len()
            )));
        }
        let supervised = mask.iter().filter(|&&m| m).count();
        if supervised == 0 {
            return Err(Error::EmptySupervision);
        }
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] >= vocab {
                return Err(Error::invalid(format!(
                    "cross_entropy target {} >= vocab {vocab}",
                    targets[r]
                )));
            }
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total -= row[targets[r]] - lse;
        }
        let v = Tensor::scalar(total / supervised as f64);
        Ok(self.push(v, Op::CrossEntropy { logits, targets, mask }))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        assert!(t.numel() > 0, "mean_all of empty tensor");
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(v, Op::MeanAll { x })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(v, Op::SumAll { x })
    }

    /// Rebuilds `base` with the rows listed in `slots` replaced by the rows
    /// of `replacement`, in order.
    pub fn scatter_rows(&mut self, base: NodeId, slots: &[usize], replacement: NodeId) -> NodeId {
        let rows = self.value(base).rows();
        assert_eq!(self.value(replacement).rows(), slots.len(), "scatter_rows arity");
        let mut perm: Vec<usize> = (0..rows).collect();
        for (j, &s) in slots.iter().enumerate() {
            assert!(s < rows, "scatter_rows slot {s} out of range");
            perm[s] = rows + j;
        }
        let cat = self.concat_rows(&[base, replacement]);
        self.gather_rows(cat, Arc::new(perm)).expect("scatter perm in range")
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|nd| vec![0.0; nd.value.numel()]).collect();
        grads[loss.0][0] = 1.0;

        for i in (0..n).rev() {
            if grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k) = (ta.rows(), ta.cols());
                    let nn = tb.cols();
                    // dA = G . B^T ; dB = A^T . G
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for c in 0..nn {
                                s += g[r * nn + c] * tb.data()[p * nn + c];
                            }
                            grads[a.0][r * k + p] += s;
                        }
                    }
                    for p in 0..k {
                        for c in 0..nn {
                            let mut s = 0.0;
                            for r in 0..m {
                                s += ta.data()[r * k + p] * g[r * nn + c];
                            }
                            grads[b.0][p * nn + c] += s;
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (ga, gi) in grads[a.0].iter_mut().zip(&g) {
                        *ga += gi;
                    }
                    for (gb, gi) in grads[b.0].iter_mut().zip(&g) {
                        *gb += gi;
                    }
                }
                Op::AddRowBroadcast { a, bias } => {
                    let nn = self.nodes[bias.0].value.numel();
                    for (ga, gi) in grads[a.0].iter_mut().zip(&g) {
                        *ga += gi;
                    }
                    for (j, gi) in g.iter().enumerate() {
                        grads[bias.0][j % nn] += gi;
                    }
                }
                Op::Sub { a, b } => {
                    for (ga, gi) in grads[a.0].iter_mut().zip(&g) {
                        *ga += gi;
                    }
                    for (gb, gi) in grads[b.0].iter_mut().zip(&g) {
                        *gb -= gi;
                    }
                }
                Op::Mul { a, b } => {
                    let (ta, tb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    for j in 0..g.len() {
                        grads[a.0][j] += g[j] * tb[j];
                        grads[b.0][j] += g[j] * ta[j];
                    }
                }
                Op::Affine { a, mul } => {
                    for (ga, gi) in grads[a.0].iter_mut().zip(&g) {
                        *ga += gi * mul;
                    }
                }
                Op::Gelu { a } => {
                    let ta = self.nodes[a.0].value.data();
                    for j in 0..g.len() {
                        grads[a.0][j] += g[j] * gelu_bwd(ta[j]);
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let tx = &self.nodes[x.0].value;
                    let d = tx.cols();
                    let gam = self.nodes[gamma.0].value.data().to_vec();
                    for (r, row) in tx.data().chunks(d).enumerate() {
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let gy = &g[r * d..(r + 1) * d];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..d {
                            grads[beta.0][c] += gy[c];
                            grads[gamma.0][c] += gy[c] * xhat[c];
                            let dxh = gy[c] * gam[c];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[c];
                        }
                        let m1 = sum_dxhat / d as f64;
                        let m2 = sum_dxhat_xhat / d as f64;
                        for c in 0..d {
                            let dxh = gy[c] * gam[c];
                            grads[x.0][r * d + c] += inv * (dxh - m1 - xhat[c] * m2);
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    let y = &self.nodes[i].value;
                    let shape = y.shape();
                    let axis_len = shape[axis];
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    for o in 0..outer {
                        for inn in 0..inner {
                            let idx = |a: usize| o * axis_len * inner + a * inner + inn;
                            let mut dot = 0.0;
                            for a in 0..axis_len {
                                dot += g[idx(a)] * y.data()[idx(a)];
                            }
                            for a in 0..axis_len {
                                grads[x.0][idx(a)] += y.data()[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                }
                Op::MaskedAttention { q, k, v, mask } => {
                    self.backward_attention(&mut grads, &g, q, k, v, &mask);
                }
                Op::ConcatRows { parts } => {
                    let cols = self.nodes[i].value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.numel();
                        for j in 0..len {
                            grads[p.0][j] += g[offset + j];
                        }
                        offset += len;
                        let _ = cols;
                    }
                }
                Op::ConcatCols { parts } => {
                    let total = self.nodes[i].value.cols();
                    let rows = self.nodes[i].value.rows();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.cols();
                        for r in 0..rows {
                            for c in 0..w {
                                grads[p.0][r * w + c] += g[r * total + offset + c];
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let cols = self.nodes[x.0].value.cols();
                    let w = end - start;
                    for r in 0..self.nodes[i].value.rows() {
                        for c in 0..w {
                            grads[x.0][r * cols + start + c] += g[r * w + c];
                        }
                    }
                }
                Op::GatherRows { x, indices } => {
                    let cols = self.nodes[x.0].value.cols();
                    for (r, &src) in indices.iter().enumerate() {
                        for c in 0..cols {
                            grads[x.0][src * cols + c] += g[r * cols + c];
                        }
                    }
                }
                Op::BilinearResize { x } => {
                    let (in_h, in_w, ch) = {
                        let s = self.nodes[x.0].value.shape();
                        (s[0], s[1], s[2])
                    };
                    let (out_h, out_w) = {
                        let s = self.nodes[i].value.shape();
                        (s[0], s[1])
                    };
                    for oy in 0..out_h {
                        for ox in 0..out_w {
                            for (sy, sx, wt) in bilinear_taps(in_h, in_w, out_h, out_w, oy, ox) {
                                for c in 0..ch {
                                    grads[x.0][(sy * in_w + sx) * ch + c] +=
                                        wt * g[(oy * out_w + ox) * ch + c];
                                }
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    for (gx, gi) in grads[x.0].iter_mut().zip(&g) {
                        *gx += gi;
                    }
                }
                Op::CosineRows { a, b, norm_eps } => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let d = ta.cols();
                    for r in 0..ta.rows() {
                        let (ar, br) = (ta.row(r), tb.row(r));
                        let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                        let na: f64 = ar.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nb: f64 = br.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let (ca, cb) = (na.max(norm_eps), nb.max(norm_eps));
                        let denom = ca * cb;
                        let gr = g[r];
                        for c in 0..d {
                            let mut da = br[c] / denom;
                            if na > norm_eps {
                                da -= dot * ar[c] / (na * ca * denom);
                            }
                            let mut db = ar[c] / denom;
                            if nb > norm_eps {
                                db -= dot * br[c] / (nb * cb * denom);
                            }
                            grads[a.0][r * d + c] += gr * da;
                            grads[b.0][r * d + c] += gr * db;
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, mask } => {
                    let t = &self.nodes[logits.0].value;
                    let (rows, vocab) = (t.rows(), t.cols());
                    let supervised = mask.iter().filter(|&&m| m).count() as f64;
                    let scale = g[0] / supervised;
                    for r in 0..rows {
                        if !mask[r] {
                            continue;
                        }
                        let row = t.row(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for c in 0..vocab {
                            let p = exps[c] / sum;
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            grads[logits.0][r * vocab + c] += scale * (p - onehot);
                        }
                    }
                }
                Op::MeanAll { x } => {
                    let numel = self.nodes[x.0].value.numel() as f64;
                    let gi = g[0] / numel;
                    for gx in grads[x.0].iter_mut() {
                        *gx += gi;
                    }
                }
                Op::SumAll { x } => {
                    for gx in grads[x.0].iter_mut() {
                        *gx += g[0];
                    }
                }
            }
            grads[i] = g;
        }

        Gradients { grads, param_nodes: self.param_nodes.clone() }
    }

    fn backward_attention(
        &self,
        grads: &mut [Vec<f64>],
        g: &[f64],
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: &Mask,
    ) {
        let (tq, tk, tv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let (m, d) = (tq.rows(), tq.cols());
        let kn = tk.rows();
        let dv = tv.cols();
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; kn];
        let mut dprobs = vec![0.0; kn];
        for i in 0..m {
            // Recompute this row's softmax weights.
            let mut max = f64::NEG_INFINITY;
            for j in 0..kn {
                if mask.allowed(i, j) {
                    let mut s = 0.0;
                    for c in 0..d {
                        s += tq.row(i)[c] * tk.row(j)[c];
                    }
                    probs[j] = s * scale;
                    max = max.max(probs[j]);
                }
            }
            let mut sum = 0.0;
            for j in 0..kn {
                if mask.allowed(i, j) {
                    probs[j] = (probs[j] - max).exp();
                    sum += probs[j];
                } else {
                    probs[j] = 0.0;
                }
            }
            for p in probs.iter_mut() {
                *p /= sum;
            }
            let gout = &g[i * dv..(i + 1) * dv];
            // dV and dP.
            let mut dot = 0.0;
            for j in 0..kn {
                if probs[j] == 0.0 && !mask.allowed(i, j) {
                    dprobs[j] = 0.0;
                    continue;
                }
                let mut dp = 0.0;
                for c in 0..dv {
                    grads[v.0][j * dv + c] += probs[j] * gout[c];
                    dp += gout[c] * tv.row(j)[c];
                }
                dprobs[j] = dp;
                dot += probs[j] * dp;
            }
            // dS -> dQ, dK.
            for j in 0..kn {
                if !mask.allowed(i, j) {
                    continue;
                }
                let ds = probs[j] * (dprobs[j] - dot) * scale;
                for c in 0..d {
                    grads[q.0][i * d + c] += ds * tk.row(j)[c];
                    grads[k.0][j * d + c] += ds * tq.row(i)[c];
                }
            }
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}
