//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape: every op pushes one node holding its
//! forward value and enough context to run its backward rule. Node ids are
//! handed out in creation order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] is a single reverse sweep.

use std::fmt;
use std::rc::Rc;

use rand::Rng;

use super::tensor::{gemm, gemm_strided, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied differentiable op. Used for fused kernels and for test
/// fixtures that need a deliberately broken backward rule.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Vector-Jacobian product: one gradient per input, shaped like it.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Reshape(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows { input: NodeId, start: usize },
    Gelu(NodeId),
    LayerNorm { input: NodeId, inv_std: Vec<f64> },
    Softmax(NodeId),
    Log(NodeId),
    Embedding { table: NodeId, indices: Vec<usize> },
    Mean(NodeId),
    Sum(NodeId),
    Dropout { input: NodeId, mask: Vec<f64> },
    Attention { qkv: NodeId, heads: usize, probs: Vec<f64> },
    Custom { inputs: Vec<NodeId>, op: Rc<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::Log(..) => "log",
            Op::Embedding { .. } => "embedding",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Dropout { .. } => "dropout",
            Op::Attention { .. } => "attention",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::Log(a)
            | Op::Mean(a)
            | Op::Sum(a) => vec![*a],
            Op::SliceRows { input, .. }
            | Op::LayerNorm { input, .. }
            | Op::Dropout { input, .. } => vec![*input],
            Op::Embedding { table, .. } => vec![*table],
            Op::Attention { qkv, .. } => vec![*qkv],
            Op::ConcatRows(ids) => ids.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Build the forward pass with the op methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    /// Gradient for `id`, or zeros shaped like the node when no path reached it.
    pub fn wrt(&self, graph: &Graph, id: NodeId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()))
    }
}

fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() || (b.rows() == 1 && b.cols() == a.cols() && b.numel() == a.cols())
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_name(&self, id: NodeId) -> &str {
        self.nodes[id.0].op.name()
    }

    /// Input ids of a node; leaves have none.
    pub fn inputs_of(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
                node: id,
            });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        let id = self.push(value, Op::Leaf)?;
        self.nodes[id.0].requires_grad = requires_grad;
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2();
        let (k2, n) = bv.dims2();
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    /// Elementwise sum. `b` may also be a single row broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcast_ok(av, bv) {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let cols = av.cols();
        let bd = bv.data();
        let data = if av.numel() == bv.numel() {
            av.data().iter().zip(bd).map(|(x, y)| x + y).collect()
        } else {
            let mut out = av.data().to_vec();
            for row in out.chunks_exact_mut(cols) {
                row.iter_mut().zip(bd).for_each(|(x, y)| *x += y);
            }
            out
        };
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Add(a, b))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcast_ok(av, bv) {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", av.shape(), bv.shape()),
            ));
        }
        let cols = av.cols();
        let bd = bv.data();
        let data = if av.numel() == bv.numel() {
            av.data().iter().zip(bd).map(|(x, y)| x * y).collect()
        } else {
            let mut out = av.data().to_vec();
            for row in out.chunks_exact_mut(cols) {
                row.iter_mut().zip(bd).for_each(|(x, y)| *x *= y);
            }
            out
        };
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, Op::Scale(a, s))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a).transposed();
        self.push(t, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self
            .value(a)
            .reshaped(shape)
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {:?}", self.value(a).shape(), shape)))?;
        self.push(t, Op::Reshape(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column count {} vs {}", v.cols(), cols),
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec()))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(a);
        let (rows, cols) = v.dims2();
        if start > end || end > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("range {}..{} of {} rows", start, end, rows),
            ));
        }
        let data = v.data()[start * cols..end * cols].to_vec();
        self.push(
            Tensor::new(vec![end - start, cols], data)?,
            Op::SliceRows { input: a, start },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let data = v
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + fast_tanh(GELU_A * (x + GELU_B * x * x * x))))
            .collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(t, Op::Gelu(a))
    }

    /// Normalizes each row to zero mean and unit variance, without affine.
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (rows, cols) = v.dims2();
        let mut out = vec![0.0; rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = v.row(r);
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(s);
            for (o, &e) in out[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = (e - mean) * s;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(t, Op::LayerNorm { input: a, inv_std })
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (rows, cols) = v.dims2();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let x = v.row(r);
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for (oi, &xi) in o.iter_mut().zip(x) {
                *oi = (xi - max).exp();
                z += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= z;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(t, Op::Softmax(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x.ln()).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(t, Op::Log(a))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(table);
        let (rows, cols) = v.dims2();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::shape(
                    "embedding",
                    format!("index {} out of {} rows", i, rows),
                ));
            }
            data.extend_from_slice(v.row(i));
        }
        self.push(
            Tensor::new(vec![indices.len(), cols], data)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let m = v.sum() / v.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Inverted dropout. With `p == 0` this is the identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: NodeId, p: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p}")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let v = self.value(a);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..v.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(t, Op::Dropout { input: a, mask })
    }

    /// Fused multi-head self-attention over packed `[q | k | v]` rows.
    ///
    /// `qkv` is `n x 3d`; head `h` uses columns `h*dh..(h+1)*dh` of each
    /// third, with `dh = d / heads`. Returns the `n x d` concatenation of
    /// `softmax(q k^T / sqrt(dh)) v` over heads.
    pub fn attention(&mut self, qkv: NodeId, heads: usize) -> Result<NodeId> {
        let v = self.value(qkv);
        let (n, c) = v.dims2();
        if heads == 0 || c % (3 * heads) != 0 || c == 0 {
            return Err(Error::shape(
                "attention",
                format!("{:?} does not split into q, k, v over {heads} heads", v.shape()),
            ));
        }
        let (out, probs) = attention_forward(v, heads);
        let t = Tensor::new(vec![n, c / 3], out)?;
        self.push(t, Op::Attention { qkv, heads, probs })
    }

    pub fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let out = op.forward(&values)?;
        self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    // Composite helpers built from the catalogue above.

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Columns `start..end`, via transpose / slice_rows / transpose.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.transpose(a)?;
        let s = self.slice_rows(t, start, end)?;
        self.transpose(s)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let ts = parts
            .iter()
            .map(|&p| self.transpose(p))
            .collect::<Result<Vec<_>>>()?;
        let c = self.concat_rows(&ts)?;
        self.transpose(c)
    }

    /// [`Graph::attention`] spelled out with slices, matmuls and softmax.
    /// Slower, but every step is a catalogue op; used as a reference route.
    pub fn attention_composite(&mut self, qkv: NodeId, heads: usize) -> Result<NodeId> {
        let c = self.value(qkv).cols();
        if heads == 0 || c % (3 * heads) != 0 || c == 0 {
            return Err(Error::shape("attention_composite", format!("{c} columns, {heads} heads")));
        }
        let d = c / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        // Rows of the transposed projection are feature channels, so each
        // head's q/k/v is a contiguous row range.
        let qkv_t = self.transpose(qkv)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q_t = self.slice_rows(qkv_t, h * dh, (h + 1) * dh)?;
            let k_t = self.slice_rows(qkv_t, d + h * dh, d + (h + 1) * dh)?;
            let v_t = self.slice_rows(qkv_t, 2 * d + h * dh, 2 * d + (h + 1) * dh)?;
            let q = self.transpose(q_t)?;
            let scores = self.matmul(q, k_t)?;
            let scores = self.scale(scores, scale)?;
            let attn = self.softmax(scores)?;
            let v = self.transpose(v_t)?;
            outs.push(self.matmul(attn, v)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            self.concat_cols(&outs)
        }
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.value(logits).dims2();
        if labels.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), rows),
            ));
        }
        let mut onehot = Tensor::zeros(&[rows, cols]);
        for (r, &l) in labels.iter().enumerate() {
            if l >= cols {
                return Err(Error::invalid(format!("label {l} out of {cols} classes")));
            }
            onehot.set(r, l, 1.0);
        }
        let p = self.softmax(logits)?;
        let lp = self.log(p)?;
        let y = self.constant(onehot)?;
        let picked = self.mul(lp, y)?;
        let s = self.sum(picked)?;
        self.scale(s, -1.0 / rows as f64)
    }

    /// Reverse sweep from a scalar node. Every node is visited once, in
    /// reverse creation order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |i: NodeId| self.nodes[i.0].requires_grad;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2();
                let n = bv.cols();
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, 0.0);
                    accumulate(grads, *a, av.shape(), da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, 0.0);
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.shape(), g.data().to_vec());
                }
                if needs(*b) {
                    let bv = self.value(*b);
                    let db = reduce_broadcast(g.data(), bv.numel());
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = bv.numel();
                if needs(*a) {
                    let mut da = g.data().to_vec();
                    for row in da.chunks_exact_mut(n) {
                        row.iter_mut().zip(bv.data()).for_each(|(x, y)| *x *= y);
                    }
                    accumulate(grads, *a, av.shape(), da);
                }
                if needs(*b) {
                    let prod: Vec<f64> = g.data().iter().zip(av.data()).map(|(gi, x)| gi * x).collect();
                    accumulate(grads, *b, bv.shape(), reduce_broadcast(&prod, n));
                }
            }
            Op::Scale(a, s) => {
                let da = g.data().iter().map(|v| v * s).collect();
                accumulate(grads, *a, g.shape(), da);
            }
            Op::Transpose(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, av.shape(), g.transposed().into_data());
            }
            Op::Reshape(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, av.shape(), g.data().to_vec());
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.rows() * cols;
                    if needs(p) {
                        accumulate(grads, p, pv.shape(), g.data()[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::SliceRows { input, start } => {
                let iv = self.value(*input);
                let at = start * iv.cols();
                let slot = grads[input.0].get_or_insert_with(|| Tensor::zeros(iv.shape()));
                slot.data_mut()[at..at + g.numel()]
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(d, v)| *d += v);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let da = av
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, gi)| {
                        let t = fast_tanh(GELU_A * (x + GELU_B * x * x * x));
                        let dt = (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x);
                        gi * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                accumulate(grads, *a, av.shape(), da);
            }
            Op::LayerNorm { input, inv_std } => {
                let (rows, cols) = y.dims2();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mg = gr.iter().sum::<f64>() / cols as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        d[r * cols + c] = inv_std[r] * (gr[c] - mg - yr[c] * mgy);
                    }
                }
                accumulate(grads, *input, self.value(*input).shape(), d);
            }
            Op::Softmax(a) => {
                let (rows, cols) = y.dims2();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                accumulate(grads, *a, y.shape(), d);
            }
            Op::Log(a) => {
                let av = self.value(*a);
                let da = g.data().iter().zip(av.data()).map(|(gi, x)| gi / x).collect();
                accumulate(grads, *a, av.shape(), da);
            }
            Op::Embedding { table, indices } => {
                let tv = self.value(*table);
                let cols = tv.cols();
                let slot = grads[table.0].get_or_insert_with(|| Tensor::zeros(tv.shape()));
                let d = slot.data_mut();
                for (r, &i) in indices.iter().enumerate() {
                    d[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(g.row(r))
                        .for_each(|(x, v)| *x += v);
                }
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let v = g.item() / av.numel() as f64;
                accumulate(grads, *a, av.shape(), vec![v; av.numel()]);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, av.shape(), vec![g.item(); av.numel()]);
            }
            Op::Dropout { input, mask } => {
                let da = g.data().iter().zip(mask).map(|(gi, m)| gi * m).collect();
                accumulate(grads, *input, g.shape(), da);
            }
            Op::Attention { qkv, heads, probs } => {
                let d = attention_backward(self.value(*qkv), *heads, probs, g);
                accumulate(grads, *qkv, self.value(*qkv).shape(), d);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                let dins = op.backward(&values, y, g);
                for (&i, d) in inputs.iter().zip(dins) {
                    if needs(i) {
                        let shape = self.value(i).shape().to_vec();
                        accumulate(grads, i, &shape, d.into_data());
                    }
                }
            }
        }
    }
}

/// `tanh` through one `exp`; libm's `tanh` dominates GELU cost otherwise.
/// Absolute error stays at a few ulps of 1.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() < 1e-3 {
        return u.tanh();
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn attention_forward(qkv: &Tensor, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = qkv.dims2();
    let d = c / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let x = qkv.data();
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * n * n];
    for h in 0..heads {
        let p = &mut probs[h * n * n..(h + 1) * n * n];
        // scores = scale * q k^T, k read transposed through its strides.
        gemm_strided(
            (n, dh, n),
            scale,
            (&x[h * dh..], c, 1),
            (&x[d + h * dh..], 1, c),
            0.0,
            (p, n, 1),
        );
        for row in p.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                z += *e;
            }
            let inv = 1.0 / z;
            row.iter_mut().for_each(|e| *e *= inv);
        }
        gemm_strided(
            (n, n, dh),
            1.0,
            (p, n, 1),
            (&x[2 * d + h * dh..], c, 1),
            0.0,
            (&mut out[h * dh..], d, 1),
        );
    }
    (out, probs)
}

fn attention_backward(qkv: &Tensor, heads: usize, probs: &[f64], g: &Tensor) -> Vec<f64> {
    let (n, c) = qkv.dims2();
    let d = c / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let x = qkv.data();
    let go = g.data();
    let mut dx = vec![0.0; n * c];
    let mut ds = vec![0.0; n * n];
    for h in 0..heads {
        let p = &probs[h * n * n..(h + 1) * n * n];
        // dv = p^T do
        gemm_strided(
            (n, n, dh),
            1.0,
            (p, 1, n),
            (&go[h * dh..], d, 1),
            0.0,
            (&mut dx[2 * d + h * dh..], c, 1),
        );
        // dp = do v^T
        gemm_strided(
            (n, dh, n),
            1.0,
            (&go[h * dh..], d, 1),
            (&x[2 * d + h * dh..], 1, c),
            0.0,
            (&mut ds, n, 1),
        );
        for (dr, pr) in ds.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
            let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
            dr.iter_mut().zip(pr).for_each(|(e, &pi)| *e = pi * (*e - dot));
        }
        // dq = scale * ds k, dk = scale * ds^T q
        gemm_strided(
            (n, n, dh),
            scale,
            (&ds, n, 1),
            (&x[d + h * dh..], c, 1),
            0.0,
            (&mut dx[h * dh..], c, 1),
        );
        gemm_strided(
            (n, n, dh),
            scale,
            (&ds, 1, n),
            (&x[h * dh..], c, 1),
            0.0,
            (&mut dx[d + h * dh..], c, 1),
        );
    }
    dx
}

fn reduce_broadcast(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for row in g.chunks_exact(n) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], data: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                *e += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape"));
        }
    }
}
