//! Define-by-run reverse-mode differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records every primitive as a node holding its forward value.
//! Parents always precede children, so the node vector is already in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! A fresh tape is built for every forward pass.

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Tag identifying the primitive that produced a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Leaf,
    Constant,
    MatMul,
    Transpose,
    Add,
    Subtract,
    Scale,
    Hadamard,
    SafeSqrt,
    Relu,
    LayerNorm,
    L2Normalize,
    MeanRows,
    ConcatCols,
    ConcatRows,
    SliceCols,
    SliceRows,
    TriuVec,
    SumAll,
    LogSumExpRows,
    Exp,
    DivScalar,
}

/// Forward rule plus whatever the backward rule needs.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Subtract(NodeId, NodeId),
    Scale(NodeId, f64),
    Hadamard(NodeId, NodeId),
    SafeSqrt(NodeId),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: NodeId,
        inv_norm: Vec<f64>,
    },
    MeanRows(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    TriuVec(NodeId),
    SumAll(NodeId),
    LogSumExpRows {
        x: NodeId,
        softmax: Tensor,
    },
    Exp(NodeId),
    DivScalar(NodeId, NodeId),
}

impl Op {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::Constant => Primitive::Constant,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Transpose(_) => Primitive::Transpose,
            Op::Add(..) => Primitive::Add,
            Op::Subtract(..) => Primitive::Subtract,
            Op::Scale(..) => Primitive::Scale,
            Op::Hadamard(..) => Primitive::Hadamard,
            Op::SafeSqrt(_) => Primitive::SafeSqrt,
            Op::Relu(_) => Primitive::Relu,
            Op::LayerNorm { .. } => Primitive::LayerNorm,
            Op::L2Normalize { .. } => Primitive::L2Normalize,
            Op::MeanRows(_) => Primitive::MeanRows,
            Op::ConcatCols(_) => Primitive::ConcatCols,
            Op::ConcatRows(_) => Primitive::ConcatRows,
            Op::SliceCols { .. } => Primitive::SliceCols,
            Op::SliceRows { .. } => Primitive::SliceRows,
            Op::TriuVec(_) => Primitive::TriuVec,
            Op::SumAll(_) => Primitive::SumAll,
            Op::LogSumExpRows { .. } => Primitive::LogSumExpRows,
            Op::Exp(_) => Primitive::Exp,
            Op::DivScalar(..) => Primitive::DivScalar,
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Subtract(a, b)
            | Op::Hadamard(a, b)
            | Op::DivScalar(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::SafeSqrt(x)
            | Op::Relu(x)
            | Op::L2Normalize { x, .. }
            | Op::MeanRows(x)
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::TriuVec(x)
            | Op::SumAll(x)
            | Op::LogSumExpRows { x, .. }
            | Op::Exp(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Read-only view of a recorded node.
#[derive(Debug, Clone, Copy)]
pub struct TapeNode<'a> {
    pub id: NodeId,
    pub value: &'a Tensor,
    pub primitive: Primitive,
}

/// Gradients of a scalar root with respect to every reachable node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`, or `None` if the node does not influence the root.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, with zeros of the given shape for unreachable nodes.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

/// Length of the upper triangle (with diagonal) of a `k x k` matrix.
pub fn triu_len(k: usize) -> usize {
    k * (k + 1) / 2
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn node(&self, id: NodeId) -> TapeNode<'_> {
        let n = &self.nodes[id.0];
        TapeNode {
            id,
            value: &n.value,
            primitive: n.op.primitive(),
        }
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_raw(value, Op::Constant, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x), "transpose")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Subtract(a, b), "subtract")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::Param(format!("scale factor must be finite, got {c}")));
        }
        let v = self.value(x).scale(c);
        self.push(v, Op::Scale(x, c), "scale")
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        self.push(v, Op::Hadamard(a, b), "hadamard")
    }

    /// Element-wise `sqrt(max(x, 0) + eps)`.
    pub fn safe_sqrt(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::Param(format!("safe_sqrt eps must be >= 0, got {eps}")));
        }
        let v = self.value(x).map(|a| (a.max(0.0) + eps).sqrt());
        self.push(v, Op::SafeSqrt(x), "safe_sqrt")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x), "relu")
    }

    /// Row-wise layer normalization with population variance and a
    /// `1 x n` affine pair.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        if !(eps > 0.0) {
            return Err(Error::Param(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (rows, n) = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != (1, n) {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: (rows, n),
                    right: self.shape(p),
                });
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut normalized = vec![0.0; rows * n];
        let mut out = vec![0.0; rows * n];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..n {
                let xh = (row[c] - mean) * is;
                normalized[r * n + c] = xh;
                out[r * n + c] = xh * g[c] + b[c];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized: Tensor::from_raw(rows, n, normalized),
            inv_std,
        };
        self.push(Tensor::from_raw(rows, n, out), op, "layer_norm")
    }

    /// Row-wise `x / sqrt(|x|^2 + eps)`; rows come out unit-norm unless they are ~0.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        const NORM_EPS: f64 = 1e-24;
        let xv = self.value(x);
        let (rows, n) = xv.shape();
        let mut out = vec![0.0; rows * n];
        let mut inv_norm = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            inv_norm.push(inv);
            for c in 0..n {
                out[r * n + c] = row[c] * inv;
            }
        }
        self.push(
            Tensor::from_raw(rows, n, out),
            Op::L2Normalize { x, inv_norm },
            "l2_normalize",
        )
    }

    /// Column means: `R x C -> 1 x C`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        if rows == 0 {
            return Err(Error::Param("mean_rows of an empty tensor".into()));
        }
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        self.push(Tensor::from_raw(1, cols, out), Op::MeanRows(x), "mean_rows")
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Param("concat_cols of nothing".into()))?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &x in xs {
            if self.shape(x).0 != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: self.shape(x),
                });
            }
            cols += self.shape(x).1;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        self.push(Tensor::from_raw(rows, cols, out), Op::ConcatCols(xs.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let parts: Vec<&Tensor> = xs.iter().map(|&x| self.value(x)).collect();
        if parts.is_empty() {
            return Err(Error::Param("concat_rows of nothing".into()));
        }
        let v = Tensor::vstack(&parts)?;
        self.push(v, Op::ConcatRows(xs.to_vec()), "concat_rows")
    }

    /// Columns `start..start + width` of `x`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        if start + width > cols {
            return Err(Error::Param(format!(
                "column slice {start}..{} out of range for {cols} columns",
                start + width
            )));
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        self.push(Tensor::from_raw(rows, width, out), Op::SliceCols { x, start }, "slice_cols")
    }

    /// Rows `start..start + count` of `x`.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let v = self.value(x).slice_rows(start, count)?;
        self.push(v, Op::SliceRows { x, start }, "slice_rows")
    }

    /// `parts` contiguous column blocks of equal width.
    pub fn split_cols(&mut self, x: NodeId, parts: usize) -> Result<Vec<NodeId>> {
        let cols = self.shape(x).1;
        if parts == 0 || cols % parts != 0 {
            return Err(Error::Config(format!(
                "cannot split {cols} columns into {parts} equal parts"
            )));
        }
        let width = cols / parts;
        (0..parts).map(|p| self.slice_cols(x, p * width, width)).collect()
    }

    /// Upper triangle with diagonal of a square matrix, row-major, as `1 x k(k+1)/2`.
    pub fn triu_vec(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (k, c) = xv.shape();
        if k != c {
            return Err(Error::Shape {
                op: "triu_vec",
                left: (k, c),
                right: (k, k),
            });
        }
        let mut out = Vec::with_capacity(triu_len(k));
        for i in 0..k {
            out.extend_from_slice(&xv.row(i)[i..]);
        }
        self.push(Tensor::from_raw(1, triu_len(k), out), Op::TriuVec(x), "triu_vec")
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::from_raw(1, 1, vec![self.value(x).sum()]);
        self.push(v, Op::SumAll(x), "sum_all")
    }

    /// Stable `log(sum(exp(row)))` per row: `R x C -> R x 1`.
    pub fn log_sum_exp_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        if cols == 0 {
            return Err(Error::Param("log_sum_exp_rows over zero columns".into()));
        }
        let mut out = Vec::with_capacity(rows);
        let mut softmax = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for c in 0..cols {
                softmax[r * cols + c] = (row[c] - m).exp() / s;
            }
            out.push(m + s.ln());
        }
        let op = Op::LogSumExpRows {
            x,
            softmax: Tensor::from_raw(rows, cols, softmax),
        };
        self.push(Tensor::from_raw(rows, 1, out), op, "log_sum_exp_rows")
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x), "exp")
    }

    /// Divide every entry of `x` by the `1 x 1` node `s`.
    pub fn div_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.shape(s) != (1, 1) {
            return Err(Error::Shape {
                op: "div_scalar",
                left: self.shape(x),
                right: self.shape(s),
            });
        }
        let d = self.value(s).get(0, 0);
        let v = self.value(x).map(|a| a / d);
        self.push(v, Op::DivScalar(x, s), "div_scalar")
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(Error::NonScalarRoot(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(1, 1));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut send = |id: NodeId, contrib: Tensor| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    send(*a, g.matmul(&self.value(*b).transpose())?);
                }
                if wants(*b) {
                    send(*b, self.value(*a).transpose().matmul(g)?);
                }
            }
            Op::Transpose(x) => send(*x, g.transpose()),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Subtract(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Scale(x, c) => send(*x, g.scale(*c)),
            Op::Hadamard(a, b) => {
                if wants(*a) {
                    send(*a, g.hadamard(self.value(*b))?);
                }
                if wants(*b) {
                    send(*b, g.hadamard(self.value(*a))?);
                }
            }
            Op::SafeSqrt(x) => {
                let y = &node.value;
                let data: Vec<f64> = g.data().iter().zip(y.data()).map(|(g, y)| g / (2.0 * y)).collect();
                let t = Tensor::from_raw(y.rows(), y.cols(), data);
                if !t.is_finite() {
                    return Err(Error::NonFinite { op: "safe_sqrt backward" });
                }
                send(*x, t);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                send(*x, Tensor::from_raw(xv.rows(), xv.cols(), data));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (rows, n) = normalized.shape();
                let gv = self.value(*gain).data();
                if wants(*gain) || wants(*bias) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for r in 0..rows {
                        for c in 0..n {
                            dg[c] += g.get(r, c) * normalized.get(r, c);
                            db[c] += g.get(r, c);
                        }
                    }
                    send(*gain, Tensor::from_raw(1, n, dg));
                    send(*bias, Tensor::from_raw(1, n, db));
                }
                if wants(*x) {
                    let mut dx = vec![0.0; rows * n];
                    for r in 0..rows {
                        let dxh: Vec<f64> = (0..n).map(|c| g.get(r, c) * gv[c]).collect();
                        let mean_dxh = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dxh_xh =
                            (0..n).map(|c| dxh[c] * normalized.get(r, c)).sum::<f64>() / n as f64;
                        for c in 0..n {
                            dx[r * n + c] =
                                inv_std[r] * (dxh[c] - mean_dxh - normalized.get(r, c) * mean_dxh_xh);
                        }
                    }
                    send(*x, Tensor::from_raw(rows, n, dx));
                }
            }
            Op::L2Normalize { x, inv_norm } => {
                let y = &node.value;
                let (rows, n) = y.shape();
                let mut dx = vec![0.0; rows * n];
                for r in 0..rows {
                    let dot: f64 = (0..n).map(|c| g.get(r, c) * y.get(r, c)).sum();
                    for c in 0..n {
                        dx[r * n + c] = inv_norm[r] * (g.get(r, c) - y.get(r, c) * dot);
                    }
                }
                send(*x, Tensor::from_raw(rows, n, dx));
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    dx.extend(g.data().iter().map(|v| v / rows as f64));
                }
                send(*x, Tensor::from_raw(rows, cols, dx));
            }
            Op::ConcatCols(xs) => {
                let rows = g.rows();
                let mut offset = 0;
                for &x in xs {
                    let w = self.shape(x).1;
                    if wants(x) {
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        send(x, Tensor::from_raw(rows, w, part));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let h = self.shape(x).0;
                    if wants(x) {
                        send(x, g.slice_rows(offset, h)?);
                    }
                    offset += h;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.shape(*x);
                let w = g.cols();
                let mut dx = Tensor::zeros(rows, cols);
                let d = dx.data_mut();
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                send(*x, dx);
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Tensor::zeros(rows, cols);
                dx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                send(*x, dx);
            }
            Op::TriuVec(x) => {
                let k = self.shape(*x).0;
                let mut dx = Tensor::zeros(k, k);
                let d = dx.data_mut();
                let mut idx = 0;
                for i in 0..k {
                    for j in i..k {
                        d[i * k + j] = g.data()[idx];
                        idx += 1;
                    }
                }
                send(*x, dx);
            }
            Op::SumAll(x) => {
                let (r, c) = self.shape(*x);
                send(*x, Tensor::filled(r, c, g.get(0, 0)));
            }
            Op::LogSumExpRows { x, softmax } => {
                let (rows, cols) = softmax.shape();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] = g.get(r, 0) * softmax.get(r, c);
                    }
                }
                send(*x, Tensor::from_raw(rows, cols, dx));
            }
            Op::Exp(x) => send(*x, g.hadamard(&node.value)?),
            Op::DivScalar(x, s) => {
                let sv = self.value(*s).get(0, 0);
                if wants(*x) {
                    send(*x, g.scale(1.0 / sv));
                }
                if wants(*s) {
                    // d(x/s)/ds = -x/s^2 = -y/s
                    let ds: f64 = g.data().iter().zip(node.value.data()).map(|(g, y)| g * y).sum();
                    send(*s, Tensor::from_raw(1, 1, vec![-ds / sv]));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn safe_sqrt_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![4.0, 0.0, 1.0]]));
        let y = tape.safe_sqrt(x, 0.0).unwrap();
        assert_eq!(tape.value(y).data()[0], 2.0);
        let mut tape2 = Tape::new();
        let z = tape2.leaf(Tensor::scalar(0.0).unwrap());
        let w = tape2.safe_sqrt(z, 1e-8).unwrap();
        assert!((tape2.value(w).get(0, 0) - 1e-4).abs() < 1e-18);

        let mut tape3 = Tape::new();
        let one = tape3.leaf(Tensor::scalar(1.0).unwrap());
        let s = tape3.safe_sqrt(one, 0.0).unwrap();
        let g = tape3.backward(s).unwrap();
        assert_eq!(g.get(one).unwrap().get(0, 0), 0.5);
    }

    #[test]
    fn safe_sqrt_clamps_rounding_negatives_and_rejects_negative_eps() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![-1e-16]]));
        let y = tape.safe_sqrt(x, 0.0).unwrap();
        assert_eq!(tape.value(y).get(0, 0), 0.0);
        assert!(matches!(tape.safe_sqrt(x, -1.0), Err(Error::Param(_))));
    }

    #[test]
    fn sqrt_root_gradient_at_four() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![4.0]]));
        let y = tape.safe_sqrt(x, 0.0).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().get(0, 0), 0.25);
    }

    #[test]
    fn layer_norm_hand_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![1.0, 2.0, 3.0]]));
        let g = tape.leaf(Tensor::ones(1, 3));
        let b = tape.leaf(Tensor::zeros(1, 3));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let expect = 1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
        let v = tape.value(y).data();
        assert!((v[0] + expect).abs() < 1e-12);
        assert_eq!(v[1], 0.0);
        assert!((v[2] - expect).abs() < 1e-12);
        assert!((v[0] + 1.22474).abs() < 1e-5);

        for c in [0.0, 3.5, -12.0] {
            let x = tape.leaf(Tensor::filled(1, 3, c));
            let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
            assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn layer_norm_length_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(1, 3));
        let g = tape.leaf(Tensor::ones(1, 2));
        let b = tape.leaf(Tensor::zeros(1, 3));
        assert!(matches!(tape.layer_norm(x, g, b, 1e-5), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_b_transpose() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
        let bt = t(&[vec![1.0, -1.0], vec![0.5, 2.0], vec![3.0, 0.0]]);
        let b = tape.leaf(bt.clone());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum_all(c).unwrap();
        let g = tape.backward(s).unwrap();
        let expect = Tensor::ones(2, 2).matmul(&bt.transpose()).unwrap();
        assert_eq!(g.get(a).unwrap(), &expect);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::ones(2, 2));
        assert!(matches!(tape.backward(a), Err(Error::NonScalarRoot((2, 2)))));
    }

    #[test]
    fn fan_out_accumulates() {
        // f(x) = sum(x * x) through one node consumed twice.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![1.0, -2.0, 3.0]]));
        let y = tape.hadamard(x, x).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn split_then_concat_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]));
        let parts = tape.split_cols(x, 2).unwrap();
        assert_eq!(tape.value(parts[1]).data(), &[3.0, 4.0, 7.0, 8.0]);
        let back = tape.concat_cols(&parts).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        let w = tape.constant(t(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]));
        let p = tape.hadamard(back, w).unwrap();
        let s = tape.sum_all(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), tape.value(w));
        assert!(g.get(w).is_none());
    }

    #[test]
    fn row_slices_then_concat_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let top = tape.slice_rows(x, 0, 1).unwrap();
        let rest = tape.slice_rows(x, 1, 2).unwrap();
        assert_eq!(tape.value(rest).data(), &[3.0, 4.0, 5.0, 6.0]);
        let back = tape.concat_rows(&[top, rest]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        let w = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let p = tape.hadamard(back, w).unwrap();
        let s = tape.sum_all(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), tape.value(w));
        assert!(tape.slice_rows(x, 2, 2).is_err());
    }

    #[test]
    fn split_rejects_indivisible() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(2, 5));
        assert!(matches!(tape.split_cols(x, 2), Err(Error::Config(_))));
    }

    #[test]
    fn triu_vec_layout() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]]));
        let v = tape.triu_vec(x).unwrap();
        assert_eq!(tape.value(v).data(), &[1.0, 2.0, 3.0, 5.0, 6.0, 9.0]);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![1000.0, 1000.0]]));
        let y = tape.log_sum_exp_rows(x).unwrap();
        assert!((tape.value(y).get(0, 0) - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
