//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Every vector-Jacobian product is itself recorded as graph operations, so a
//! gradient returned by [`Graph::grad_wrt`] or [`Graph::backward`] is an
//! ordinary node: losses built from gradients can be differentiated again.

use super::tensor::{self, numel, Tensor, PROB_CLAMP};
use super::{AutodiffError, Result};
use std::collections::BTreeMap;

/// Handle to a node of one [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Op {
    Leaf,
    MatMul { ta: bool, tb: bool },
    Add,
    Sub,
    Mul,
    Div,
    /// `[n, m] + [m]` with the right operand repeated on every row.
    AddRow,
    /// `scale * x + shift`
    Affine { scale: f64, shift: f64 },
    Relu,
    /// Heaviside step `x > 0`; has zero derivative.
    Step,
    Sigmoid,
    Square,
    Sqrt,
    Ln,
    Clamp { lo: f64, hi: f64 },
    ConcatCols,
    SliceCols { start: usize, end: usize },
    PadCols { start: usize, total: usize },
    SumRows { out_shape: Vec<usize> },
    BroadcastRows { rows: usize },
    SumCols,
    BroadcastCols { cols: usize },
    Sum { out_shape: Vec<usize> },
    BroadcastScalar { shape: Vec<usize> },
    /// Elementwise cross-entropy of clamped probabilities.
    Bce,
    /// Elementwise cross-entropy of `sigmoid(logit)`; the reported value uses
    /// the clamped probability, the derivative is `sigmoid(x) - t`.
    BceLogits,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "divide",
            Op::AddRow => "add_row",
            Op::Affine { .. } => "affine",
            Op::Relu => "relu",
            Op::Step => "step",
            Op::Sigmoid => "sigmoid",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Ln => "ln",
            Op::Clamp { .. } => "clamp",
            Op::ConcatCols => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
            Op::SumRows { .. } => "sum_rows",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::SumCols => "sum_cols",
            Op::BroadcastCols { .. } => "broadcast_cols",
            Op::Sum { .. } => "sum",
            Op::BroadcastScalar { .. } => "broadcast_scalar",
            Op::Bce => "bce",
            Op::BceLogits => "bce_logits",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Public operation kinds accepted by [`Graph::forward_op`].
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum OpKind {
    Matmul,
    Add,
    Relu,
    Sigmoid,
    Concat,
    Dot,
    L2Norm,
    Scale(f64),
    Sub,
    Square,
    Divide,
    Bce,
}

/// Gradients of one scalar with respect to a set of leaves, as graph nodes.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<NodeId, NodeId>,
}

impl GradientMap {
    /// Node holding the gradient for `leaf`.
    pub fn get(&self, leaf: NodeId) -> Option<NodeId> {
        self.grads.get(&leaf).copied()
    }

    pub fn value<'g>(&self, graph: &'g Graph, leaf: NodeId) -> Option<&'g Tensor> {
        self.get(leaf).map(|g| graph.value(g))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.grads.iter().map(|(k, v)| (*k, *v))
    }
}

/// Result of [`Graph::grad_wrt`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct GradWrt {
    pub node: NodeId,
    /// `false` when the target is not an ancestor of the scalar; the node is then a zero tensor.
    pub reachable: bool,
}

/// Append-only record of operations. Insertion order is a topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Operation name of a node, for diagnostics.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let requires_grad = !matches!(op, Op::Step) && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, inputs, value, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Trainable leaf; included in [`Graph::backward`] results.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, true)
    }

    /// Non-trainable leaf (data, targets, constants).
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    /// Copy of a node's current value as a constant, cutting gradient flow.
    pub fn detach(&mut self, id: NodeId) -> Result<NodeId> {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    // ----- primitive operations -------------------------------------------------

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = tensor::matmul(va, vb, ta, tb).ok_or_else(|| mismatch("matmul", va, vb))?;
        self.push(Op::MatMul { ta, tb }, vec![a, b], out)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(op.name(), va, vb));
        }
        let out = va.zip_map(vb, f);
        self.push(op, vec![a, b], out)
    }

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let out = self.value(a).map(f);
        self.push(op, vec![a], out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    /// Adds a bias vector of length `m` to every row of an `[n, m]` matrix.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let Some((n, m)) = vx.dims2() else { return Err(mismatch("add_row", vx, vb)) };
        if vb.len() != m {
            return Err(mismatch("add_row", vx, vb));
        }
        let mut out = vx.clone();
        let b = vb.data();
        for r in 0..n {
            for (o, bv) in out.data_mut()[r * m..(r + 1) * m].iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push(Op::AddRow, vec![x, bias], out)
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.unary(Op::Affine { scale, shift }, x, |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.affine(x, c, 0.0)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.affine(x, -1.0, 0.0)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu, x, |v| v.max(0.0))
    }

    pub fn step(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Step, x, |v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid, x, tensor::sigmoid)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Square, x, |v| v * v)
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Sqrt, x, f64::sqrt)
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Ln, x, f64::ln)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.unary(Op::Clamp { lo, hi }, x, |v| v.clamp(lo, hi))
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (Some((ra, ca)), Some((rb, cb))) = (va.dims2(), vb.dims2()) else {
            return Err(mismatch("concat", va, vb));
        };
        if ra != rb {
            return Err(mismatch("concat", va, vb));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&va.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&vb.data()[r * cb..(r + 1) * cb]);
        }
        let out = Tensor::from_vec(&[ra, ca + cb], data);
        self.push(Op::ConcatCols, vec![a, b], out)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let Some((r, c)) = vx.dims2() else { return Err(mismatch("slice_cols", vx, vx)) };
        if start > end || end > c {
            return Err(AutodiffError::ShapeMismatch { op: "slice_cols", lhs: vx.shape().to_vec(), rhs: vec![start, end] });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&vx.data()[i * c + start..i * c + end]);
        }
        self.push(Op::SliceCols { start, end }, vec![x], Tensor::from_vec(&[r, w], data))
    }

    /// Embeds `[n, w]` into zeros of `[n, total]` starting at column `start`.
    pub fn pad_cols(&mut self, x: NodeId, start: usize, total: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let Some((r, w)) = vx.dims2() else { return Err(mismatch("pad_cols", vx, vx)) };
        if start + w > total {
            return Err(AutodiffError::ShapeMismatch { op: "pad_cols", lhs: vx.shape().to_vec(), rhs: vec![start, total] });
        }
        let mut data = vec![0.0; r * total];
        for i in 0..r {
            data[i * total + start..i * total + start + w].copy_from_slice(&vx.data()[i * w..(i + 1) * w]);
        }
        self.push(Op::PadCols { start, total }, vec![x], Tensor::from_vec(&[r, total], data))
    }

    /// Column sums of an `[n, m]` matrix, reshaped to `out_shape` (which must hold `m` values).
    pub fn sum_rows_as(&mut self, x: NodeId, out_shape: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        let Some((n, m)) = vx.dims2() else { return Err(mismatch("sum_rows", vx, vx)) };
        if numel(out_shape) != m {
            return Err(AutodiffError::ShapeMismatch { op: "sum_rows", lhs: vx.shape().to_vec(), rhs: out_shape.to_vec() });
        }
        let mut acc = vec![0.0; m];
        for r in 0..n {
            for (a, v) in acc.iter_mut().zip(&vx.data()[r * m..(r + 1) * m]) {
                *a += v;
            }
        }
        let out = Tensor::from_vec(out_shape, acc);
        self.push(Op::SumRows { out_shape: out_shape.to_vec() }, vec![x], out)
    }

    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let m = self.value(x).dims2().map_or(0, |d| d.1);
        self.sum_rows_as(x, &[1, m])
    }

    /// Repeats an `m`-element tensor as each of `rows` rows.
    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let m = vx.len();
        let mut data = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            data.extend_from_slice(vx.data());
        }
        self.push(Op::BroadcastRows { rows }, vec![x], Tensor::from_vec(&[rows, m], data))
    }

    /// Row sums: `[n, m] -> [n, 1]`.
    pub fn sum_cols(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let Some((n, m)) = vx.dims2() else { return Err(mismatch("sum_cols", vx, vx)) };
        let data = (0..n).map(|r| vx.data()[r * m..(r + 1) * m].iter().sum()).collect();
        self.push(Op::SumCols, vec![x], Tensor::from_vec(&[n, 1], data))
    }

    /// `[n, 1] -> [n, cols]`.
    pub fn broadcast_cols(&mut self, x: NodeId, cols: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let Some((n, 1)) = vx.dims2() else { return Err(mismatch("broadcast_cols", vx, vx)) };
        let mut data = Vec::with_capacity(n * cols);
        for &v in vx.data() {
            data.extend(std::iter::repeat_n(v, cols));
        }
        self.push(Op::BroadcastCols { cols }, vec![x], Tensor::from_vec(&[n, cols], data))
    }

    pub fn sum_as(&mut self, x: NodeId, out_shape: &[usize]) -> Result<NodeId> {
        if numel(out_shape) != 1 {
            return Err(AutodiffError::ShapeMismatch { op: "sum", lhs: self.shape(x).to_vec(), rhs: out_shape.to_vec() });
        }
        let s = self.value(x).sum();
        self.push(Op::Sum { out_shape: out_shape.to_vec() }, vec![x], Tensor::from_vec(out_shape, vec![s]))
    }

    /// Sum of all elements as a shape-`[]` scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.sum_as(x, &[])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(AutodiffError::ShapeMismatch { op: "mean", lhs: self.shape(x).to_vec(), rhs: vec![] });
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn broadcast_scalar(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        let Some(v) = vx.item() else { return Err(mismatch("broadcast_scalar", vx, vx)) };
        self.push(Op::BroadcastScalar { shape: shape.to_vec() }, vec![x], Tensor::full(shape, v))
    }

    /// Elementwise cross-entropy of probabilities `p` (clamped) against targets `t`.
    pub fn bce(&mut self, p: NodeId, t: NodeId) -> Result<NodeId> {
        self.binary(Op::Bce, p, t, tensor::bce)
    }

    /// Elementwise cross-entropy of `sigmoid(logits)` against targets.
    pub fn bce_logits(&mut self, logits: NodeId, t: NodeId) -> Result<NodeId> {
        self.binary(Op::BceLogits, logits, t, |x, y| tensor::bce(tensor::sigmoid(x), y))
    }

    // ----- composites --------------------------------------------------------------

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let m = self.mul(a, b)?;
        self.sum(m)
    }

    /// Euclidean norm of all elements.
    pub fn l2norm(&mut self, x: NodeId) -> Result<NodeId> {
        let sq = self.square(x)?;
        let s = self.sum(sq)?;
        self.sqrt(s)
    }

    /// Dispatch by kind, for table-driven callers.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = match kind {
            OpKind::Relu | OpKind::Sigmoid | OpKind::L2Norm | OpKind::Scale(_) | OpKind::Square => 1,
            _ => 2,
        };
        if inputs.len() != arity {
            return Err(AutodiffError::Arity { op: format!("{kind:?}"), expected: arity, got: inputs.len() });
        }
        let (a, b) = (inputs[0], inputs.get(1).copied().unwrap_or(inputs[0]));
        match kind {
            OpKind::Matmul => self.matmul(a, b),
            OpKind::Add => {
                if self.shape(a) != self.shape(b) && self.value(a).dims2().is_some() && self.shape(b).len() == 1 {
                    self.add_row(a, b)
                } else {
                    self.add(a, b)
                }
            }
            OpKind::Relu => self.relu(a),
            OpKind::Sigmoid => self.sigmoid(a),
            OpKind::Concat => self.concat(a, b),
            OpKind::Dot => self.dot(a, b),
            OpKind::L2Norm => self.l2norm(a),
            OpKind::Scale(c) => self.scale(a, c),
            OpKind::Sub => self.sub(a, b),
            OpKind::Square => self.square(a),
            OpKind::Divide => self.div(a, b),
            OpKind::Bce => self.bce(a, b),
        }
    }

    // ----- differentiation ---------------------------------------------------------

    /// Gradients of `root` with respect to each target, built as graph nodes.
    /// `None` marks a target that `root` does not depend on.
    pub fn gradients(&mut self, root: NodeId, targets: &[NodeId]) -> Result<Vec<Option<NodeId>>> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(root_val.shape().to_vec()));
        }
        let n = root.0 + 1;
        let mut depends = vec![false; n];
        for t in targets {
            if t.0 < n {
                depends[t.0] = true;
            }
        }
        for i in 0..n {
            if !depends[i] && self.nodes[i].inputs.iter().any(|j| depends[j.0]) {
                depends[i] = true;
            }
        }
        let mut ancestor = vec![false; n];
        ancestor[root.0] = true;
        for i in (0..n).rev() {
            if ancestor[i] {
                for j in &self.nodes[i].inputs {
                    ancestor[j.0] = true;
                }
            }
        }

        let mut grads: Vec<Option<NodeId>> = vec![None; n];
        if depends[root.0] {
            let seed = Tensor::full(root_val.shape(), 1.0);
            grads[root.0] = Some(self.constant(seed)?);
        }
        for i in (0..n).rev() {
            if !(ancestor[i] && depends[i]) {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let inputs = self.nodes[i].inputs.clone();
            if inputs.is_empty() {
                continue;
            }
            let need: Vec<bool> = inputs.iter().map(|j| depends[j.0]).collect();
            let contribs = self.vjp(NodeId(i), g, &need)?;
            for (j, c) in inputs.iter().zip(contribs) {
                if let Some(c) = c {
                    grads[j.0] = Some(match grads[j.0] {
                        None => c,
                        Some(prev) => self.add(prev, c)?,
                    });
                }
            }
        }
        Ok(targets.iter().map(|t| if t.0 < n { grads[t.0] } else { None }).collect())
    }

    /// Gradient of a scalar node with respect to any node, as a differentiable node.
    pub fn grad_wrt(&mut self, root: NodeId, target: NodeId) -> Result<GradWrt> {
        match self.gradients(root, &[target])?[0] {
            Some(node) => Ok(GradWrt { node, reachable: true }),
            None => {
                let z = Tensor::zeros(self.shape(target));
                Ok(GradWrt { node: self.constant(z)?, reachable: false })
            }
        }
    }

    /// Gradients of a scalar with respect to every trainable leaf. Leaves the
    /// scalar does not depend on get zero tensors.
    pub fn backward(&mut self, root: NodeId) -> Result<GradientMap> {
        let leaves: Vec<NodeId> = (0..self.nodes.len())
            .filter(|&i| self.nodes[i].op == Op::Leaf && self.nodes[i].requires_grad)
            .map(NodeId)
            .collect();
        let found = self.gradients(root, &leaves)?;
        let mut grads = BTreeMap::new();
        for (leaf, g) in leaves.into_iter().zip(found) {
            let node = match g {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.shape(leaf));
                    self.constant(z)?
                }
            };
            if !self.value(node).is_finite() {
                return Err(AutodiffError::NonFinite { op: "backward" });
            }
            grads.insert(leaf, node);
        }
        Ok(GradientMap { grads })
    }

    /// Vector-Jacobian product of node `id` for upstream gradient `g`.
    fn vjp(&mut self, id: NodeId, g: NodeId, need: &[bool]) -> Result<Vec<Option<NodeId>>> {
        let node = &self.nodes[id.0];
        let op = node.op.clone();
        let inputs = node.inputs.clone();
        let want = |k: usize| need.get(k).copied().unwrap_or(false);
        let mut out = vec![None; inputs.len()];
        match op {
            Op::Leaf => {}
            Op::MatMul { ta, tb } => {
                let (a, b) = (inputs[0], inputs[1]);
                if want(0) {
                    out[0] = Some(if ta { self.matmul_t(b, g, tb, true)? } else { self.matmul_t(g, b, false, !tb)? });
                }
                if want(1) {
                    out[1] = Some(if tb { self.matmul_t(g, a, true, ta)? } else { self.matmul_t(a, g, !ta, false)? });
                }
            }
            Op::Add => {
                out[0] = want(0).then_some(g);
                out[1] = want(1).then_some(g);
            }
            Op::Sub => {
                out[0] = want(0).then_some(g);
                if want(1) {
                    out[1] = Some(self.neg(g)?);
                }
            }
            Op::Mul => {
                if want(0) {
                    out[0] = Some(self.mul(g, inputs[1])?);
                }
                if want(1) {
                    out[1] = Some(self.mul(g, inputs[0])?);
                }
            }
            Op::Div => {
                if want(0) {
                    out[0] = Some(self.div(g, inputs[1])?);
                }
                if want(1) {
                    let gy = self.mul(g, id)?;
                    let q = self.div(gy, inputs[1])?;
                    out[1] = Some(self.neg(q)?);
                }
            }
            Op::AddRow => {
                out[0] = want(0).then_some(g);
                if want(1) {
                    let shape = self.shape(inputs[1]).to_vec();
                    out[1] = Some(self.sum_rows_as(g, &shape)?);
                }
            }
            Op::Affine { scale, .. } => out[0] = Some(self.scale(g, scale)?),
            Op::Relu => {
                let mask = self.step(inputs[0])?;
                out[0] = Some(self.mul(g, mask)?);
            }
            Op::Step => {}
            Op::Sigmoid => {
                let one_minus = self.affine(id, -1.0, 1.0)?;
                let d = self.mul(id, one_minus)?;
                out[0] = Some(self.mul(g, d)?);
            }
            Op::Square => {
                let two_x = self.scale(inputs[0], 2.0)?;
                out[0] = Some(self.mul(g, two_x)?);
            }
            Op::Sqrt => {
                let half = self.scale(g, 0.5)?;
                out[0] = Some(self.div(half, id)?);
            }
            Op::Ln => out[0] = Some(self.div(g, inputs[0])?),
            Op::Clamp { lo, hi } => {
                let inside = self.value(inputs[0]).map(|v| if v >= lo && v <= hi { 1.0 } else { 0.0 });
                let mask = self.constant(inside)?;
                out[0] = Some(self.mul(g, mask)?);
            }
            Op::ConcatCols => {
                let wa = self.value(inputs[0]).dims2().map_or(0, |d| d.1);
                let wb = self.value(inputs[1]).dims2().map_or(0, |d| d.1);
                if want(0) {
                    out[0] = Some(self.slice_cols(g, 0, wa)?);
                }
                if want(1) {
                    out[1] = Some(self.slice_cols(g, wa, wa + wb)?);
                }
            }
            Op::SliceCols { start, .. } => {
                let total = self.value(inputs[0]).dims2().map_or(0, |d| d.1);
                out[0] = Some(self.pad_cols(g, start, total)?);
            }
            Op::PadCols { start, .. } => {
                let w = self.value(inputs[0]).dims2().map_or(0, |d| d.1);
                out[0] = Some(self.slice_cols(g, start, start + w)?);
            }
            Op::SumRows { .. } => {
                let rows = self.value(inputs[0]).dims2().map_or(0, |d| d.0);
                out[0] = Some(self.broadcast_rows(g, rows)?);
            }
            Op::BroadcastRows { .. } => {
                let shape = self.shape(inputs[0]).to_vec();
                out[0] = Some(self.sum_rows_as(g, &shape)?);
            }
            Op::SumCols => {
                let cols = self.value(inputs[0]).dims2().map_or(0, |d| d.1);
                out[0] = Some(self.broadcast_cols(g, cols)?);
            }
            Op::BroadcastCols { .. } => out[0] = Some(self.sum_cols(g)?),
            Op::Sum { .. } => {
                let shape = self.shape(inputs[0]).to_vec();
                out[0] = Some(self.broadcast_scalar(g, &shape)?);
            }
            Op::BroadcastScalar { .. } => {
                let shape = self.shape(inputs[0]).to_vec();
                out[0] = Some(self.sum_as(g, &shape)?);
            }
            Op::Bce => {
                let (p, t) = (inputs[0], inputs[1]);
                let pc = self.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
                if want(0) {
                    // d/dpc = (pc - t) / (pc (1 - pc)); the clamp node carries d pc / d p.
                    let num = self.sub(pc, t)?;
                    let one_minus = self.affine(pc, -1.0, 1.0)?;
                    let den = self.mul(pc, one_minus)?;
                    let d = self.div(num, den)?;
                    let gd = self.mul(g, d)?;
                    let inside = self.value(p).map(|v| if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&v) { 1.0 } else { 0.0 });
                    let mask = self.constant(inside)?;
                    out[0] = Some(self.mul(gd, mask)?);
                }
                if want(1) {
                    let one_minus = self.affine(pc, -1.0, 1.0)?;
                    let l1 = self.ln(one_minus)?;
                    let l0 = self.ln(pc)?;
                    let d = self.sub(l1, l0)?;
                    out[1] = Some(self.mul(g, d)?);
                }
            }
            Op::BceLogits => {
                let (x, t) = (inputs[0], inputs[1]);
                if want(0) {
                    let s = self.sigmoid(x)?;
                    let d = self.sub(s, t)?;
                    out[0] = Some(self.mul(g, d)?);
                }
                if want(1) {
                    let nx = self.neg(x)?;
                    out[1] = Some(self.mul(g, nx)?);
                }
            }
        }
        Ok(out)
    }
}
