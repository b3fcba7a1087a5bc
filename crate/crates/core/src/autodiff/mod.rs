//! Computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of [`Node`]s. Leaves are either
//! constants (value stored in the graph) or parameters (value supplied through
//! [`Graph::bind`]). [`Graph::grad`] does not compute numbers: it appends new
//! nodes that express the gradient in terms of the same primitives, so the
//! result can be differentiated again.
//!
//! Besides the primitives needed by the models, the graph carries a handful
//! of auxiliary primitives (`transpose`, `div`, `step`, `slice`,
//! `clamp_min`, `row_inv_norm`, `col2im`). They exist so every backward rule
//! can be written as a composition of graph primitives.

mod backward;
mod check;
mod kernels;

pub use check::{finite_diff, relative_error};

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operation tags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Constant,
    Parameter,
    Add,
    Sub,
    Mul,
    Div,
    /// `[n, k] x [k, m] -> [n, m]`.
    MatMul,
    /// Swaps the first two axes; trailing axes move as a block.
    Transpose,
    Sum {
        axis: usize,
    },
    Mean {
        axis: usize,
    },
    /// Right-aligned broadcast to the node's shape; source dims equal or 1.
    Broadcast,
    Reshape,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
    },
    Relu,
    /// `1` where the input exceeds `threshold`, else `0`. Not differentiable.
    Step {
        threshold: f64,
    },
    Exp,
    Log,
    Sqrt,
    ClampMin {
        floor: f64,
    },
    Softmax {
        axis: usize,
    },
    /// Per-row `-sum(target * log_softmax(logits))`; targets are constants.
    CrossEntropyWithLogits,
    /// Pairwise row cosines `[n, d] x [m, d] -> [n, m]`; zero rows give 0.
    CosineSimilarity,
    /// `1 / ||row||` per row of a matrix, `0` for a zero row.
    RowInvNorm,
    /// `[b, c, h, w] -> [c*kh*kw, b*oh*ow]` (stride 1, no padding).
    Im2Col {
        kh: usize,
        kw: usize,
    },
    /// Adjoint of [`Op::Im2Col`]; scatters columns back with summation.
    Col2Im {
        kh: usize,
        kw: usize,
    },
    /// Index of the maximum (lowest on ties). Not differentiable.
    ArgMax {
        axis: usize,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Parameter => "parameter",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Broadcast => "broadcast",
            Op::Reshape => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Relu => "relu",
            Op::Step { .. } => "step",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::ClampMin { .. } => "clamp_min",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropyWithLogits => "cross_entropy_with_logits",
            Op::CosineSimilarity => "cosine_similarity",
            Op::RowInvNorm => "row_inv_norm",
            Op::Im2Col { .. } => "im2col",
            Op::Col2Im { .. } => "col2im",
            Op::ArgMax { .. } => "argmax",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    /// Index into the constant or name table for leaves.
    slot: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    constants: Vec<Tensor>,
    names: Vec<String>,
    parameters: BTreeSet<NodeId>,
    bindings: BTreeMap<NodeId, Tensor>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, detail: String) -> Error {
    Error::InvalidShape { op, detail }
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn parameters(&self) -> &BTreeSet<NodeId> {
        &self.parameters
    }

    /// Name of a parameter leaf.
    pub fn name(&self, id: NodeId) -> Option<&str> {
        let node = &self.nodes[id.0];
        (node.op == Op::Parameter).then(|| self.names[node.slot].as_str())
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(id.0))
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        self.push_leaf(op, inputs, shape, 0)
    }

    fn push_leaf(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, slot: usize) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            slot,
        });
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let slot = self.constants.len();
        let shape = value.shape().to_vec();
        self.constants.push(value);
        self.push_leaf(Op::Constant, Vec::new(), shape, slot)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn full(&mut self, shape: &[usize], value: f64) -> NodeId {
        self.constant(Tensor::full(shape, value))
    }

    /// Declares a trainable leaf; its value comes from [`Graph::bind`].
    pub fn parameter(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let slot = self.names.len();
        self.names.push(name.to_string());
        let id = self.push_leaf(Op::Parameter, Vec::new(), shape.to_vec(), slot);
        self.parameters.insert(id);
        id
    }

    /// Declares a parameter leaf and binds it in one step.
    pub fn parameter_with(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.parameter(name, value.shape());
        self.bindings.insert(id, value);
        id
    }

    pub fn bind(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        self.check(id)?;
        let node = &self.nodes[id.0];
        if node.op != Op::Parameter {
            return Err(invalid("bind", format!("node {} is not a parameter", id.0)));
        }
        if node.shape != value.shape() {
            return Err(mismatch("bind", &node.shape, value.shape()));
        }
        self.bindings.insert(id, value);
        Ok(())
    }

    pub fn binding(&self, id: NodeId) -> Option<&Tensor> {
        self.bindings.get(&id)
    }

    fn elementwise(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op.name(), sa, sb));
        }
        let shape = sa.to_vec();
        Ok(self.push(op, vec![a, b], shape))
    }

    fn unary(&mut self, op: Op, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(op, vec![x], shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Op::Div, a, b)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul, vec![a, b], shape))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(invalid("transpose", format!("needs rank >= 2, got {s:?}")));
        }
        let mut shape = s.to_vec();
        shape.swap(0, 1);
        Ok(self.push(Op::Transpose, vec![x], shape))
    }

    fn reduced_shape(&self, op: &'static str, x: NodeId, axis: usize) -> Result<Vec<usize>> {
        self.check(x)?;
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(invalid(op, format!("axis {axis} out of range for {s:?}")));
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        Ok(shape)
    }

    /// Sum along `axis`, dropping it.
    pub fn sum(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.reduced_shape("sum", x, axis)?;
        Ok(self.push(Op::Sum { axis }, vec![x], shape))
    }

    /// Mean along `axis`, dropping it.
    pub fn mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.reduced_shape("mean", x, axis)?;
        Ok(self.push(Op::Mean { axis }, vec![x], shape))
    }

    pub fn broadcast(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let s = self.shape(x);
        let compatible = s.len() <= shape.len()
            && s.iter()
                .rev()
                .zip(shape.iter().rev())
                .all(|(&from, &to)| from == to || from == 1);
        if !compatible {
            return Err(mismatch("broadcast", s, shape));
        }
        if s == shape {
            return Ok(x);
        }
        Ok(self.push(Op::Broadcast, vec![x], shape.to_vec()))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let s = self.shape(x);
        if numel(s) != numel(shape) || shape.contains(&0) {
            return Err(mismatch("reshape", s, shape));
        }
        if s == shape {
            return Ok(x);
        }
        Ok(self.push(Op::Reshape, vec![x], shape.to_vec()))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *parts.first().ok_or(Error::Empty("concat inputs"))?;
        self.check(first)?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &p in parts {
            self.check(p)?;
            let s = self.shape(p);
            let same_rank = s.len() == base.len();
            if !same_rank
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), shape))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.check(x)?;
        let s = self.shape(x);
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        Ok(self.push(Op::Slice { axis, start }, vec![x], shape))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu, x)
    }

    pub fn step(&mut self, x: NodeId, threshold: f64) -> Result<NodeId> {
        self.unary(Op::Step { threshold }, x)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Exp, x)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Log, x)
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Sqrt, x)
    }

    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        self.unary(Op::ClampMin { floor }, x)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check(x)?;
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(invalid(
                "softmax",
                format!("axis {axis} out of range for {s:?}"),
            ));
        }
        let shape = s.to_vec();
        Ok(self.push(Op::Softmax { axis }, vec![x], shape))
    }

    /// Per-row cross-entropy of `logits` `[n, c]` against target
    /// distributions `targets` `[n, c]`; returns `[n]`.
    pub fn cross_entropy_with_logits(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.check(logits)?;
        self.check(targets)?;
        let (sl, st) = (self.shape(logits), self.shape(targets));
        if sl.len() != 2 || sl != st {
            return Err(mismatch("cross_entropy_with_logits", sl, st));
        }
        let shape = vec![sl[0]];
        Ok(self.push(Op::CrossEntropyWithLogits, vec![logits, targets], shape))
    }

    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(mismatch("cosine_similarity", sa, sb));
        }
        let shape = vec![sa[0], sb[0]];
        Ok(self.push(Op::CosineSimilarity, vec![a, b], shape))
    }

    pub fn row_inv_norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(invalid(
                "row_inv_norm",
                format!("needs a matrix, got {s:?}"),
            ));
        }
        let shape = vec![s[0]];
        Ok(self.push(Op::RowInvNorm, vec![x], shape))
    }

    pub fn im2col(&mut self, x: NodeId, kh: usize, kw: usize) -> Result<NodeId> {
        self.check(x)?;
        let s = self.shape(x);
        if s.len() != 4 || kh == 0 || kw == 0 || kh > s[2] || kw > s[3] {
            return Err(mismatch("im2col", s, &[kh, kw]));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let shape = vec![c * kh * kw, b * (h - kh + 1) * (w - kw + 1)];
        Ok(self.push(Op::Im2Col { kh, kw }, vec![x], shape))
    }

    /// Scatters `[c*kh*kw, b*oh*ow]` columns into an image of `image_shape`.
    pub fn col2im(
        &mut self,
        cols: NodeId,
        image_shape: &[usize],
        kh: usize,
        kw: usize,
    ) -> Result<NodeId> {
        self.check(cols)?;
        let s = self.shape(cols);
        let ok = image_shape.len() == 4
            && kh >= 1
            && kw >= 1
            && kh <= image_shape[2]
            && kw <= image_shape[3]
            && s.len() == 2
            && s[0] == image_shape[1] * kh * kw
            && s[1] == image_shape[0] * (image_shape[2] - kh + 1) * (image_shape[3] - kw + 1);
        if !ok {
            return Err(mismatch("col2im", s, image_shape));
        }
        Ok(self.push(Op::Col2Im { kh, kw }, vec![cols], image_shape.to_vec()))
    }

    pub fn argmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.reduced_shape("argmax", x, axis)?;
        Ok(self.push(Op::ArgMax { axis }, vec![x], shape))
    }

    /// Stride-1, unpadded cross-correlation of `[b, c, h, w]` with
    /// `[oc, c, kh, kw]`, giving `[b, oc, h-kh+1, w-kw+1]`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        self.check(input)?;
        self.check(kernel)?;
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || sk[2] > si[2] || sk[3] > si[3] {
            return Err(mismatch("conv2d", &si, &sk));
        }
        let (b, oc, kh, kw) = (si[0], sk[0], sk[2], sk[3]);
        let (oh, ow) = (si[2] - kh + 1, si[3] - kw + 1);
        let cols = self.im2col(input, kh, kw)?;
        let flat_kernel = self.reshape(kernel, &[oc, sk[1] * kh * kw])?;
        let out = self.matmul(flat_kernel, cols)?;
        let out = self.reshape(out, &[oc, b, oh * ow])?;
        let out = self.transpose(out)?;
        self.reshape(out, &[b, oc, oh, ow])
    }

    /// `x * c` for a scalar constant `c`.
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        let k = self.full(&shape, c);
        self.mul(x, k)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.scale(x, -1.0)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_keep(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let mut keep = self.shape(x).to_vec();
        let reduced = self.sum(x, axis)?;
        keep[axis] = 1;
        self.reshape(reduced, &keep)
    }

    /// Sum of every element, as a rank-0 node.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = numel(self.shape(x));
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    /// Mean of every element, as a rank-0 node.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = numel(self.shape(x));
        let flat = self.reshape(x, &[n])?;
        self.mean(flat, 0)
    }

    /// Sums a broadcast result back down to `shape` (adjoint of broadcast).
    pub fn reduce_to(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let mut cur = x;
        let rank = self.shape(x).len();
        if shape.len() > rank {
            return Err(mismatch("reduce_to", self.shape(x), shape));
        }
        for _ in 0..rank - shape.len() {
            cur = self.sum(cur, 0)?;
        }
        for (axis, &dim) in shape.iter().enumerate() {
            if dim == 1 && self.shape(cur)[axis] != 1 {
                cur = self.sum_keep(cur, axis)?;
            }
        }
        if self.shape(cur) != shape {
            return Err(mismatch("reduce_to", self.shape(cur), shape));
        }
        Ok(cur)
    }

    /// Evaluates `outputs` using the current bindings.
    pub fn eval(&self, outputs: &[NodeId]) -> Result<Vec<Tensor>> {
        self.evaluate(outputs, None)
    }

    /// Evaluates with one parameter temporarily replaced.
    pub(crate) fn evaluate(
        &self,
        outputs: &[NodeId],
        replace: Option<(NodeId, &Tensor)>,
    ) -> Result<Vec<Tensor>> {
        for &o in outputs {
            self.check(o)?;
        }
        let last = match outputs.iter().map(|o| o.0).max() {
            Some(last) => last,
            None => return Ok(Vec::new()),
        };
        let mut needed = vec![false; last + 1];
        for &o in outputs {
            needed[o.0] = true;
        }
        for i in (0..=last).rev() {
            if needed[i] {
                for input in &self.nodes[i].inputs {
                    needed[input.0] = true;
                }
            }
        }
        let mut values: Vec<Option<Tensor>> = vec![None; last + 1];
        for i in 0..=last {
            if !needed[i] {
                continue;
            }
            let node = &self.nodes[i];
            let value = match node.op {
                Op::Constant => self.constants[node.slot].clone(),
                Op::Parameter => {
                    let id = NodeId(i);
                    match replace {
                        Some((r, t)) if r == id => t.clone(),
                        _ => self
                            .bindings
                            .get(&id)
                            .cloned()
                            .ok_or_else(|| Error::Unbound {
                                node: i,
                                name: self.names[node.slot].clone(),
                            })?,
                    }
                }
                op => {
                    let args: Vec<&Tensor> = node
                        .inputs
                        .iter()
                        .map(|id| {
                            values[id.0]
                                .as_ref()
                                .expect("inputs precede their consumers")
                        })
                        .collect();
                    kernels::forward(op, &args, &node.shape)?
                }
            };
            values[i] = Some(value);
        }
        Ok(outputs
            .iter()
            .map(|o| values[o.0].clone().expect("outputs evaluated"))
            .collect())
    }

    /// Appends nodes computing `d loss / d w` for each `w` in `wrt`.
    ///
    /// The returned nodes are ordinary graph nodes and may themselves be
    /// differentiated. A `w` with no path to `loss` gets a zero constant.
    pub fn grad(&mut self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        backward::grad(self, loss, wrt)
    }
}
