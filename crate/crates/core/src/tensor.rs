//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every primitive eagerly as it is applied. Node ids are
//! handed out in creation order, so the node list is already topologically
//! sorted and [`Graph::backward`] is a single reverse sweep. The graph is
//! consumed by the sweep; build a fresh one for the next loss.

use std::collections::HashMap;
use std::rc::Rc;

use thiserror::Error;

/// Additive mask value standing in for negative infinity.
pub const NEG_SENTINEL: f64 = -1e30;

const LAYER_NORM_EPS: f64 = 1e-5;
const L2_FLOOR: f64 = 1e-12;

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("log of non-positive value {value} at flat index {index}")]
    NonPositiveLog { index: usize, value: f64 },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,
    #[error("tensor {0} does not belong to this graph")]
    ForeignTensor(NodeId),
    #[error("concat needs at least one input")]
    EmptyConcat,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Debug)]
pub struct Tensor {
    id: NodeId,
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }
}

/// Gradients of one loss with respect to the requires-grad leaves it reaches.
#[derive(Debug, Default, Clone)]
pub struct GradMap {
    grads: HashMap<NodeId, Vec<f64>>,
}

impl GradMap {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id).map(Vec::as_slice)
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        self.grads.contains_key(&t.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Sum {
        x: NodeId,
        axis: usize,
    },
    Mean {
        x: NodeId,
        axis: usize,
    },
    SumAll(NodeId),
    Concat {
        xs: Vec<NodeId>,
        axis: usize,
    },
    Reshape(NodeId),
    Transpose(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: NodeId,
        axis: usize,
        norms: Vec<f64>,
    },
    MaskedFill(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    requires_grad: bool,
}

/// Eager computation graph. One graph per loss evaluation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index into an operand of `shape`
/// broadcast against `out`.
fn broadcast_index(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = numel(out);
    if shape == out {
        return (0..n).collect();
    }
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        idx.push(flat);
        for d in (0..rank).rev() {
            counter[d] += 1;
            flat += strides[d];
            if counter[d] < out[d] {
                break;
            }
            flat -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

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
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
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

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), value.len());
        let id = self.nodes.len();
        let value = Rc::new(value);
        self.nodes.push(Node {
            op,
            shape: shape.clone(),
            value: value.clone(),
            requires_grad,
        });
        Tensor {
            id,
            shape,
            data: value,
            requires_grad,
        }
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        match self.nodes.get(t.id) {
            Some(n) if Rc::ptr_eq(&n.value, &t.data) => Ok(()),
            _ => Err(TensorError::ForeignTensor(t.id)),
        }
    }

    fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected: numel(shape),
                actual: data.len(),
            });
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), data, requires_grad))
    }

    /// Trainable leaf; receives an entry in the [`GradMap`].
    pub fn param(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(data, shape, true)
    }

    /// Frozen leaf; never receives a gradient.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(data, shape, false)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        let out = broadcast_shape(name, &a.shape, &b.shape)?;
        let value = if a.shape == b.shape {
            a.data
                .iter()
                .zip(b.data.iter())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let ia = broadcast_index(&a.shape, &out);
            let ib = broadcast_index(&b.shape, &out);
            ia.iter()
                .zip(&ib)
                .map(|(&i, &j)| f(a.data[i], b.data[j]))
                .collect()
        };
        Ok(self.push(op, out, value, a.requires_grad || b.requires_grad))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let value = matmul_raw(&a.data, &b.data, m, k, n);
        Ok(self.push(
            Op::MatMul(a.id, b.id),
            vec![m, n],
            value,
            a.requires_grad || b.requires_grad,
        ))
    }

    fn axis_check(op: &'static str, x: &Tensor, axis: usize) -> Result<()> {
        if axis >= x.shape.len() {
            return Err(TensorError::BadAxis {
                op,
                axis,
                shape: x.shape.clone(),
            });
        }
        Ok(())
    }

    fn reduce(&mut self, x: &Tensor, axis: usize, mean: bool) -> Result<Tensor> {
        self.check(x)?;
        Self::axis_check(if mean { "mean" } else { "sum" }, x, axis)?;
        let (outer, len, inner) = axis_split(&x.shape, axis);
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                for j in 0..inner {
                    value[o * inner + j] += x.data[(o * len + i) * inner + j];
                }
            }
        }
        if mean {
            let s = 1.0 / len as f64;
            value.iter_mut().for_each(|v| *v *= s);
        }
        let mut shape = x.shape.clone();
        shape.remove(axis);
        let op = if mean {
            Op::Mean { x: x.id, axis }
        } else {
            Op::Sum { x: x.id, axis }
        };
        Ok(self.push(op, shape, value, x.requires_grad))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce(x, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce(x, axis, true)
    }

    /// Sum of every element; returns a scalar (shape `[]`).
    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let s = x.data.iter().sum();
        Ok(self.push(Op::SumAll(x.id), vec![], vec![s], x.requires_grad))
    }

    pub fn concat(&mut self, xs: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = xs.first().ok_or(TensorError::EmptyConcat)?;
        for x in xs {
            self.check(x)?;
            Self::axis_check("concat", x, axis)?;
            let same_rank = x.shape.len() == first.shape.len();
            let agree = same_rank
                && x.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (p, q))| d == axis || p == q);
            if !agree {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: x.shape.clone(),
                });
            }
        }
        let (outer, _, inner) = axis_split(&first.shape, axis);
        let total: usize = xs.iter().map(|x| x.shape[axis]).sum();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for x in xs {
                let len = x.shape[axis];
                value.extend_from_slice(&x.data[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        let rg = xs.iter().any(|x| x.requires_grad);
        Ok(self.push(
            Op::Concat {
                xs: xs.iter().map(|x| x.id).collect(),
                axis,
            },
            shape,
            value,
            rg,
        ))
    }

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.check(x)?;
        if numel(shape) != x.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: x.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.push(
            Op::Reshape(x.id),
            shape.to_vec(),
            x.data.as_ref().clone(),
            x.requires_grad,
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        if x.shape.len() != 2 {
            return Err(TensorError::BadAxis {
                op: "transpose",
                axis: 1,
                shape: x.shape.clone(),
            });
        }
        let (r, c) = (x.shape[0], x.shape[1]);
        Ok(self.push(
            Op::Transpose(x.id),
            vec![c, r],
            transpose_raw(&x.data, r, c),
            x.requires_grad,
        ))
    }

    fn unary(&mut self, x: &Tensor, op: Op, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        self.check(x)?;
        let value = x.data.iter().map(|&v| f(v)).collect();
        Ok(self.push(op, x.shape.clone(), value, x.requires_grad))
    }

    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, Op::Exp(x.id), f64::exp)
    }

    /// Natural log; every input element must be strictly positive.
    pub fn log(&mut self, x: &Tensor) -> Result<Tensor> {
        if let Some((index, &value)) = x.data.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(TensorError::NonPositiveLog { index, value });
        }
        self.unary(x, Op::Log(x.id), f64::ln)
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, Op::Relu(x.id), |v| v.max(0.0))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, Op::Gelu(x.id), gelu)
    }

    pub fn scale(&mut self, x: &Tensor, s: f64) -> Result<Tensor> {
        self.unary(x, Op::Scale(x.id, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(x, Op::AddScalar(x.id), |v| v + c)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        self.unary(x, Op::Clamp { x: x.id, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        self.check(x)?;
        Self::axis_check("softmax", x, axis)?;
        let (outer, len, inner) = axis_split(&x.shape, axis);
        let mut value = vec![0.0; x.numel()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len)
                    .map(|i| x.data[at(i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (x.data[at(i)] - max).exp();
                    value[at(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    value[at(i)] /= total;
                }
            }
        }
        Ok(self.push(
            Op::Softmax { x: x.id, axis },
            x.shape.clone(),
            value,
            x.requires_grad,
        ))
    }

    /// Normalizes each slice along the last axis to zero mean, unit variance.
    /// No affine parameters; compose with `mul`/`add` for those.
    pub fn layer_norm(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let last = *x.shape.last().ok_or(TensorError::BadAxis {
            op: "layer_norm",
            axis: 0,
            shape: vec![],
        })?;
        let rows = x.numel() / last;
        let mut value = vec![0.0; x.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x.data[r * last..(r + 1) * last];
            let mu = row.iter().sum::<f64>() / last as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / last as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in value[r * last..(r + 1) * last].iter_mut().zip(row) {
                *o = (v - mu) * inv;
            }
            inv_std.push(inv);
        }
        Ok(self.push(
            Op::LayerNorm { x: x.id, inv_std },
            x.shape.clone(),
            value,
            x.requires_grad,
        ))
    }

    /// Divides every slice along `axis` by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        self.check(x)?;
        Self::axis_check("l2_normalize", x, axis)?;
        let (outer, len, inner) = axis_split(&x.shape, axis);
        let mut value = vec![0.0; x.numel()];
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let n = (0..len)
                    .map(|i| x.data[at(i)] * x.data[at(i)])
                    .sum::<f64>()
                    .sqrt()
                    .max(L2_FLOOR);
                for i in 0..len {
                    value[at(i)] = x.data[at(i)] / n;
                }
                norms.push(n);
            }
        }
        Ok(self.push(
            Op::L2Normalize {
                x: x.id,
                axis,
                norms,
            },
            x.shape.clone(),
            value,
            x.requires_grad,
        ))
    }

    /// Adds a frozen additive mask (entries `0` or [`NEG_SENTINEL`]) to `x`.
    pub fn masked_fill(&mut self, x: &Tensor, mask: &[f64]) -> Result<Tensor> {
        self.check(x)?;
        if mask.len() != x.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                lhs: x.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let value = x.data.iter().zip(mask).map(|(v, m)| v + m).collect();
        Ok(self.push(
            Op::MaskedFill(x.id),
            x.shape.clone(),
            value,
            x.requires_grad,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the graph.
    pub fn backward(&mut self, loss: &Tensor) -> Result<GradMap> {
        Ok(self.backward_many(&[loss])?.remove(0))
    }

    /// One independent reverse sweep per scalar loss, sharing the forward
    /// pass. Consumes the graph.
    pub fn backward_many(&mut self, losses: &[&Tensor]) -> Result<Vec<GradMap>> {
        for loss in losses {
            self.check(loss)?;
            if loss.numel() != 1 {
                return Err(TensorError::NotScalar(loss.shape.clone()));
            }
        }
        self.consumed = true;
        let nodes = std::mem::take(&mut self.nodes);
        Ok(losses.iter().map(|loss| sweep(&nodes, loss)).collect())
    }
}

fn sweep(nodes: &[Node], loss: &Tensor) -> GradMap {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
    grads[loss.id] = Some(vec![1.0]);

    fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, g: impl FnOnce(&mut [f64])) {
        if !nodes[id].requires_grad {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
        g(slot);
    }

    fn acc_broadcast(
        grads: &mut [Option<Vec<f64>>],
        nodes: &[Node],
        id: NodeId,
        out: &[usize],
        g: &[f64],
        sign: f64,
    ) {
        let shape = nodes[id].shape.clone();
        let idx = broadcast_index(&shape, out);
        acc(grads, nodes, id, |s| {
            for (&i, &gv) in idx.iter().zip(g) {
                s[i] += sign * gv;
            }
        });
    }

    for id in (0..=loss.id).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = &nodes[id];
        let out = &node.shape;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {
                grads[id] = Some(g);
            }
            Op::Add(a, b) => {
                acc_broadcast(&mut grads, nodes, *a, out, &g, 1.0);
                acc_broadcast(&mut grads, nodes, *b, out, &g, 1.0);
            }
            Op::Sub(a, b) => {
                acc_broadcast(&mut grads, nodes, *a, out, &g, 1.0);
                acc_broadcast(&mut grads, nodes, *b, out, &g, -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
                let ia = broadcast_index(&nodes[*a].shape, out);
                let ib = broadcast_index(&nodes[*b].shape, out);
                acc(&mut grads, nodes, *a, |s| {
                    for k in 0..g.len() {
                        s[ia[k]] += g[k] * bv[ib[k]];
                    }
                });
                acc(&mut grads, nodes, *b, |s| {
                    for k in 0..g.len() {
                        s[ib[k]] += g[k] * av[ia[k]];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[1];
                if nodes[*a].requires_grad {
                    let bt = transpose_raw(&nodes[*b].value, k, n);
                    let ga = matmul_raw(&g, &bt, m, n, k);
                    acc(&mut grads, nodes, *a, |s| {
                        s.iter_mut().zip(&ga).for_each(|(s, v)| *s += v)
                    });
                }
                if nodes[*b].requires_grad {
                    let at = transpose_raw(&nodes[*a].value, m, k);
                    let gb = matmul_raw(&at, &g, k, m, n);
                    acc(&mut grads, nodes, *b, |s| {
                        s.iter_mut().zip(&gb).for_each(|(s, v)| *s += v)
                    });
                }
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let (outer, len, inner) = axis_split(&nodes[*x].shape, *axis);
                let s = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                acc(&mut grads, nodes, *x, |dst| {
                    for o in 0..outer {
                        for i in 0..len {
                            for j in 0..inner {
                                dst[(o * len + i) * inner + j] += s * g[o * inner + j];
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                acc(&mut grads, nodes, *x, |dst| {
                    dst.iter_mut().for_each(|d| *d += g[0])
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(out, *axis);
                let mut start = 0;
                for &x in xs {
                    let len = nodes[x].shape[*axis];
                    acc(&mut grads, nodes, x, |dst| {
                        for o in 0..outer {
                            let src =
                                &g[(o * total + start) * inner..(o * total + start + len) * inner];
                            let d = &mut dst[o * len * inner..(o + 1) * len * inner];
                            d.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    });
                    start += len;
                }
            }
            Op::Reshape(x) => {
                acc(&mut grads, nodes, *x, |d| {
                    d.iter_mut().zip(&g).for_each(|(d, s)| *d += s)
                });
            }
            Op::Transpose(x) => {
                let gt = transpose_raw(&g, out[0], out[1]);
                acc(&mut grads, nodes, *x, |d| {
                    d.iter_mut().zip(&gt).for_each(|(d, s)| *d += s)
                });
            }
            Op::Exp(x) => {
                acc(&mut grads, nodes, *x, |d| {
                    for k in 0..g.len() {
                        d[k] += g[k] * y[k];
                    }
                });
            }
            Op::Log(x) => {
                let xv = nodes[*x].value.clone();
                acc(&mut grads, nodes, *x, |d| {
                    for k in 0..g.len() {
                        d[k] += g[k] / xv[k];
                    }
                });
            }
            Op::Relu(x) => {
                let xv = nodes[*x].value.clone();
                acc(&mut grads, nodes, *x, |d| {
                    for k in 0..g.len() {
                        if xv[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = nodes[*x].value.clone();
                acc(&mut grads, nodes, *x, |d| {
                    for k in 0..g.len() {
                        d[k] += g[k] * gelu_grad(xv[k]);
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(&mut grads, nodes, *x, |d| {
                    for k in 0..g.len() {
                        d[k] += g[k] * s;
                    }
                });
            }
            Op::AddScalar(x) | Op::MaskedFill(x) => {
                acc(&mut grads, nodes, *x, |d| {
                    d.iter_mut().zip(&g).for_each(|(d, s)| *d += s)
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = nodes[*x].value.clone();
                acc(&mut grads, nodes, *x, |d| {
                    for k in 0..g.len() {
                        if xv[k] >= *lo && xv[k] <= *hi {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out, *axis);
                acc(&mut grads, nodes, *x, |d| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let dot: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..len {
                                d[at(i)] += y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let last = *out.last().unwrap();
                acc(&mut grads, nodes, *x, |d| {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gy = &g[r * last..(r + 1) * last];
                        let yr = &y[r * last..(r + 1) * last];
                        let mg = gy.iter().sum::<f64>() / last as f64;
                        let mgy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / last as f64;
                        for i in 0..last {
                            d[r * last + i] += inv * (gy[i] - mg - yr[i] * mgy);
                        }
                    }
                });
            }
            Op::L2Normalize { x, axis, norms } => {
                let (outer, len, inner) = axis_split(out, *axis);
                acc(&mut grads, nodes, *x, |d| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let n = norms[o * inner + j];
                            let dot: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..len {
                                d[at(i)] += (g[at(i)] - y[at(i)] * dot) / n;
                            }
                        }
                    }
                });
            }
        }
    }

    let grads = nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.requires_grad)
        .filter_map(|(id, _)| grads[id].take().map(|g| (id, g)))
        .collect();
    GradMap { grads }
}

/// Compares the analytic gradient of `f` at `at` with central differences.
///
/// Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F, E>(
    f: F,
    at: &[f64],
    shape: &[usize],
    step: f64,
) -> std::result::Result<f64, E>
where
    F: Fn(&mut Graph, &Tensor) -> std::result::Result<Tensor, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let x = g.param(at.to_vec(), shape)?;
    let loss = f(&mut g, &x)?;
    let grads = g.backward(&loss)?;
    let zeros = vec![0.0; at.len()];
    let analytic = grads.get(&x).unwrap_or(&zeros).to_vec();

    let eval = |point: Vec<f64>| -> std::result::Result<f64, E> {
        let mut g = Graph::new();
        let x = g.constant(point, shape)?;
        Ok(f(&mut g, &x)?.item())
    };
    let mut worst = 0.0f64;
    for i in 0..at.len() {
        let mut plus = at.to_vec();
        plus[i] += step;
        let mut minus = at.to_vec();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(vec![0.0, 0.0], &[2]).unwrap();
        let y = g.softmax(&x, 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_contracts_inner_dimension() {
        let mut g = Graph::new();
        let a = g.constant(vec![1.0; 6], &[2, 3]).unwrap();
        let b = g.constant(vec![1.0; 12], &[3, 4]).unwrap();
        let c = g.matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert!(c.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matmul_rejects_mismatch_with_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(vec![1.0; 6], &[2, 3]).unwrap();
        let b = g.constant(vec![1.0; 8], &[2, 4]).unwrap();
        let err = g.matmul(&a, &b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 4]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let x = g.constant(vec![3.0, 4.0], &[2]).unwrap();
        let y = g.l2_normalize(&x, 0).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15);
        assert!((y.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut g = Graph::new();
        let x = g.param(vec![3.0], &[1]).unwrap();
        let y = g.mul(&x, &x).unwrap();
        let loss = g.sum_all(&y).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let v = g.param(vec![0.3, -1.2, 2.5, 0.0], &[4]).unwrap();
        let s = g.softmax(&v, 0).unwrap();
        let loss = g.sum_all(&s).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert!(grads.get(&v).unwrap().iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(vec![1.0], &[1]).unwrap();
        let loss = g.sum_all(&x).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(g.backward(&loss).unwrap_err(), TensorError::GraphConsumed);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(vec![1.0, 2.0], &[2]).unwrap();
        assert_eq!(g.backward(&x).unwrap_err(), TensorError::NotScalar(vec![2]));
    }

    #[test]
    fn log_of_zero_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 0.0], &[2]).unwrap();
        assert_eq!(
            g.log(&x).unwrap_err(),
            TensorError::NonPositiveLog {
                index: 1,
                value: 0.0
            }
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(vec![1.0, 2.0], &[2]).unwrap();
        let c = g.constant(vec![3.0, 4.0], &[2]).unwrap();
        let y = g.mul(&x, &c).unwrap();
        let loss = g.sum_all(&y).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert!(!grads.contains(&c));
        assert_eq!(grads.get(&x).unwrap(), &[3.0, 4.0]);
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn unreachable_param_has_no_entry() {
        let mut g = Graph::new();
        let x = g.param(vec![1.0], &[1]).unwrap();
        let unused = g.param(vec![1.0], &[1]).unwrap();
        let loss = g.sum_all(&x).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert!(!grads.contains(&unused));
    }

    #[test]
    fn broadcast_row_bias_accumulates_over_rows() {
        let mut g = Graph::new();
        let x = g.constant(vec![0.0; 6], &[3, 2]).unwrap();
        let b = g.param(vec![1.0, 2.0], &[2]).unwrap();
        let y = g.add(&x, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let loss = g.sum_all(&y).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&b).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn sentinel_mask_gives_exact_zero_weight() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        let y = g.masked_fill(&x, &[0.0, NEG_SENTINEL, 0.0]).unwrap();
        let s = g.softmax(&y, 1).unwrap();
        assert_eq!(s.data()[1], 0.0);
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_sentinel_row_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(vec![0.0; 4], &[1, 4]).unwrap();
        let y = g.masked_fill(&x, &[NEG_SENTINEL; 4]).unwrap();
        let s = g.softmax(&y, 1).unwrap();
        assert!(s.data().iter().all(|&w| w == 0.25));
    }

    #[test]
    fn concat_along_both_axes() {
        let mut g = Graph::new();
        let a = g.constant(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = g.constant(vec![3.0, 4.0], &[1, 2]).unwrap();
        assert_eq!(
            g.concat(&[&a, &b], 0).unwrap().data(),
            &[1.0, 2.0, 3.0, 4.0]
        );
        let c = g.concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 4]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0]);
        let d = g.constant(vec![1.0; 3], &[1, 3]).unwrap();
        assert!(g.concat(&[&a, &d], 0).is_err());
    }

    #[test]
    fn foreign_tensor_is_rejected() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let x = g1.constant(vec![1.0], &[1]).unwrap();
        assert!(matches!(g2.exp(&x), Err(TensorError::ForeignTensor(_))));
    }

    #[test]
    fn finite_diff_on_linear_sum_is_exact() {
        let err = finite_diff_check(|g, x| g.sum_all(x), &[0.5, -2.0, 7.0], &[3], 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn finite_diff_layer_norm_then_sum() {
        let x: Vec<f64> = (0..12)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3)
            .collect();
        // weight the output so the gradient is not identically zero
        let w: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let err = finite_diff_check(
            |g, x| {
                let y = g.layer_norm(x)?;
                let w = g.constant(w.clone(), &[3, 4])?;
                let z = g.mul(&y, &w)?;
                g.sum_all(&z)
            },
            &x,
            &[3, 4],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
