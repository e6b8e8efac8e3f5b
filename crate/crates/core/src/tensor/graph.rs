use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::ops::{self, Broadcast};
use super::{Tensor, TensorError};

/// Adjoint supplied by code outside this module (the Sinkhorn solver uses it).
///
/// `backward` receives the input values, the output value and the upstream
/// gradient, and returns one gradient buffer per input (`None` for no contribution).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Relu(usize),
    MaxScalar(usize, f64),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    VarianceAxis(usize, usize),
    L2NormAxis(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Slice { x: usize, axis: usize, start: usize },
    MatMul(usize, usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Custom(Vec<usize>, Box<dyn CustomOp>),
}

/// Names of every differentiable primitive the graph can record.
pub const OP_NAMES: &[&str] = &[
    "add", "sub", "mul", "div", "scale", "add_scalar", "exp", "log", "sqrt", "relu",
    "max_with_scalar", "sum", "mean", "sum_axis", "mean_axis", "variance_axis", "l2_norm_axis",
    "reshape", "permute", "concat", "slice", "matmul", "softmax", "log_softmax", "conv2d",
    "batchnorm1d",
];

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::MaxScalar(..) => "max_with_scalar",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::VarianceAxis(..) => "variance_axis",
            Op::L2NormAxis(..) => "l2_norm_axis",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::MatMul(..) => "matmul",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm1d",
            Op::Custom(_, c) => c.name(),
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::Relu(x)
            | Op::MaxScalar(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumAxis(x, _)
            | Op::MeanAxis(x, _)
            | Op::VarianceAxis(x, _)
            | Op::L2NormAxis(x, _)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Slice { x, .. }
            | Op::Softmax(x, _)
            | Op::LogSoftmax(x, _) => vec![*x],
            Op::Concat(parts, _) => parts.clone(),
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Custom(inputs, _) => inputs.clone(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Append-only record of executed operations.
///
/// A graph is confined to one thread. Build a fresh one per forward pass.
#[derive(Default)]
pub struct Graph {
    inner: RefCell<Inner>,
    backward_done: Cell<bool>,
    fault: Cell<Option<&'static str>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push_raw(t, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Perturb the adjoint of every node recorded by `op` (negative-control hook for gradcheck).
    pub fn inject_adjoint_fault(&self, op: Option<&'static str>) {
        self.fault.set(op);
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op, requires_grad });
        inner.grads.push(None);
        Var { graph: self, id: inner.nodes.len() - 1 }
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = {
            let inner = self.inner.borrow();
            op.parents().iter().any(|&p| inner.nodes[p].requires_grad)
        };
        Ok(self.push_raw(value, op, requires_grad))
    }

    /// Record an operation whose adjoint is supplied by `op`.
    pub fn custom<'g>(
        &'g self,
        inputs: &[Var<'g>],
        output: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Result<Var<'g>, TensorError> {
        for v in inputs {
            self.check(*v)?;
        }
        self.push(output, Op::Custom(inputs.iter().map(|v| v.id).collect(), op))
    }

    pub(crate) fn check(&self, v: Var<'_>) -> Result<(), TensorError> {
        if std::ptr::eq(v.graph, self) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    pub fn value(&self, v: Var<'_>) -> Ref<'_, Tensor> {
        Ref::map(self.inner.borrow(), |i| &i.nodes[v.id].value)
    }

    /// Gradient accumulated into `v` by the last backward pass.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let inner = self.inner.borrow();
        let shape = inner.nodes[v.id].value.shape().to_vec();
        inner.grads[v.id].as_ref().map(|g| Tensor::from_vec(shape, g.clone()).expect("grad shape"))
    }

    /// Clear gradients so backward may run again.
    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done.set(false);
    }

    /// Propagate d(root)/d(node) to every node reachable from `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<(), TensorError> {
        self.check(root)?;
        if self.backward_done.get() {
            return Err(TensorError::StaleGraph);
        }
        let mut inner = self.inner.borrow_mut();
        let Inner { nodes, grads } = &mut *inner;
        let rv = &nodes[root.id].value;
        if rv.numel() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        self.backward_done.set(true);
        grads[root.id] = Some(vec![1.0]);
        let fault = self.fault.get();
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].as_ref() else { continue };
            let contributions = adjoint(nodes, id, g);
            let name = node.op.name();
            let scale = if fault == Some(name) { 1.5 } else { 1.0 };
            for (pid, c) in node.op.parents().into_iter().zip(contributions) {
                let Some(mut c) = c else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: name });
                }
                if scale != 1.0 {
                    c.iter_mut().for_each(|v| *v *= scale);
                }
                match &mut grads[pid] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor> {
        self.graph.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad(*self)
    }
}

/// Per-parent gradient contributions of node `id` given its upstream gradient `g`.
fn adjoint(nodes: &[Node], id: usize, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let node = &nodes[id];
    let out = &node.value;
    let val = |i: usize| &nodes[i].value;
    let need = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) => {
            let bc = Broadcast::new(val(*a).shape(), val(*b).shape()).expect("checked in forward");
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let ga = need(*a).then(|| bc.reduce_a(g, val(*a).numel(), |_, gv| gv));
            let gb = need(*b).then(|| bc.reduce_b(g, val(*b).numel(), |_, gv| sign * gv));
            vec![ga, gb]
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let bc = Broadcast::new(val(*a).shape(), val(*b).shape()).expect("checked in forward");
            let ga = need(*a).then(|| bc.reduce_a(g, av.len(), |k, gv| gv * bv[bc.b_index(k)]));
            let gb = need(*b).then(|| bc.reduce_b(g, bv.len(), |k, gv| gv * av[bc.a_index(k)]));
            vec![ga, gb]
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let bc = Broadcast::new(val(*a).shape(), val(*b).shape()).expect("checked in forward");
            let ga = need(*a).then(|| bc.reduce_a(g, av.len(), |k, gv| gv / bv[bc.b_index(k)]));
            let gb = need(*b).then(|| {
                bc.reduce_b(g, bv.len(), |k, gv| {
                    let d = bv[bc.b_index(k)];
                    -gv * av[bc.a_index(k)] / (d * d)
                })
            });
            vec![ga, gb]
        }
        Op::Scale(_, c) => vec![Some(g.iter().map(|v| v * c).collect())],
        Op::AddScalar(_) | Op::Reshape(_) => vec![Some(g.to_vec())],
        Op::Exp(_) => vec![Some(g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect())],
        Op::Log(x) => vec![Some(g.iter().zip(val(*x).data()).map(|(gv, x)| gv / x).collect())],
        Op::Sqrt(_) => {
            vec![Some(g.iter().zip(out.data()).map(|(gv, y)| gv * 0.5 / y).collect())]
        }
        Op::Relu(x) => vec![Some(
            g.iter().zip(val(*x).data()).map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 }).collect(),
        )],
        Op::MaxScalar(x, c) => vec![Some(
            g.iter().zip(val(*x).data()).map(|(gv, &x)| if x > *c { *gv } else { 0.0 }).collect(),
        )],
        Op::Sum(x) => vec![Some(vec![g[0]; val(*x).numel()])],
        Op::Mean(x) => {
            let n = val(*x).numel();
            vec![Some(vec![g[0] / n as f64; n])]
        }
        Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
            let xs = val(*x);
            let (outer, n, inner) = ops::axis_split(xs.shape(), *axis);
            let s = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / n as f64 } else { 1.0 };
            let mut gx = vec![0.0; xs.numel()];
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        gx[(o * n + k) * inner + i] = g[o * inner + i] * s;
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::VarianceAxis(x, axis) => {
            let xs = val(*x);
            let (outer, n, inner) = ops::axis_split(xs.shape(), *axis);
            let xd = xs.data();
            let mut gx = vec![0.0; xs.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * n + k) * inner + i;
                    let mean = (0..n).map(|k| xd[idx(k)]).sum::<f64>() / n as f64;
                    let c = 2.0 * g[o * inner + i] / (n as f64 - 1.0);
                    for k in 0..n {
                        gx[idx(k)] = c * (xd[idx(k)] - mean);
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::L2NormAxis(x, axis) => {
            let xs = val(*x);
            let (outer, n, inner) = ops::axis_split(xs.shape(), *axis);
            let xd = xs.data();
            let mut gx = vec![0.0; xs.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let norm = out.data()[o * inner + i];
                    if norm == 0.0 {
                        continue;
                    }
                    let c = g[o * inner + i] / norm;
                    for k in 0..n {
                        let j = (o * n + k) * inner + i;
                        gx[j] = c * xd[j];
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::Permute(x, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let gt = Tensor::from_vec(out.shape().to_vec(), g.to_vec()).expect("grad shape");
            let _ = x;
            vec![Some(ops::permute_values(&gt, &inv).into_data())]
        }
        Op::Concat(parts, axis) => {
            let (outer, n_total, inner) = ops::axis_split(out.shape(), *axis);
            let mut offset = 0;
            parts
                .iter()
                .map(|&p| {
                    let n = val(p).shape()[*axis];
                    let mut gp = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        let src = (o * n_total + offset) * inner;
                        gp[o * n * inner..(o + 1) * n * inner]
                            .copy_from_slice(&g[src..src + n * inner]);
                    }
                    offset += n;
                    need(p).then_some(gp)
                })
                .collect()
        }
        Op::Slice { x, axis, start } => {
            let xs = val(*x);
            let (outer, n, inner) = ops::axis_split(xs.shape(), *axis);
            let len = out.shape()[*axis];
            let mut gx = vec![0.0; xs.numel()];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                gx[dst..dst + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }
        Op::MatMul(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let gt = Tensor::from_vec(out.shape().to_vec(), g.to_vec()).expect("grad shape");
            let ga = need(*a).then(|| {
                ops::matmul_values(&gt, &bt.transpose().expect("rank>=2")).expect("shapes").into_data()
            });
            let gb = need(*b).then(|| {
                ops::matmul_values(&at.transpose().expect("rank>=2"), &gt).expect("shapes").into_data()
            });
            vec![ga, gb]
        }
        Op::Softmax(_, axis) => {
            let (outer, n, inner) = ops::axis_split(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                    for k in 0..n {
                        gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::LogSoftmax(_, axis) => {
            let (outer, n, inner) = ops::axis_split(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * n + k) * inner + i;
                    let total: f64 = (0..n).map(|k| g[idx(k)]).sum();
                    for k in 0..n {
                        gx[idx(k)] = g[idx(k)] - y[idx(k)].exp() * total;
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::Conv2d { x, w, stride, pad } => {
            let (gx, gw) = ops::conv2d_backward(val(*x), val(*w), g, *stride, *pad, need(*x), need(*w));
            vec![gx, gw]
        }
        Op::BatchNorm { x, gamma, xhat, inv_std, .. } => {
            let (n, d) = (val(*x).shape()[0], val(*x).shape()[1]);
            let gm = val(*gamma).data();
            let mut gx = vec![0.0; n * d];
            let mut ggamma = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            for j in 0..d {
                let mut sum_dxh = 0.0;
                let mut sum_dxh_xh = 0.0;
                for r in 0..n {
                    let k = r * d + j;
                    ggamma[j] += g[k] * xhat[k];
                    gbeta[j] += g[k];
                    let dxh = g[k] * gm[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xhat[k];
                }
                for r in 0..n {
                    let k = r * d + j;
                    let dxh = g[k] * gm[j];
                    gx[k] = inv_std[j] / n as f64 * (n as f64 * dxh - sum_dxh - xhat[k] * sum_dxh_xh);
                }
            }
            vec![Some(gx), Some(ggamma), Some(gbeta)]
        }
        Op::Custom(inputs, op) => {
            let vals: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            op.backward(&vals, out, g)
        }
    }
}
