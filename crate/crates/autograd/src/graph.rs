//! Tape of primitive applications and the reverse sweep over it.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order. `backward` walks it once from the loss towards the
//! leaves, handing each node's adjoint to the local rule of its primitive.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Square,
    Abs,
    Pow(f64),
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Unary(UnaryKind, Var),
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        // Per-output-element input index, present only when broadcasting.
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    MatMul(Var, Var),
    Kron(Var, Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Conv2d(crate::nn::ConvSaved),
    MaxPool2d { x: Var, argmax: Vec<usize> },
    BatchNorm(crate::nn::BatchNormSaved),
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Records primitive applications for one forward pass.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

/// Adjoints of the leaves that require gradients.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Accumulates adjoints flowing into a node's inputs.
pub(crate) struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
}

impl GradSink<'_> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn add(&mut self, v: Var, g: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(&g) {
                    *a += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    pub(crate) fn add_with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let acc = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(acc);
    }
}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out`, the linear index of the element of `inp` it reads.
pub(crate) fn broadcast_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - inp.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..inp.len()).rev() {
        strides[i + offset] = if inp[i] == 1 { 0 } else { s };
        s *= inp[i];
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut lin = 0usize;
    for _ in 0..n {
        map.push(lin);
        for d in (0..rank).rev() {
            idx[d] += 1;
            lin += strides[d];
            if idx[d] < out[d] {
                break;
            }
            lin -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf whose gradient will be reported by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---- elementwise -----------------------------------------------------

    fn unary(&mut self, kind: UnaryKind, x: Var, name: &'static str) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let out = match kind {
            UnaryKind::Relu => xv.map(|v| v.max(0.0)),
            UnaryKind::Sigmoid => xv.map(sigmoid),
            UnaryKind::Exp => xv.map(f64::exp),
            UnaryKind::Log => xv.map(f64::ln),
            UnaryKind::Square => xv.map(|v| v * v),
            UnaryKind::Abs => xv.map(f64::abs),
            UnaryKind::Pow(p) => xv.map(|v| v.powf(p)),
            UnaryKind::Scale(c) => xv.map(|v| v * c),
            UnaryKind::AddScalar(c) => xv.map(|v| v + c),
            UnaryKind::Clamp(lo, hi) => xv.map(|v| v.clamp(lo, hi)),
        };
        check_finite(name, out.data())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Unary(kind, x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x, "sigmoid")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x, "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x, "log")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, x, "square")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, x, "abs")
    }

    /// `x^p` for a constant exponent.
    pub fn pow(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(UnaryKind::Pow(p), x, "pow")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), x, "scale")
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::AddScalar(c), x, "add_scalar")
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(UnaryKind::Clamp(lo, hi), x, "clamp")
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Result<Var> {
        self.clamp(x, lo, f64::INFINITY)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| shape_err(name, format!("{:?} vs {:?}", sa, sb)))?;
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Div => |x: f64, y: f64| x / y,
        };
        let map_a = (sa != out_shape).then(|| broadcast_map(&out_shape, &sa));
        let map_b = (sb != out_shape).then(|| broadcast_map(&out_shape, &sb));
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let ia = map_a.as_ref().map_or(i, |m| m[i]);
                let ib = map_b.as_ref().map_or(i, |m| m[i]);
                f(av[ia], bv[ib])
            })
            .collect();
        check_finite(name, &data)?;
        let rg = self.rg(a) || self.rg(b);
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(
            out,
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        check_finite("sum", &[s])?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.sum() / t.len() as f64;
        check_finite("mean", &[m])?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean_axis" } else { "sum_axis" };
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err(name, format!("axis {} of {:?}", axis, shape)));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xv[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        check_finite(name, &out)?;
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        let op = if mean {
            Op::MeanAxis { x, axis }
        } else {
            Op::SumAxis { x, axis }
        };
        Ok(self.push(Tensor::new(out_shape, out)?, op, rg))
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    // ---- reverse sweep ---------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every node between the loss and the leaves is visited exactly once in
    /// reverse creation order. The graph is left untouched, so calling this
    /// twice yields identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        check_finite("loss", lv.data())?;
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; n];
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            check_finite("backward", &g)?;
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                leaf_grads[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            let mut sink = GradSink {
                grads: &mut grads[..idx],
                nodes: &self.nodes,
            };
            self.backprop(idx, &g, &mut sink)?;
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn backprop(&self, idx: usize, g: &[f64], sink: &mut GradSink) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                let xv = self.value(*x).data();
                let gx: Vec<f64> = match *kind {
                    UnaryKind::Relu => zip_map(g, xv, |g, x| if x > 0.0 { g } else { 0.0 }),
                    UnaryKind::Sigmoid => zip_map(g, out, |g, y| g * y * (1.0 - y)),
                    UnaryKind::Exp => zip_map(g, out, |g, y| g * y),
                    UnaryKind::Log => zip_map(g, xv, |g, x| g / x),
                    UnaryKind::Square => zip_map(g, xv, |g, x| 2.0 * g * x),
                    UnaryKind::Abs => zip_map(g, xv, |g, x| g * sign(x)),
                    UnaryKind::Pow(p) => zip_map(g, xv, |g, x| {
                        if p == 0.0 {
                            0.0
                        } else {
                            g * p * x.powf(p - 1.0)
                        }
                    }),
                    UnaryKind::Scale(c) => g.iter().map(|g| g * c).collect(),
                    UnaryKind::AddScalar(_) => g.to_vec(),
                    UnaryKind::Clamp(lo, hi) => {
                        zip_map(g, xv, |g, x| if x < lo || x > hi { 0.0 } else { g })
                    }
                };
                sink.add(*x, gx);
            }
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ia = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
                let ib = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
                if sink.wants(*a) {
                    sink.add_with(*a, |acc| {
                        for (i, &gi) in g.iter().enumerate() {
                            acc[ia(i)] += match kind {
                                BinaryKind::Add | BinaryKind::Sub => gi,
                                BinaryKind::Mul => gi * bv[ib(i)],
                                BinaryKind::Div => gi / bv[ib(i)],
                            };
                        }
                    });
                }
                if sink.wants(*b) {
                    sink.add_with(*b, |acc| {
                        for (i, &gi) in g.iter().enumerate() {
                            acc[ib(i)] += match kind {
                                BinaryKind::Add => gi,
                                BinaryKind::Sub => -gi,
                                BinaryKind::Mul => gi * av[ia(i)],
                                BinaryKind::Div => {
                                    let y = bv[ib(i)];
                                    -gi * av[ia(i)] / (y * y)
                                }
                            };
                        }
                    });
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                sink.add(*x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                sink.add(*x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for i in 0..inner {
                            gx[base + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                sink.add(*x, gx);
            }
            Op::Reshape(x) => sink.add(*x, g.to_vec()),
            Op::Softmax(x) => sink.add(*x, crate::nn::softmax_backward(out, g, node.value.shape())),
            Op::LogSoftmax(x) => {
                sink.add(*x, crate::nn::log_softmax_backward(out, g, node.value.shape()))
            }
            Op::MatMul(a, b) => crate::linalg::matmul_backward(self, *a, *b, g, sink),
            Op::Kron(a, b) => crate::linalg::kron_backward(self, *a, *b, g, sink),
            Op::Concat { inputs, axis } => {
                crate::linalg::concat_backward(self, inputs, *axis, g, sink)
            }
            Op::Conv2d(saved) => crate::nn::conv2d_backward(self, saved, g, sink),
            Op::MaxPool2d { x, argmax } => {
                sink.add_with(*x, |acc| {
                    for (gi, &src) in g.iter().zip(argmax) {
                        acc[src] += gi;
                    }
                });
            }
            Op::BatchNorm(saved) => crate::nn::batch_norm_backward(self, saved, g, sink),
        }
        Ok(())
    }
}

fn zip_map(g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(x).map(|(&g, &x)| f(g, x)).collect()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
