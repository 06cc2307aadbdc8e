use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::TensorError;
use crate::kernels::{self, ConvGeom, Mat};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        c_out: usize,
        // im2col buffer, kept only when the kernel needs a gradient.
        cols: Option<Vec<f64>>,
    },
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Slice { a: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Broadcast(Var),
    Reshape(Var),
    Upsample2(Var),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. A tape is meant to be used from a single thread; run
/// independent tapes concurrently for batch parallelism.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.map.iter().map(|(v, t)| (*v, t))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Sums `grad` (laid out as `out_shape`) back onto `in_shape`.
fn reduce_to(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let n: usize = in_shape.iter().product();
    let mut acc = vec![0.0; n];
    for (g, off) in grad.iter().zip(kernels::broadcast_offsets(out_shape, in_shape)) {
        acc[off] += g;
    }
    acc
}

fn gather(src: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return src.to_vec();
    }
    kernels::broadcast_offsets(out_shape, in_shape)
        .into_iter()
        .map(|o| src[o])
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_raw(value, true, Op::Leaf)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_raw(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push_raw(&self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, value: Tensor, parents: &[Var], op: Op) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        // Untracked results keep no backward state.
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_raw(value, requires_grad, op)
    }

    fn binary_broadcast(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() == tb.shape() {
            return ta.zip_map(tb, f);
        }
        let out_shape =
            kernels::broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| TensorError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })?;
        let xa = gather(ta.data(), &out_shape, ta.shape());
        let xb = gather(tb.data(), &out_shape, tb.shape());
        let data = xa.iter().zip(&xb).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(out_shape, data))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(f);
        self.push(value, &[a], op)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.binary_broadcast("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.binary_broadcast("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.binary_broadcast("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    /// Adds a constant to every element.
    pub fn offset(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Numerically stable `log(sigmoid(a))`.
    pub fn log_sigmoid(&self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let row = *t
                .shape()
                .last()
                .ok_or_else(|| TensorError::invalid("softmax", "rank-0 input"))?;
            let mut out = t.to_vec();
            if row > 0 {
                for chunk in out.chunks_mut(row) {
                    let max = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for v in chunk.iter_mut() {
                        *v = (*v - max).exp();
                        z += *v;
                    }
                    chunk.iter_mut().for_each(|v| *v /= z);
                }
            }
            Tensor::from_parts(t.shape().to_vec(), out)
        };
        Ok(self.push(value, &[a], Op::Softmax(a)))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.0].value.sum();
        self.push(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let m = self.nodes.borrow()[a.0].value.mean();
        self.push(Tensor::scalar(m), &[a], Op::Mean(a))
    }

    /// Sums out one axis (the axis is removed from the shape).
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if axis >= t.rank() {
                return Err(TensorError::invalid(
                    "sum_axis",
                    format!("axis {axis} out of range for shape {:?}", t.shape()),
                ));
            }
            let (outer, n, inner) = axis_split(t.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            let src = t.data();
            for o in 0..outer {
                for i in 0..n {
                    let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                    for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            Tensor::from_parts(shape, out)
        };
        Ok(self.push(value, &[a], Op::SumAxis(a, axis)))
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let bad = || TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            };
            let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
                return Err(bad());
            };
            if k != k2 {
                return Err(bad());
            }
            let mut out = vec![0.0; m * n];
            kernels::gemm(Mat::new(ta.data(), m, k), Mat::new(tb.data(), k, n), 0.0, &mut out);
            Tensor::from_parts(vec![m, n], out)
        };
        Ok(self.push(value, &[a, b], Op::MatMul(a, b)))
    }

    /// 2-D convolution of `x: [c_in, h, w]` with `w: [c_out, c_in, k, k]`,
    /// optional bias `b: [c_out]`, zero padding and stride 1 or 2.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        if stride != 1 && stride != 2 {
            return Err(TensorError::invalid("conv2d", format!("unsupported stride {stride}")));
        }
        let (value, geom, c_out, cols) = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let mismatch = || TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            };
            let (&[c_in, h, wd], &[c_out, c_in_w, k, k2]) = (tx.shape(), tw.shape()) else {
                return Err(mismatch());
            };
            if c_in != c_in_w || k != k2 || h + 2 * pad < k || wd + 2 * pad < k {
                return Err(mismatch());
            }
            if let Some(b) = b {
                let tb = &nodes[b.0].value;
                if tb.shape() != [c_out] {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv2d bias",
                        lhs: vec![c_out],
                        rhs: tb.shape().to_vec(),
                    });
                }
            }
            let geom = ConvGeom {
                c_in,
                h,
                w: wd,
                k,
                stride,
                pad,
                h_out: (h + 2 * pad - k) / stride + 1,
                w_out: (wd + 2 * pad - k) / stride + 1,
            };
            let cols = kernels::im2col(tx.data(), &geom);
            let ncol = geom.col_cols();
            let mut out = vec![0.0; c_out * ncol];
            if let Some(b) = b {
                for (row, bias) in out.chunks_mut(ncol).zip(nodes[b.0].value.data()) {
                    row.fill(*bias);
                }
            }
            let beta = if b.is_some() { 1.0 } else { 0.0 };
            kernels::gemm(
                Mat::new(tw.data(), c_out, geom.col_rows()),
                Mat::new(&cols, geom.col_rows(), ncol),
                beta,
                &mut out,
            );
            let keep = nodes[w.0].requires_grad;
            let value = Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], out);
            (value, geom, c_out, keep.then_some(cols))
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            value,
            &parents,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                c_out,
                cols,
            },
        ))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if axis >= t.rank() || start + len > t.shape()[axis] {
                return Err(TensorError::invalid(
                    "slice",
                    format!("range {start}..{} on axis {axis} of {:?}", start + len, t.shape()),
                ));
            }
            let (outer, n, inner) = axis_split(t.shape(), axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                out.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Tensor::from_parts(shape, out)
        };
        Ok(self.push(value, &[a], Op::Slice { a, axis, start }))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .map(|p| &nodes[p.0].value)
                .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
            if axis >= first.rank() {
                return Err(TensorError::invalid("concat", format!("axis {axis} out of range")));
            }
            let mut shape = first.shape().to_vec();
            shape[axis] = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                let compatible = s.len() == shape.len()
                    && s.iter().zip(&shape).enumerate().all(|(d, (x, y))| d == axis || x == y);
                if !compatible {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape().to_vec(),
                        rhs: s.to_vec(),
                    });
                }
                shape[axis] += s[axis];
            }
            let (outer, _, inner) = axis_split(&shape, axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.0].value;
                    let chunk = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::from_parts(shape, out)
        };
        Ok(self.push(
            value,
            parts,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Expands `a` to `shape` under numpy broadcasting rules.
    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            match kernels::broadcast_shape(t.shape(), shape) {
                Some(s) if s == shape => {}
                _ => {
                    return Err(TensorError::ShapeMismatch {
                        op: "broadcast",
                        lhs: t.shape().to_vec(),
                        rhs: shape.to_vec(),
                    })
                }
            }
            Tensor::from_parts(shape.to_vec(), gather(t.data(), shape, t.shape()))
        };
        Ok(self.push(value, &[a], Op::Broadcast(a)))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.nodes.borrow()[a.0].value.reshape(shape)?;
        Ok(self.push(value, &[a], Op::Reshape(a)))
    }

    /// Nearest-neighbour 2x upsampling of the last two axes of `[c, h, w]`.
    pub fn upsample2(&self, a: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let &[c, h, w] = t.shape() else {
                return Err(TensorError::invalid("upsample2", format!("expected [c,h,w], got {:?}", t.shape())));
            };
            let mut out = vec![0.0; c * 4 * h * w];
            let src = t.data();
            for ch in 0..c {
                for i in 0..2 * h {
                    let srow = &src[(ch * h + i / 2) * w..(ch * h + i / 2 + 1) * w];
                    let drow = &mut out[(ch * 2 * h + i) * 2 * w..(ch * 2 * h + i + 1) * 2 * w];
                    for (j, d) in drow.iter_mut().enumerate() {
                        *d = srow[j / 2];
                    }
                }
            }
            Tensor::from_parts(vec![c, 2 * h, 2 * w], out)
        };
        Ok(self.push(value, &[a], Op::Upsample2(a)))
    }

    /// Reverse pass from a single-element `loss`.
    ///
    /// Returns the gradient for every differentiable leaf recorded on the
    /// tape; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if root.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut out = HashMap::new();

        let accumulate = |grads: &mut Vec<Option<Vec<f64>>>, target: Var, g: Vec<f64>| {
            if !nodes[target.0].requires_grad {
                return;
            }
            match &mut grads[target.0] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };
        let val = |v: Var| &nodes[v.0].value;

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let out_shape = node.value.shape();
            match &node.op {
                Op::Leaf => {
                    out.insert(Var(id), Tensor::from_parts(out_shape.to_vec(), g));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(&g, out_shape, val(*a).shape()));
                    accumulate(&mut grads, *b, reduce_to(&g, out_shape, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(&g, out_shape, val(*a).shape()));
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, reduce_to(&neg, out_shape, val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if nodes[a.0].requires_grad {
                        let xb = gather(tb.data(), out_shape, tb.shape());
                        let ga: Vec<f64> = g.iter().zip(&xb).map(|(g, y)| g * y).collect();
                        accumulate(&mut grads, *a, reduce_to(&ga, out_shape, ta.shape()));
                    }
                    if nodes[b.0].requires_grad {
                        let xa = gather(ta.data(), out_shape, ta.shape());
                        let gb: Vec<f64> = g.iter().zip(&xa).map(|(g, x)| g * x).collect();
                        accumulate(&mut grads, *b, reduce_to(&gb, out_shape, tb.shape()));
                    }
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.iter().map(|v| v * k).collect()),
                Op::Offset(a) | Op::Reshape(a) => accumulate(&mut grads, *a, g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if nodes[a.0].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        kernels::gemm(Mat::new(&g, m, n), Mat::new(tb.data(), k, n).t(), 0.0, &mut ga);
                        accumulate(&mut grads, *a, ga);
                    }
                    if nodes[b.0].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        kernels::gemm(Mat::new(ta.data(), m, k).t(), Mat::new(&g, m, n), 0.0, &mut gb);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    c_out,
                    cols,
                } => {
                    let (rows, ncol) = (geom.col_rows(), geom.col_cols());
                    let gmat = Mat::new(&g, *c_out, ncol);
                    if let Some(b) = b {
                        if nodes[b.0].requires_grad {
                            let gb = g.chunks(ncol).map(|r| r.iter().sum()).collect();
                            accumulate(&mut grads, *b, gb);
                        }
                    }
                    if let Some(cols) = cols {
                        let mut gw = vec![0.0; *c_out * rows];
                        kernels::gemm(gmat, Mat::new(cols, rows, ncol).t(), 0.0, &mut gw);
                        accumulate(&mut grads, *w, gw);
                    }
                    if nodes[x.0].requires_grad {
                        let mut gcols = vec![0.0; rows * ncol];
                        kernels::gemm(Mat::new(val(*w).data(), *c_out, rows).t(), gmat, 0.0, &mut gcols);
                        accumulate(&mut grads, *x, kernels::col2im(&gcols, geom));
                    }
                }
                Op::Relu(a) => {
                    let gx = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, gx);
                }
                Op::Silu(a) => {
                    let gx = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads, *a, gx);
                }
                Op::Sigmoid(a) => {
                    let gx = g.iter().zip(node.value.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *a, gx);
                }
                Op::LogSigmoid(a) => {
                    let gx = g.iter().zip(val(*a).data()).map(|(g, &x)| g * sigmoid(-x)).collect();
                    accumulate(&mut grads, *a, gx);
                }
                Op::Log(a) => {
                    let gx = g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
                    accumulate(&mut grads, *a, gx);
                }
                Op::Exp(a) => {
                    let gx = g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads, *a, gx);
                }
                Op::Square(a) => {
                    let gx = g.iter().zip(val(*a).data()).map(|(g, x)| 2.0 * g * x).collect();
                    accumulate(&mut grads, *a, gx);
                }
                Op::Softmax(a) => {
                    let row = *out_shape.last().unwrap_or(&1);
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, yr), out) in g.chunks(row).zip(node.value.data().chunks(row)).zip(gx.chunks_mut(row)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                            *o = y * (g - dot);
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::Sum(a) => accumulate(&mut grads, *a, vec![g[0]; val(*a).len()]),
                Op::Mean(a) => {
                    let n = val(*a).len();
                    accumulate(&mut grads, *a, vec![g[0] / n as f64; n]);
                }
                Op::SumAxis(a, axis) => {
                    let in_shape = val(*a).shape();
                    let mut kept = in_shape.to_vec();
                    kept[*axis] = 1;
                    accumulate(&mut grads, *a, gather(&g, in_shape, &kept));
                }
                Op::Slice { a, axis, start } => {
                    let in_shape = val(*a).shape();
                    let (outer, n, inner) = axis_split(in_shape, *axis);
                    let len = out_shape[*axis];
                    let mut gx = vec![0.0; val(*a).len()];
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = axis_split(out_shape, *axis);
                    let mut offset = 0;
                    for p in parts {
                        let n = val(*p).shape()[*axis];
                        if nodes[p.0].requires_grad {
                            let mut gp = Vec::with_capacity(outer * n * inner);
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                gp.extend_from_slice(&g[base..base + n * inner]);
                            }
                            accumulate(&mut grads, *p, gp);
                        }
                        offset += n;
                    }
                }
                Op::Broadcast(a) => accumulate(&mut grads, *a, reduce_to(&g, out_shape, val(*a).shape())),
                Op::Upsample2(a) => {
                    let &[c, h, w] = val(*a).shape() else { unreachable!() };
                    let mut gx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for i in 0..2 * h {
                            let grow = &g[(ch * 2 * h + i) * 2 * w..(ch * 2 * h + i + 1) * 2 * w];
                            let drow = &mut gx[(ch * h + i / 2) * w..(ch * h + i / 2 + 1) * w];
                            for (j, v) in grow.iter().enumerate() {
                                drow[j / 2] += v;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
            }
        }

        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out.entry(Var(id)).or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { map: out })
    }
}
