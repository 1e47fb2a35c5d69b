//! Graph-tracked tensors and the differentiable operation set.
//!
//! Every backward rule is written in terms of the same tensor operations, so
//! running the backward pass with graph recording enabled yields gradients
//! that can themselves be differentiated.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use super::array::{numel, Array};
use super::conv::{conv_out_len, conv_transpose_out_len, gemm, ConvGeom};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

/// Whether new operations are currently being recorded.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

fn with_grad_mode<T>(enabled: bool, f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    let _guard = GradModeGuard(prev);
    f()
}

/// Runs `f` without recording operations.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    with_grad_mode(false, f)
}

fn next_id() -> u64 {
    NEXT_ID.with(|n| {
        let id = n.get();
        n.set(id + 1);
        id
    })
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    Pow(f64),
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    LeakyRelu(f64),
    ClampMin(f64),
    Matmul,
    Transpose,
    Reshape,
    BroadcastTo,
    SumTo,
    Conv(ConvGeom),
    ConvInputGrad(ConvGeom),
    ConvWeightGrad(ConvGeom),
    Gather(Rc<[usize]>),
    ScatterAdd(Rc<[usize]>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Pow(_) => "pow",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::ClampMin(_) => "clamp_min",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::BroadcastTo => "broadcast_to",
            Op::SumTo => "sum_to",
            Op::Conv(_) => "conv2d",
            Op::ConvInputGrad(_) => "conv2d_input_grad",
            Op::ConvWeightGrad(_) => "conv2d_weight_grad",
            Op::Gather(_) => "gather",
            Op::ScatterAdd(_) => "scatter_add",
        }
    }
}

struct Node {
    id: u64,
    value: Array,
    op: Op,
    inputs: Vec<Tensor>,
    requires_grad: bool,
}

/// A node in a reverse-mode computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("op", &self.0.op.name())
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn shapes_match(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// For every flat index of `big`, the flat index of `small` it reads from
/// under right-aligned broadcasting. `None` if the shapes are incompatible.
fn broadcast_map(small: &[usize], big: &[usize]) -> Option<Vec<usize>> {
    if small.len() > big.len() {
        return None;
    }
    let offset = big.len() - small.len();
    let mut strides = vec![0usize; big.len()];
    let mut acc = 1;
    for d in (0..small.len()).rev() {
        let (s, b) = (small[d], big[d + offset]);
        if s == b {
            strides[d + offset] = if s == 1 { 0 } else { acc };
        } else if s != 1 {
            return None;
        }
        acc *= s;
    }
    let total = numel(big);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; big.len()];
    let mut cur = 0usize;
    for _ in 0..total {
        out.push(cur);
        for d in (0..big.len()).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < big[d] {
                break;
            }
            cur -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(out)
}

impl Tensor {
    fn from_op(value: Array, op: Op, inputs: Vec<Tensor>) -> Tensor {
        let requires_grad = is_grad_enabled() && inputs.iter().any(|t| t.0.requires_grad);
        let (op, inputs) = if requires_grad {
            (op, inputs)
        } else {
            (Op::Leaf, Vec::new())
        };
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            op,
            inputs,
            requires_grad,
        }))
    }

    /// A value that gradients do not flow into.
    pub fn constant(value: Array) -> Tensor {
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad: false,
        }))
    }

    /// A leaf that gradients are accumulated for.
    pub fn leaf(value: Array) -> Tensor {
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad: true,
        }))
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::constant(Array::scalar(value))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Array {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.0.value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op.name()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    /// A constant copy cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.value.clone())
    }

    fn map_unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_op(self.0.value.map(f), op, vec![self.clone()])
    }

    fn zip_binary(&self, other: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        shapes_match(op.name(), self, other)?;
        let data = self
            .value()
            .data()
            .iter()
            .zip(other.value().data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let value = Array::from_parts(self.shape().to_vec(), data);
        Ok(Tensor::from_op(value, op, vec![self.clone(), other.clone()]))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_binary(other, Op::Div, |a, b| a / b)
    }

    /// `self + other`, broadcasting `other` to `self`'s shape.
    pub fn add_bcast(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.broadcast_to(self.shape())?)
    }

    /// `self * other`, broadcasting `other` to `self`'s shape.
    pub fn mul_bcast(&self, other: &Tensor) -> Result<Tensor> {
        self.mul(&other.broadcast_to(self.shape())?)
    }

    pub fn neg(&self) -> Tensor {
        self.map_unary(Op::Neg, |v| -v)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map_unary(Op::Scale(c), |v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map_unary(Op::AddScalar, |v| v + c)
    }

    pub fn powf(&self, p: f64) -> Tensor {
        self.map_unary(Op::Pow(p), |v| v.powf(p))
    }

    pub fn square(&self) -> Tensor {
        self.powf(2.0)
    }

    pub fn sqrt(&self) -> Tensor {
        self.powf(0.5)
    }

    pub fn exp(&self) -> Tensor {
        self.map_unary(Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Tensor {
        self.map_unary(Op::Log, f64::ln)
    }

    pub fn tanh(&self) -> Tensor {
        self.map_unary(Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map_unary(Op::Sigmoid, sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor {
        self.map_unary(Op::Softplus, softplus)
    }

    pub fn relu(&self) -> Tensor {
        self.map_unary(Op::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.map_unary(Op::LeakyRelu(slope), |v| if v > 0.0 { v } else { slope * v })
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        self.map_unary(Op::ClampMin(floor), |v| v.max(floor))
    }

    /// 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value().data(), false, other.value().data(), false, &mut out, 0.0);
        Ok(Tensor::from_op(
            Array::from_parts(vec![m, n], out),
            Op::Matmul,
            vec![self.clone(), other.clone()],
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(AutodiffError::InvalidShape {
                op: "transpose",
                shape: s.to_vec(),
                reason: "expected a 2-D tensor".into(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value().data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(Tensor::from_op(
            Array::from_parts(vec![c, r], out),
            Op::Transpose,
            vec![self.clone()],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let value = self.value().clone().reshape(shape)?;
        Ok(Tensor::from_op(value, Op::Reshape, vec![self.clone()]))
    }

    /// Right-aligned broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let map = broadcast_map(self.shape(), shape).ok_or_else(|| AutodiffError::ShapeMismatch {
            op: "broadcast_to",
            lhs: self.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        let src = self.value().data();
        let data = map.iter().map(|&i| src[i]).collect();
        Ok(Tensor::from_op(
            Array::from_parts(shape.to_vec(), data),
            Op::BroadcastTo,
            vec![self.clone()],
        ))
    }

    /// Sums over the axes that `shape` broadcasts; the adjoint of
    /// [`Tensor::broadcast_to`].
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let map = broadcast_map(shape, self.shape()).ok_or_else(|| AutodiffError::ShapeMismatch {
            op: "sum_to",
            lhs: self.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        let mut out = vec![0.0; numel(shape)];
        for (&dst, &v) in map.iter().zip(self.value().data()) {
            out[dst] += v;
        }
        Ok(Tensor::from_op(
            Array::from_parts(shape.to_vec(), out),
            Op::SumTo,
            vec![self.clone()],
        ))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        self.sum_to(&[]).expect("every shape reduces to a scalar")
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Convolution of `[B, Ci, H, W]` with weights `[Co, Ci, Kh, Kw]`.
    pub fn conv2d(&self, weight: &Tensor, stride: [usize; 2], padding: [usize; 2]) -> Result<Tensor> {
        let (x, w) = (self.shape(), weight.shape());
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        };
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(mismatch());
        }
        let out_h = conv_out_len(x[2], w[2], stride[0], padding[0]).ok_or_else(mismatch)?;
        let out_w = conv_out_len(x[3], w[3], stride[1], padding[1]).ok_or_else(mismatch)?;
        let geom = ConvGeom {
            batch: x[0],
            in_ch: x[1],
            out_ch: w[0],
            in_hw: [x[2], x[3]],
            out_hw: [out_h, out_w],
            kernel: [w[2], w[3]],
            stride,
            padding,
        };
        Ok(self.conv_raw(weight, geom))
    }

    /// Transposed convolution of `[B, Cin, H, W]` with weights
    /// `[Cin, Cout, Kh, Kw]`.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor,
        stride: [usize; 2],
        padding: [usize; 2],
        output_padding: [usize; 2],
    ) -> Result<Tensor> {
        let (x, w) = (self.shape(), weight.shape());
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "conv_transpose2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        };
        if x.len() != 4 || w.len() != 4 || x[1] != w[0] {
            return Err(mismatch());
        }
        let out_h = conv_transpose_out_len(x[2], w[2], stride[0], padding[0], output_padding[0])
            .ok_or_else(mismatch)?;
        let out_w = conv_transpose_out_len(x[3], w[3], stride[1], padding[1], output_padding[1])
            .ok_or_else(mismatch)?;
        let geom = ConvGeom {
            batch: x[0],
            in_ch: w[1],
            out_ch: w[0],
            in_hw: [out_h, out_w],
            out_hw: [x[2], x[3]],
            kernel: [w[2], w[3]],
            stride,
            padding,
        };
        Ok(self.conv_input_grad_raw(weight, geom))
    }

    fn conv_raw(&self, weight: &Tensor, geom: ConvGeom) -> Tensor {
        let y = geom.forward(self.value(), weight.value());
        Tensor::from_op(y, Op::Conv(geom), vec![self.clone(), weight.clone()])
    }

    fn conv_input_grad_raw(&self, weight: &Tensor, geom: ConvGeom) -> Tensor {
        let x = geom.input_grad(self.value(), weight.value());
        Tensor::from_op(x, Op::ConvInputGrad(geom), vec![self.clone(), weight.clone()])
    }

    fn conv_weight_grad_raw(x: &Tensor, gy: &Tensor, geom: ConvGeom) -> Tensor {
        let w = geom.weight_grad(x.value(), gy.value());
        Tensor::from_op(w, Op::ConvWeightGrad(geom), vec![x.clone(), gy.clone()])
    }

    /// `out[i] = self[index[i]]` (flat indices), reshaped to `shape`.
    pub fn gather(&self, index: Rc<[usize]>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != index.len() || index.iter().any(|&i| i >= self.numel()) {
            return Err(AutodiffError::InvalidShape {
                op: "gather",
                shape: shape.to_vec(),
                reason: format!("{} indices into {} values", index.len(), self.numel()),
            });
        }
        let src = self.value().data();
        let data = index.iter().map(|&i| src[i]).collect();
        Ok(Tensor::from_op(
            Array::from_parts(shape.to_vec(), data),
            Op::Gather(index),
            vec![self.clone()],
        ))
    }

    /// `out[index[i]] += self[i]` into a zero tensor of `shape`.
    pub fn scatter_add(&self, index: Rc<[usize]>, shape: &[usize]) -> Result<Tensor> {
        let n = numel(shape);
        if self.numel() != index.len() || index.iter().any(|&i| i >= n) {
            return Err(AutodiffError::InvalidShape {
                op: "scatter_add",
                shape: shape.to_vec(),
                reason: format!("{} indices for {} values", index.len(), self.numel()),
            });
        }
        let mut out = vec![0.0; n];
        for (&i, &v) in index.iter().zip(self.value().data()) {
            out[i] += v;
        }
        Ok(Tensor::from_op(
            Array::from_parts(shape.to_vec(), out),
            Op::ScatterAdd(index),
            vec![self.clone()],
        ))
    }

    /// Max pooling over `[B, C, H, W]` with window `kernel` and `stride`.
    /// Ties resolve to the first maximum in scan order.
    pub fn max_pool2d(&self, kernel: [usize; 2], stride: [usize; 2]) -> Result<Tensor> {
        let s = self.shape();
        let bad = || AutodiffError::InvalidShape {
            op: "max_pool2d",
            shape: s.to_vec(),
            reason: format!("kernel {kernel:?} stride {stride:?}"),
        };
        if s.len() != 4 {
            return Err(bad());
        }
        let oh = conv_out_len(s[2], kernel[0], stride[0], 0).ok_or_else(bad)?;
        let ow = conv_out_len(s[3], kernel[1], stride[1], 0).ok_or_else(bad)?;
        let src = self.value().data();
        let mut index = Vec::with_capacity(s[0] * s[1] * oh * ow);
        for plane in 0..s[0] * s[1] {
            let base = plane * s[2] * s[3];
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * stride[0] * s[3] + j * stride[1];
                    for ki in 0..kernel[0] {
                        for kj in 0..kernel[1] {
                            let at = base + (i * stride[0] + ki) * s[3] + j * stride[1] + kj;
                            if src[at] > src[best] {
                                best = at;
                            }
                        }
                    }
                    index.push(best);
                }
            }
        }
        self.gather(index.into(), &[s[0], s[1], oh, ow])
    }

    /// Input gradients of this node given upstream `u`; `None` where the
    /// input needs none.
    fn input_grads(&self, u: &Tensor, need: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let inputs = &self.0.inputs;
        let x = || &inputs[0];
        let mask = |f: &dyn Fn(f64) -> f64| Tensor::constant(x().value().map(f));
        let one = |g: Tensor| Ok(vec![Some(g)]);
        match &self.0.op {
            Op::Leaf => Ok(Vec::new()),
            Op::Add => Ok(vec![Some(u.clone()), Some(u.clone())]),
            Op::Sub => Ok(vec![Some(u.clone()), need[1].then(|| u.neg())]),
            Op::Mul => Ok(vec![
                if need[0] { Some(u.mul(&inputs[1])?) } else { None },
                if need[1] { Some(u.mul(&inputs[0])?) } else { None },
            ]),
            Op::Div => {
                let q = u.div(&inputs[1])?;
                let db = if need[1] {
                    Some(q.mul(&inputs[0].div(&inputs[1])?)?.neg())
                } else {
                    None
                };
                Ok(vec![Some(q), db])
            }
            Op::Neg => one(u.neg()),
            Op::Scale(c) => one(u.scale(*c)),
            Op::AddScalar => one(u.clone()),
            Op::Pow(p) => {
                let d = if *p == 1.0 {
                    u.clone()
                } else if *p == 2.0 {
                    u.mul(x())?.scale(2.0)
                } else {
                    u.mul(&x().powf(p - 1.0))?.scale(*p)
                };
                one(d)
            }
            Op::Exp => one(u.mul(&x().exp())?),
            Op::Log => one(u.div(x())?),
            Op::Tanh => {
                let th = x().tanh();
                one(u.mul(&th.square().neg().add_scalar(1.0))?)
            }
            Op::Sigmoid => {
                let s = x().sigmoid();
                one(u.mul(&s.mul(&s.neg().add_scalar(1.0))?)?)
            }
            Op::Softplus => one(u.mul(&x().sigmoid())?),
            Op::Relu => one(u.mul(&mask(&|v| if v > 0.0 { 1.0 } else { 0.0 }))?),
            Op::LeakyRelu(a) => {
                let a = *a;
                one(u.mul(&mask(&|v| if v > 0.0 { 1.0 } else { a }))?)
            }
            Op::ClampMin(f) => {
                let f = *f;
                one(u.mul(&mask(&|v| if v > f { 1.0 } else { 0.0 }))?)
            }
            Op::Matmul => Ok(vec![
                if need[0] { Some(u.matmul(&inputs[1].t()?)?) } else { None },
                if need[1] { Some(inputs[0].t()?.matmul(u)?) } else { None },
            ]),
            Op::Transpose => one(u.t()?),
            Op::Reshape => one(u.reshape(x().shape())?),
            Op::BroadcastTo => one(u.sum_to(x().shape())?),
            Op::SumTo => one(u.broadcast_to(x().shape())?),
            Op::Conv(g) => Ok(vec![
                need[0].then(|| u.conv_input_grad_raw(&inputs[1], *g)),
                need[1].then(|| Tensor::conv_weight_grad_raw(&inputs[0], u, *g)),
            ]),
            Op::ConvInputGrad(g) => Ok(vec![
                need[0].then(|| u.conv_raw(&inputs[1], *g)),
                need[1].then(|| Tensor::conv_weight_grad_raw(u, &inputs[0], *g)),
            ]),
            Op::ConvWeightGrad(g) => Ok(vec![
                need[0].then(|| inputs[1].conv_input_grad_raw(u, *g)),
                need[1].then(|| inputs[0].conv_raw(u, *g)),
            ]),
            Op::Gather(idx) => one(u.scatter_add(idx.clone(), x().shape())?),
            Op::ScatterAdd(idx) => one(u.gather(idx.clone(), x().shape())?),
        }
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

pub(crate) fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

/// Gradients produced by [`backward`], keyed by tensor identity.
#[derive(Default)]
pub struct Gradients {
    map: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.map.get(&t.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Nodes reachable from `root` through requires-grad edges, inputs before
/// consumers.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for inp in t.0.inputs.iter().rev() {
            if inp.requires_grad() && !visited.contains(&inp.id()) {
                stack.push((inp.clone(), false));
            }
        }
    }
    order
}

fn run_backward(
    root: &Tensor,
    targets: Option<&HashSet<u64>>,
    create_graph: bool,
) -> Result<HashMap<u64, Tensor>> {
    if root.numel() != 1 {
        return Err(AutodiffError::NonScalarRoot {
            shape: root.shape().to_vec(),
        });
    }
    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    if !root.requires_grad() {
        return Ok(grads);
    }
    let order = topo_order(root);
    // With explicit targets only nodes that lead to a target propagate.
    let needed: Option<HashSet<u64>> = targets.map(|targets| {
        let mut needed = HashSet::new();
        for t in &order {
            if targets.contains(&t.id()) || t.0.inputs.iter().any(|i| needed.contains(&i.id())) {
                needed.insert(t.id());
            }
        }
        needed
    });
    let is_needed = |t: &Tensor| t.requires_grad() && needed.as_ref().is_none_or(|n| n.contains(&t.id()));

    with_grad_mode(create_graph, || {
        grads.insert(root.id(), Tensor::constant(Array::full(root.shape(), 1.0)));
        for node in order.iter().rev() {
            if node.is_leaf() || !is_needed(node) {
                continue;
            }
            let Some(u) = grads.get(&node.id()).cloned() else { continue };
            let need: Vec<bool> = node.0.inputs.iter().map(&is_needed).collect();
            let input_grads = node.input_grads(&u, &need)?;
            for ((inp, g), &want) in node.0.inputs.iter().zip(input_grads).zip(&need) {
                let Some(g) = g else { continue };
                if !want {
                    continue;
                }
                if !g.value().is_finite() {
                    return Err(AutodiffError::NonFinite {
                        op: node.op_name(),
                        node: node.id(),
                    });
                }
                let acc = match grads.remove(&inp.id()) {
                    Some(prev) => prev.add(&g)?,
                    None => g,
                };
                grads.insert(inp.id(), acc);
            }
        }
        Ok(())
    })?;
    Ok(grads)
}

/// Gradients of a scalar `root` with respect to every reachable tensor that
/// requires grad. With `create_graph` the gradients are themselves
/// differentiable.
pub fn backward(root: &Tensor, create_graph: bool) -> Result<Gradients> {
    Ok(Gradients {
        map: run_backward(root, None, create_graph)?,
    })
}

/// Gradients of a scalar `root` with respect to `wrt` only; unreachable
/// inputs get zeros.
pub fn grad(root: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    let targets: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();
    let map = run_backward(root, Some(&targets), create_graph)?;
    Ok(wrt
        .iter()
        .map(|t| {
            map.get(&t.id())
                .cloned()
                .unwrap_or_else(|| Tensor::constant(Array::zeros(t.shape())))
        })
        .collect())
}
