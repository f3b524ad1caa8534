use std::cell::RefCell;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::ops::{axis_blocks, gemm, operand_indices, sigmoid, softplus};
use super::{broadcast_shape, check_finite, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

/// A primitive whose forward pass is computed by the caller and whose
/// vector-Jacobian product is supplied by the implementation.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input given the gradient of the output.
    /// Entries may be `None` for inputs that receive no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Linear { x: usize, w: usize, b: Option<usize> },
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    LeakyRelu(usize, f64),
    Powf(usize, f64),
    Clamp(usize, f64, f64),
    Sum(usize),
    SumAxis(usize, usize),
    Concat(Vec<usize>, usize),
    Slice { input: usize, axis: usize, start: usize },
    Reshape(usize),
    BroadcastTo(usize),
    Custom(Box<dyn CustomOp>, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf | Constant => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Transpose(a) | Neg(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Tanh(a)
            | Sigmoid(a) | Softplus(a) | LeakyRelu(a, _) | Powf(a, _) | Clamp(a, _, _)
            | Sum(a) | SumAxis(a, _) | Reshape(a) | BroadcastTo(a) => vec![*a],
            Slice { input, .. } => vec![*input],
            Concat(v, _) | Custom(_, v) => v.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Records primitive operations for one forward pass.
///
/// Nodes are appended in execution order, so inputs always precede their
/// consumers. A tape supports a single call to [`Tape::backward`].
pub struct Tape {
    id: usize,
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("nodes", &self.len())
            .finish()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Option<Vec<usize>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf, if the leaf requires
    /// gradients and lies in the loss's ancestry.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index)?.as_deref()
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.get(v)?.to_vec();
        let shape = self.shapes[v.index].clone()?;
        Some(Tensor::from_parts(shape, g))
    }

    /// Copies the gradient of `v` into `t.grad`.
    pub fn fill(&self, v: Var, t: &mut Tensor) {
        t.grad = self.get(v).map(|g| g.to_vec());
    }

    /// Number of leaves that received a gradient.
    pub fn count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn unary_grad(slot: &mut Option<Vec<f64>>, g: &[f64], f: impl Fn(usize) -> f64) {
    accumulate(slot, g.len(), |buf| {
        for (i, b) in buf.iter_mut().enumerate() {
            *b += g[i] * f(i);
        }
    });
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Graph(format!(
                "variable belongs to tape {} but was used on tape {}",
                v.tape, self.id
            )));
        }
        if v.index >= self.len() {
            return Err(Error::Graph(format!("dangling variable index {}", v.index)));
        }
        Ok(v.index)
    }

    fn push(&self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let mut inner = self.inner.borrow_mut();
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            other => other.inputs().iter().any(|&i| inner.nodes[i].needs_grad),
        };
        let index = inner.nodes.len();
        let value = Tensor::from_parts(value.shape, value.data);
        inner.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            index,
        })
    }

    /// Registers an input. It participates in backward iff `t.requires_grad`.
    pub fn input(&self, t: Tensor) -> Result<Var> {
        if t.requires_grad {
            self.leaf(t)
        } else {
            self.constant(t)
        }
    }

    /// Registers a differentiable leaf.
    pub fn leaf(&self, t: Tensor) -> Result<Var> {
        self.push("leaf", t, Op::Leaf)
    }

    pub fn constant(&self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Constant)
    }

    pub fn value(&self, v: Var) -> Result<Tensor> {
        let i = self.check(v)?;
        Ok(self.inner.borrow().nodes[i].value.clone())
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        let i = self.check(v)?;
        Ok(self.inner.borrow().nodes[i].value.shape().to_vec())
    }

    pub fn data(&self, v: Var) -> Result<Vec<f64>> {
        let i = self.check(v)?;
        Ok(self.inner.borrow().nodes[i].value.data().to_vec())
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        let i = self.check(v)?;
        self.inner.borrow().nodes[i].value.item()
    }

    /// Runs `f` on the value of `v` without copying it.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> Result<R> {
        let i = self.check(v)?;
        Ok(f(&self.inner.borrow().nodes[i].value))
    }

    fn unary(
        &self,
        name: &'static str,
        a: Var,
        op: Op,
        f: impl Fn(f64) -> Result<f64>,
    ) -> Result<Var> {
        let ia = self.check(a)?;
        let out = {
            let inner = self.inner.borrow();
            let x = &inner.nodes[ia].value;
            let data = x.data().iter().map(|&v| f(v)).collect::<Result<Vec<_>>>()?;
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        self.push(name, out, op)
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        make: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> Result<f64>,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = {
            let inner = self.inner.borrow();
            let (x, y) = (&inner.nodes[ia].value, &inner.nodes[ib].value);
            let shape = broadcast_shape(x.shape(), y.shape()).ok_or_else(|| {
                Error::shape(
                    name,
                    format!("cannot broadcast {:?} with {:?}", x.shape(), y.shape()),
                )
            })?;
            let n: usize = shape.iter().product();
            let (xa, ya) = (operand_indices(x.shape(), &shape), operand_indices(y.shape(), &shape));
            let (xd, yd) = (x.data(), y.data());
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let u = xd[xa.as_ref().map_or(i, |m| m[i])];
                let w = yd[ya.as_ref().map_or(i, |m| m[i])];
                data.push(f(u, w)?);
            }
            Tensor::from_parts(shape, data)
        };
        self.push(name, out, make(ia, ib))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| Ok(x + y))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |x, y| Ok(x - y))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| Ok(x * y))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div, |x, y| {
            if y == 0.0 {
                Err(Error::domain("div", "division by zero"))
            } else {
                Ok(x / y)
            }
        })
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary("neg", a, Op::Neg(ia), |x| Ok(-x))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary("scale", a, Op::Scale(ia, c), |x| Ok(c * x))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary("add_scalar", a, Op::AddScalar(ia), |x| Ok(x + c))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary("exp", a, Op::Exp(ia), |x| Ok(x.exp()))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary("log", a, Op::Log(ia), |x| {
            if x <= 0.0 {
                Err(Error::domain("log", format!("log of non-positive value {x}")))
            } else {
                Ok(x.ln())
            }
        })
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary("tanh", a, Op::Tanh(ia), |x| Ok(x.tanh()))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary("sigmoid", a, Op::Sigmoid(ia), |x| Ok(sigmoid(x)))
    }

    pub fn softplus(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary("softplus", a, Op::Softplus(ia), |x| Ok(softplus(x)))
    }

    /// `x` for `x >= 0`, `slope * x` otherwise.
    pub fn leaky_relu(&self, a: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::domain("leaky_relu", format!("slope {slope} outside (0, 1)")));
        }
        let ia = self.check(a)?;
        self.unary("leaky_relu", a, Op::LeakyRelu(ia, slope), |x| {
            Ok(if x >= 0.0 { x } else { slope * x })
        })
    }

    /// Elementwise `x^p` for a constant exponent.
    pub fn powf(&self, a: Var, p: f64) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary("pow", a, Op::Powf(ia, p), |x| {
            if x < 0.0 && p.fract() != 0.0 {
                Err(Error::domain("pow", format!("negative base {x} with exponent {p}")))
            } else {
                Ok(x.powf(p))
            }
        })
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.powf(a, 2.0)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary("clamp", a, Op::Clamp(ia, lo, hi), |x| Ok(x.clamp(lo, hi)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.with_value(a, |t| t.data().iter().sum::<f64>())?;
        self.push("sum", Tensor::scalar(s), Op::Sum(ia))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.with_value(a, |t| t.len())?;
        if n == 0 {
            return Err(Error::shape("mean", "mean of empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums out one axis.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.with_value(a, |t| {
            if axis >= t.rank() {
                return Err(Error::shape("sum_axis", format!("axis {axis} for shape {:?}", t.shape())));
            }
            let (outer, mid, inner) = axis_blocks(t.shape(), axis);
            let mut data = vec![0.0; outer * inner];
            let d = t.data();
            for o in 0..outer {
                for m in 0..mid {
                    let src = &d[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                    for (dst, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *dst += s;
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            Ok(Tensor::from_parts(shape, data))
        })??;
        self.push("sum_axis", out, Op::SumAxis(ia, axis))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = {
            let inner = self.inner.borrow();
            let (x, y) = (&inner.nodes[ia].value, &inner.nodes[ib].value);
            if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", x.shape(), y.shape()),
                ));
            }
            let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, x.data(), false, y.data(), false, 0.0, &mut c);
            Tensor::from_parts(vec![m, n], c)
        };
        self.push("matmul", out, Op::MatMul(ia, ib))
    }

    /// Affine map `x · wᵀ + b` with `x: [batch, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = b.map(|b| self.check(b)).transpose()?;
        let out = {
            let inner = self.inner.borrow();
            let (xv, wv) = (&inner.nodes[ix].value, &inner.nodes[iw].value);
            if xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[1] {
                return Err(Error::shape(
                    "linear",
                    format!("input {:?} with weight {:?}", xv.shape(), wv.shape()),
                ));
            }
            let (m, k, n) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
            let mut c = vec![0.0; m * n];
            let mut beta = 0.0;
            if let Some(ib) = ib {
                let bv = &inner.nodes[ib].value;
                if bv.shape() != [n] {
                    return Err(Error::shape(
                        "linear",
                        format!("bias {:?} for {} outputs", bv.shape(), n),
                    ));
                }
                for row in c.chunks_mut(n) {
                    row.copy_from_slice(bv.data());
                }
                beta = 1.0;
            }
            gemm(m, k, n, xv.data(), false, wv.data(), true, beta, &mut c);
            Tensor::from_parts(vec![m, n], c)
        };
        self.push("linear", out, Op::Linear { x: ix, w: iw, b: ib })
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.with_value(a, |t| {
            if t.rank() != 2 {
                return Err(Error::shape("transpose", format!("rank {} tensor", t.rank())));
            }
            let (r, c) = (t.shape()[0], t.shape()[1]);
            let d = t.data();
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = d[i * c + j];
                }
            }
            Ok(Tensor::from_parts(vec![c, r], data))
        })??;
        self.push("transpose", out, Op::Transpose(ia))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "nothing to concatenate"));
        }
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let out = {
            let inner = self.inner.borrow();
            let first = inner.nodes[idx[0]].value.shape().to_vec();
            if axis >= first.len() {
                return Err(Error::shape("concat", format!("axis {axis} for shape {first:?}")));
            }
            let mut total = 0;
            for &i in &idx {
                let s = inner.nodes[i].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", format!("{first:?} with {s:?} on axis {axis}")));
                }
                total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner_sz) = axis_blocks(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for &i in &idx {
                    let v = &inner.nodes[i].value;
                    let chunk = v.shape()[axis] * inner_sz;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::from_parts(shape, data)
        };
        self.push("concat", out, Op::Concat(idx, axis))
    }

    /// The half-open range `start..end` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.with_value(a, |t| {
            if axis >= t.rank() || start > end || end > t.shape()[axis] {
                return Err(Error::shape(
                    "slice",
                    format!("{start}..{end} on axis {axis} of {:?}", t.shape()),
                ));
            }
            let (outer, mid, inner) = axis_blocks(t.shape(), axis);
            let width = (end - start) * inner;
            let mut data = Vec::with_capacity(outer * width);
            for o in 0..outer {
                let base = (o * mid + start) * inner;
                data.extend_from_slice(&t.data()[base..base + width]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = end - start;
            Ok(Tensor::from_parts(shape, data))
        })??;
        self.push("slice", out, Op::Slice { input: ia, axis, start })
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.with_value(a, |t| t.reshape(shape.to_vec()))??;
        self.push("reshape", out, Op::Reshape(ia))
    }

    /// Explicitly repeats `a` to `shape` following trailing-axis alignment.
    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.with_value(a, |t| {
            if broadcast_shape(t.shape(), shape).as_deref() != Some(shape) {
                return Err(Error::shape(
                    "broadcast",
                    format!("{:?} does not broadcast to {:?}", t.shape(), shape),
                ));
            }
            let data = match operand_indices(t.shape(), shape) {
                None => t.data().to_vec(),
                Some(m) => m.iter().map(|&j| t.data()[j]).collect(),
            };
            Ok(Tensor::from_parts(shape.to_vec(), data))
        })??;
        self.push("broadcast", out, Op::BroadcastTo(ia))
    }

    /// Records a caller-computed output together with its backward rule.
    pub fn custom(&self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Result<Var> {
        let idx = inputs.iter().map(|&i| self.check(i)).collect::<Result<Vec<_>>>()?;
        let name = op.name();
        self.push(name, output, Op::Custom(op, idx))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// differentiable leaf in the loss's ancestry.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Graph("backward already ran on this tape".into()));
        }
        if inner.nodes[il].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, shape is {:?}", inner.nodes[il].value.shape()),
            ));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[il].needs_grad {
            grads[il] = Some(vec![1.0]);
        }
        for i in (0..=il).rev() {
            let node = &nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(nodes, i, &g, &mut grads);
        }
        let mut shapes = vec![None; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                shapes[i] = Some(node.value.shape().to_vec());
            } else {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }

    fn propagate(&self, nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &nodes[i].value;
        let val = |j: usize| &nodes[j].value;
        let wants = |j: usize| nodes[j].needs_grad;
        match &nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (j, s) in [(*a, 1.0), (*b, sign)] {
                    if wants(j) {
                        reduce_into(&mut grads[j], val(j).shape(), out.shape(), |k| s * g[k]);
                    }
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let shape = out.shape();
                let ma = operand_indices(val(a).shape(), shape);
                let mb = operand_indices(val(b).shape(), shape);
                let at = |k: usize| val(a).data()[ma.as_ref().map_or(k, |m| m[k])];
                let bt = |k: usize| val(b).data()[mb.as_ref().map_or(k, |m| m[k])];
                let is_div = matches!(nodes[i].op, Op::Div(..));
                if wants(a) {
                    if is_div {
                        reduce_into(&mut grads[a], val(a).shape(), shape, |k| g[k] / bt(k));
                    } else {
                        reduce_into(&mut grads[a], val(a).shape(), shape, |k| g[k] * bt(k));
                    }
                }
                if wants(b) {
                    if is_div {
                        reduce_into(&mut grads[b], val(b).shape(), shape, |k| {
                            -g[k] * at(k) / (bt(k) * bt(k))
                        });
                    } else {
                        reduce_into(&mut grads[b], val(b).shape(), shape, |k| g[k] * at(k));
                    }
                }
            }
            Op::Neg(a) => unary_grad(&mut grads[*a], g, |_| -1.0),
            Op::Scale(a, c) => unary_grad(&mut grads[*a], g, |_| *c),
            Op::AddScalar(a) => unary_grad(&mut grads[*a], g, |_| 1.0),
            Op::Exp(a) => unary_grad(&mut grads[*a], g, |k| out.data()[k]),
            Op::Log(a) => {
                let x = val(*a).data();
                unary_grad(&mut grads[*a], g, |k| 1.0 / x[k])
            }
            Op::Tanh(a) => unary_grad(&mut grads[*a], g, |k| 1.0 - out.data()[k].powi(2)),
            Op::Sigmoid(a) => {
                unary_grad(&mut grads[*a], g, |k| out.data()[k] * (1.0 - out.data()[k]))
            }
            Op::Softplus(a) => {
                let x = val(*a).data();
                unary_grad(&mut grads[*a], g, |k| sigmoid(x[k]))
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(*a).data();
                unary_grad(&mut grads[*a], g, |k| if x[k] >= 0.0 { 1.0 } else { *slope })
            }
            Op::Powf(a, p) => {
                let x = val(*a).data();
                unary_grad(&mut grads[*a], g, |k| p * x[k].powf(p - 1.0))
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a).data();
                unary_grad(&mut grads[*a], g, |k| {
                    if x[k] >= *lo && x[k] <= *hi {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
            Op::Sum(a) => unary_grad(&mut grads[*a], &vec![g[0]; val(*a).len()], |_| 1.0),
            Op::SumAxis(a, axis) => {
                let (outer, mid, inner) = axis_blocks(val(*a).shape(), *axis);
                accumulate(&mut grads[*a], val(*a).len(), |buf| {
                    for o in 0..outer {
                        for m in 0..mid {
                            let dst = &mut buf[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += s;
                            }
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if wants(a) {
                    let bd = val(b).data();
                    accumulate(&mut grads[a], m * k, |buf| gemm(m, n, k, g, false, bd, true, 1.0, buf));
                }
                if wants(b) {
                    let ad = val(a).data();
                    accumulate(&mut grads[b], k * n, |buf| gemm(k, m, n, ad, true, g, false, 1.0, buf));
                }
            }
            Op::Linear { x, w, b } => {
                let (x, w) = (*x, *w);
                let (m, k) = (val(x).shape()[0], val(x).shape()[1]);
                let n = val(w).shape()[0];
                if wants(x) {
                    let wd = val(w).data();
                    accumulate(&mut grads[x], m * k, |buf| gemm(m, n, k, g, false, wd, false, 1.0, buf));
                }
                if wants(w) {
                    let xd = val(x).data();
                    accumulate(&mut grads[w], n * k, |buf| gemm(n, m, k, g, true, xd, false, 1.0, buf));
                }
                if let Some(b) = *b {
                    if wants(b) {
                        accumulate(&mut grads[b], n, |buf| {
                            for row in g.chunks(n) {
                                for (d, &s) in buf.iter_mut().zip(row) {
                                    *d += s;
                                }
                            }
                        });
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                accumulate(&mut grads[*a], r * c, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_blocks(out.shape(), *axis);
                let row = out.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = val(p).shape()[*axis] * inner;
                    if wants(p) {
                        accumulate(&mut grads[p], val(p).len(), |buf| {
                            for o in 0..outer {
                                let src = &g[o * row + offset..o * row + offset + chunk];
                                for (d, &s) in buf[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        });
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, mid, inner) = axis_blocks(val(*input).shape(), *axis);
                let width = out.shape()[*axis] * inner;
                accumulate(&mut grads[*input], val(*input).len(), |buf| {
                    for o in 0..outer {
                        let base = (o * mid + start) * inner;
                        for (d, &s) in buf[base..base + width].iter_mut().zip(&g[o * width..(o + 1) * width]) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Reshape(a) => unary_grad(&mut grads[*a], g, |_| 1.0),
            Op::BroadcastTo(a) => {
                reduce_into(&mut grads[*a], val(*a).shape(), out.shape(), |k| g[k]);
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&j| val(j)).collect();
                let gs = op.backward(&ins, out, g);
                for (&j, gj) in inputs.iter().zip(gs) {
                    if let (true, Some(gj)) = (wants(j), gj) {
                        debug_assert_eq!(gj.len(), val(j).len());
                        accumulate(&mut grads[j], gj.len(), |buf| {
                            for (d, s) in buf.iter_mut().zip(gj) {
                                *d += s;
                            }
                        });
                    }
                }
            }
        }
    }
}

/// Accumulates `f(k)` for every output index `k` into the operand slot,
/// summing over broadcast axes.
fn reduce_into(
    slot: &mut Option<Vec<f64>>,
    operand: &[usize],
    out: &[usize],
    f: impl Fn(usize) -> f64,
) {
    let n_op: usize = operand.iter().product();
    let n_out: usize = out.iter().product();
    let map = operand_indices(operand, out);
    accumulate(slot, n_op, |buf| match map {
        None => {
            for (k, b) in buf.iter_mut().enumerate() {
                *b += f(k);
            }
        }
        Some(m) => {
            for k in 0..n_out {
                buf[m[k]] += f(k);
            }
        }
    });
}
