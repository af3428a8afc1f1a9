use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use log::warn;

use super::tensor::{
    conv2d_valid_kernel, matmul_at_kernel, matmul_bt_kernel, matmul_kernel, Tensor,
};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Input,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulConst {
        w: Arc<Tensor>,
        x: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
    },
    Tanh(usize),
    Sigmoid(usize),
    Sin(usize),
    Reshape(usize),
    Mean(usize),
    Variance(usize),
    SumSquares(usize),
    L2Norm(usize),
    Dot(usize, usize),
    Concat(Vec<usize>),
    Slice {
        src: usize,
        offset: usize,
        len: usize,
    },
    ScaleBy {
        x: usize,
        s: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of primitive operations for one reverse-mode pass.
///
/// Nodes are appended in evaluation order, so the record is topologically
/// sorted and the backward sweep visits each node once, newest first.
/// A tape is confined to one thread; run independent tapes to parallelise.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    tracing: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("tracing", &self.tracing)
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            tracing: true,
        }
    }

    /// A tape that evaluates but records no gradient dependencies.
    pub fn untraced() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            tracing: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        let op = if self.tracing { Op::Input } else { Op::Constant };
        let requires_grad = self.tracing;
        self.push(value, op, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert!(
            value.data().iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn requires(&self, idx: usize) -> bool {
        self.tracing && self.nodes.borrow()[idx].requires_grad
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.idx].value.shape().to_vec();
        if nodes[output.idx].value.len() != 1 {
            return Err(Error::NotScalar(out_shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.idx + 1];
        grads[output.idx] = Some(Tensor::filled(out_shape, 1.0));

        for i in (0..=output.idx).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let needs = |j: usize| nodes[j].requires_grad;
            match &node.op {
                Op::Input | Op::Constant => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.zip(&nodes[*b].value, |x, y| x * y));
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, g.zip(&nodes[*a].value, |x, y| x * y));
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|v| v * s));
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if needs(*a) {
                        let da = matmul_bt_kernel(g.data(), nodes[*b].value.data(), m, k, n);
                        accumulate(&mut grads, *a, Tensor::from_parts(vec![m, k], da));
                    }
                    if needs(*b) {
                        let db = matmul_at_kernel(nodes[*a].value.data(), g.data(), m, k, n);
                        accumulate(&mut grads, *b, Tensor::from_parts(vec![k, n], db));
                    }
                }
                Op::MatMulConst { w, x, m, k, n } => {
                    let dx = matmul_at_kernel(w.data(), g.data(), *m, *k, *n);
                    let shape = nodes[*x].value.shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::from_parts(shape, dx));
                }
                Op::Conv2d {
                    input,
                    kernel,
                    h,
                    w,
                    kh,
                    kw,
                } => {
                    let (h, w, kh, kw) = (*h, *w, *kh, *kw);
                    let (oh, ow) = (h - kh + 1, w - kw + 1);
                    let gd = g.data();
                    if needs(*input) {
                        let kd = nodes[*kernel].value.data();
                        let mut di = vec![0.0; h * w];
                        for y in 0..oh {
                            for x in 0..ow {
                                let gv = gd[y * ow + x];
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        di[(y + dy) * w + x + dx] += gv * kd[dy * kw + dx];
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, *input, Tensor::from_parts(vec![h, w], di));
                    }
                    if needs(*kernel) {
                        let id = nodes[*input].value.data();
                        let mut dk = vec![0.0; kh * kw];
                        for y in 0..oh {
                            for x in 0..ow {
                                let gv = gd[y * ow + x];
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        dk[dy * kw + dx] += gv * id[(y + dy) * w + x + dx];
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, *kernel, Tensor::from_parts(vec![kh, kw], dk));
                    }
                }
                Op::Tanh(a) => {
                    let d = g.zip(&node.value, |gv, y| gv * (1.0 - y * y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip(&node.value, |gv, y| gv * y * (1.0 - y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Sin(a) => {
                    let d = g.zip(&nodes[*a].value, |gv, x| gv * x.cos());
                    accumulate(&mut grads, *a, d);
                }
                Op::Reshape(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::from_parts(shape, g.into_data()));
                }
                Op::Mean(a) => {
                    let src = &nodes[*a].value;
                    let v = g.item() / src.len() as f64;
                    accumulate(&mut grads, *a, Tensor::filled(src.shape().to_vec(), v));
                }
                Op::Variance(a) => {
                    let src = &nodes[*a].value;
                    let n = src.len() as f64;
                    let mean = src.data().iter().sum::<f64>() / n;
                    let s = 2.0 * g.item() / n;
                    accumulate(&mut grads, *a, src.map(|x| s * (x - mean)));
                }
                Op::SumSquares(a) => {
                    let s = 2.0 * g.item();
                    accumulate(&mut grads, *a, nodes[*a].value.map(|x| s * x));
                }
                Op::L2Norm(a) => {
                    let norm = node.value.item();
                    let s = if norm > 0.0 { g.item() / norm } else { 0.0 };
                    accumulate(&mut grads, *a, nodes[*a].value.map(|x| s * x));
                }
                Op::Dot(a, b) => {
                    let s = g.item();
                    if needs(*a) {
                        accumulate(&mut grads, *a, nodes[*b].value.map(|x| s * x));
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, nodes[*a].value.map(|x| s * x));
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let src = &nodes[p].value;
                        let len = src.len();
                        if needs(p) {
                            let piece = g.data()[offset..offset + len].to_vec();
                            accumulate(
                                &mut grads,
                                p,
                                Tensor::from_parts(src.shape().to_vec(), piece),
                            );
                        }
                        offset += len;
                    }
                }
                Op::Slice { src, offset, len } => {
                    let shape = nodes[*src].value.shape().to_vec();
                    let mut d = Tensor::zeros(shape);
                    d.data_mut()[*offset..offset + len].copy_from_slice(g.data());
                    accumulate(&mut grads, *src, d);
                }
                Op::ScaleBy { x, s } => {
                    let sv = nodes[*s].value.item();
                    if needs(*x) {
                        accumulate(&mut grads, *x, g.map(|v| v * sv));
                    }
                    if needs(*s) {
                        let ds: f64 = g
                            .data()
                            .iter()
                            .zip(nodes[*x].value.data())
                            .map(|(a, b)| a * b)
                            .sum();
                        accumulate(&mut grads, *s, Tensor::scalar(ds));
                    }
                }
            }
        }

        let shapes = nodes[..=output.idx]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let inputs = nodes[..=output.idx]
            .iter()
            .map(|n| matches!(n.op, Op::Input))
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            inputs,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of one scalar output with respect to every traced input.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    inputs: Vec<bool>,
}

impl Gradients {
    /// Gradient for `var`, zero when `var` does not influence the output.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.idx).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                if self.inputs.get(var.idx).copied().unwrap_or(false) {
                    warn!("input #{} is detached from the output; gradient is zero", var.idx);
                }
                let shape = self
                    .shapes
                    .get(var.idx)
                    .cloned()
                    .unwrap_or_else(|| var.shape());
                Tensor::zeros(shape)
            }
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value.item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.idx].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn req(&self) -> bool {
        self.tape.requires(self.idx)
    }

    fn unary(self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'t> {
        let value = f(&self.tape.nodes.borrow()[self.idx].value);
        self.tape.push(value, op, self.req())
    }

    fn elementwise(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[other.idx].value);
            if a.shape() != b.shape() {
                return Err(mismatch(name, a, b));
            }
            a.zip(b, f)
        };
        Ok(self.tape.push(value, op, self.req() || other.req()))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", Op::Add(self.idx, other.idx), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", Op::Sub(self.idx, other.idx), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", Op::Mul(self.idx, other.idx), |a, b| a * b)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.idx, s), |t| t.map(|v| v * s))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        // The shift does not affect the derivative, so a Scale node suffices.
        self.unary(Op::Scale(self.idx, scale), |t| t.map(|v| scale * v + shift))
    }

    /// Multiplies every element by the one-element tensor `s`.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, sv) = (&nodes[self.idx].value, &nodes[s.idx].value);
            if !sv.is_scalar() {
                return Err(mismatch("scale_by", x, sv));
            }
            let k = sv.item();
            x.map(|v| v * k)
        };
        let op = Op::ScaleBy {
            x: self.idx,
            s: s.idx,
        };
        Ok(self.tape.push(value, op, self.req() || s.req()))
    }

    /// `[m, k] x [k, n]`; 1-D right operands are treated as `[k, 1]` columns.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (value, m, k, n) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[other.idx].value);
            let (m, k, n) = match (a.shape(), b.shape()) {
                ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
                _ => return Err(mismatch("matmul", a, b)),
            };
            (matmul_kernel(a.data(), b.data(), m, k, n), m, k, n)
        };
        let op = Op::MatMul {
            a: self.idx,
            b: other.idx,
            m,
            k,
            n,
        };
        let req = self.req() || other.req();
        Ok(self
            .tape
            .push(Tensor::from_parts(vec![m, n], value), op, req))
    }

    /// `w · self` for a frozen matrix `w: [m, k]` that never enters the tape.
    ///
    /// `self` may be `[k]` (result `[m]`) or `[k, n]` (result `[m, n]`).
    pub fn premul(self, w: &Arc<Tensor>) -> Result<Var<'t>> {
        let (value, shape, m, k, n) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let (m, k, n, shape) = match (w.shape(), x.shape()) {
                ([m, k], [k2]) if k == k2 => (*m, *k, 1, vec![*m]),
                ([m, k], [k2, n]) if k == k2 => (*m, *k, *n, vec![*m, *n]),
                _ => return Err(mismatch("premul", w, x)),
            };
            (matmul_kernel(w.data(), x.data(), m, k, n), shape, m, k, n)
        };
        let op = Op::MatMulConst {
            w: Arc::clone(w),
            x: self.idx,
            m,
            k,
            n,
        };
        Ok(self
            .tape
            .push(Tensor::from_parts(shape, value), op, self.req()))
    }

    /// Valid (unpadded) 2-D cross-correlation with `kernel`.
    pub fn conv2d_valid(self, kernel: Var<'t>) -> Result<Var<'t>> {
        let (value, h, w, kh, kw) = {
            let nodes = self.tape.nodes.borrow();
            let (x, k) = (&nodes[self.idx].value, &nodes[kernel.idx].value);
            let (h, w, kh, kw) = match (x.shape(), k.shape()) {
                ([h, w], [kh, kw]) if kh <= h && kw <= w => (*h, *w, *kh, *kw),
                _ => return Err(mismatch("conv2d_valid", x, k)),
            };
            (conv2d_valid_kernel(x.data(), h, w, k.data(), kh, kw), h, w, kh, kw)
        };
        let op = Op::Conv2d {
            input: self.idx,
            kernel: kernel.idx,
            h,
            w,
            kh,
            kw,
        };
        let shape = vec![h - kh + 1, w - kw + 1];
        let req = self.req() || kernel.req();
        Ok(self.tape.push(Tensor::from_parts(shape, value), op, req))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.idx), |t| t.map(f64::tanh))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.idx), |t| t.map(sigmoid))
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin(self.idx), |t| t.map(f64::sin))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = self.tape.nodes.borrow()[self.idx].value.reshaped(shape)?;
        Ok(self.tape.push(value, Op::Reshape(self.idx), self.req()))
    }

    pub fn flatten(self) -> Var<'t> {
        let n = self.len();
        self.reshape(vec![n]).expect("flatten preserves length")
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::Mean(self.idx), |t| {
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
        })
    }

    /// Population variance over all elements.
    pub fn variance(self) -> Var<'t> {
        self.unary(Op::Variance(self.idx), |t| {
            let n = t.len() as f64;
            let mean = t.data().iter().sum::<f64>() / n;
            Tensor::scalar(t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
        })
    }

    pub fn sum_squares(self) -> Var<'t> {
        self.unary(Op::SumSquares(self.idx), |t| {
            Tensor::scalar(t.data().iter().map(|x| x * x).sum())
        })
    }

    pub fn l2_norm(self) -> Var<'t> {
        self.unary(Op::L2Norm(self.idx), |t| Tensor::scalar(t.norm()))
    }

    pub fn dot(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[other.idx].value);
            if a.len() != b.len() {
                return Err(mismatch("dot", a, b));
            }
            Tensor::scalar(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
        };
        let op = Op::Dot(self.idx, other.idx);
        Ok(self.tape.push(value, op, self.req() || other.req()))
    }

    /// Concatenates along the leading axis; trailing dimensions must agree.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no operands"))?;
        let tape = first.tape;
        let (shape, data) = {
            let nodes = tape.nodes.borrow();
            let head = &nodes[first.idx].value;
            let tail = head.shape()[1..].to_vec();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let v = &nodes[p.idx].value;
                if v.shape()[1..] != tail[..] {
                    return Err(mismatch("concat", head, v));
                }
                rows += v.shape()[0];
                data.extend_from_slice(v.data());
            }
            let mut shape = vec![rows];
            shape.extend(tail);
            (shape, data)
        };
        let req = parts.iter().any(|p| p.req());
        let op = Op::Concat(parts.iter().map(|p| p.idx).collect());
        Ok(tape.push(Tensor::from_parts(shape, data), op, req))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice(self, start: usize, len: usize) -> Result<Var<'t>> {
        let (value, offset) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let rows = x.shape()[0];
            if len == 0 || start + len > rows {
                return Err(Error::ShapeMismatch {
                    op: "slice",
                    lhs: x.shape().to_vec(),
                    rhs: vec![start, start + len],
                });
            }
            let stride = x.len() / rows;
            let mut shape = x.shape().to_vec();
            shape[0] = len;
            let data = x.data()[start * stride..(start + len) * stride].to_vec();
            (Tensor::from_parts(shape, data), start * stride)
        };
        let op = Op::Slice {
            src: self.idx,
            offset,
            len: value.len(),
        };
        Ok(self.tape.push(value, op, self.req()))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
