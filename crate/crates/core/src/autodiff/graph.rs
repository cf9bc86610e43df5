//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so the tape is topologically sorted
//! by construction and a single reverse sweep visits every node once.

use std::fmt;

use crate::autodiff::conv::{self, ConvGeom};
use crate::autodiff::tensor::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar,
    Conv2d,
    MaxPool2,
    Upsample2,
    Concat,
    Slice,
    Relu,
    Sigmoid,
    Sum,
    Mean,
    Bce,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddScalar => "add_scalar",
            OpKind::MulScalar => "mul_scalar",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2 => "maxpool2",
            OpKind::Upsample2 => "upsample2",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Bce => "bce",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_KINDS: [OpKind; 16] = [
    OpKind::Leaf,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::AddScalar,
    OpKind::MulScalar,
    OpKind::Conv2d,
    OpKind::MaxPool2,
    OpKind::Upsample2,
    OpKind::Concat,
    OpKind::Slice,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::Bce,
];

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Concat(Var, Var),
    Slice {
        x: Var,
        start: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Bce {
        logits: Var,
        targets: Tensor<T>,
        pos_weight: T,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Upsample2(..) => OpKind::Upsample2,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Bce { .. } => OpKind::Bce,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Numerically stable logistic function.
#[inline]
pub fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// A recorded computation. Build one per forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    recording: bool,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records operations for a later [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            fault: None,
        }
    }

    /// Inference mode: values only, nothing is saved for backward and no
    /// node requires a gradient.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Negate the input gradients produced by every `kind` node. Only used
    /// to test the gradient checker.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that will receive a gradient.
    pub fn grad_node_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad).count()
    }

    /// Number of allocated gradient buffers.
    pub fn allocated_grads(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad && self.recording, "leaf")
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).ok()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(shape_err!("variable {} does not belong to this graph", v.0));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let (op, requires_grad) = if self.recording {
            (op, requires_grad)
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(&mut self, a: Var, b: Var, kind: OpKind) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(shape_err!(
                "{kind}: shapes {:?} and {:?} differ",
                va.shape(),
                vb.shape()
            ));
        }
        let f: fn(T, T) -> T = match kind {
            OpKind::Add => |x, y| x + y,
            OpKind::Sub => |x, y| x - y,
            _ => |x, y| x * y,
        };
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let op = match kind {
            OpKind::Add => Op::Add(a, b),
            OpKind::Sub => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg, kind.name())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Sub)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Mul)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes[a.0].value.map(|x| x + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg, "add_scalar")
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes[a.0].value.map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::MulScalar(a, s), rg, "mul_scalar")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let geom = ConvGeom::new(vx.shape(), vw.shape(), stride, pad)?;
        if vb.shape() != [geom.cout] {
            return Err(shape_err!(
                "conv2d bias must have shape [{}], got {:?}",
                geom.cout,
                vb.shape()
            ));
        }
        let out = conv::forward(vx.data(), vw.data(), vb.data(), &geom);
        let value = Tensor::new([geom.n, geom.cout, geom.oh, geom.ow], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(value, Op::Conv2d { x, w, b, geom }, rg, "conv2d")
    }

    /// 2x2 non-overlapping max pooling. Ties resolve to the first element of
    /// the window in row-major order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        let (n, c, h, w) = vx.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("maxpool2 needs even spatial dims, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = vx.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (p * h + 2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (p * h + 2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        let rg = self.rg(x);
        self.push(value, Op::MaxPool2 { x, argmax }, rg, "maxpool2")
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        let (n, c, h, w) = vx.dims4()?;
        let src = vx.data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                let srow = &src[(p * h + y / 2) * w..][..w];
                let drow = &mut out[(p * oh + y) * ow..][..ow];
                for (x, d) in drow.iter_mut().enumerate() {
                    *d = srow[x / 2];
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        let rg = self.rg(x);
        self.push(value, Op::Upsample2(x), rg, "upsample2")
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, ca, h, w) = va.dims4()?;
        let (nb, cb, hb, wb) = vb.dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err!(
                "concat: {:?} and {:?} disagree outside the channel axis",
                va.shape(),
                vb.shape()
            ));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&va.data()[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&vb.data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new([n, ca + cb, h, w], out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Concat(a, b), rg, "concat")
    }

    /// Channels `start..start + len` of an NCHW tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        let (n, c, h, w) = vx.dims4()?;
        if start + len > c || len == 0 {
            return Err(shape_err!("slice {start}..{} out of {c} channels", start + len));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * len * plane);
        for i in 0..n {
            out.extend_from_slice(&vx.data()[(i * c + start) * plane..(i * c + start + len) * plane]);
        }
        let value = Tensor::new([n, len, h, w], out)?;
        let rg = self.rg(x);
        self.push(value, Op::Slice { x, start }, rg, "slice")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.nodes[x.0].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.nodes[x.0].value.map(stable_sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.nodes[x.0].value.data().iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        if vx.numel() == 0 {
            return Err(shape_err!("mean of an empty tensor"));
        }
        let s = vx.data().iter().fold(T::zero(), |a, &v| a + v);
        let m = s / T::of(vx.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg, "mean")
    }

    /// Binary cross-entropy on logits with positive-class weighting, averaged
    /// over batch and pixels separately per channel and summed over channels.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>, pos_weight: T) -> Result<Var> {
        self.check(logits)?;
        let vl = &self.nodes[logits.0].value;
        let (n, _, h, w) = vl.dims4()?;
        if vl.shape() != targets.shape() {
            return Err(shape_err!(
                "bce: logits {:?} vs targets {:?}",
                vl.shape(),
                targets.shape()
            ));
        }
        let denom = T::of((n * h * w) as f64);
        let mut total = T::zero();
        for (&x, &y) in vl.data().iter().zip(targets.data()) {
            total += pos_weight * y * softplus(-x) + (T::one() - y) * softplus(x);
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total / denom),
            Op::Bce {
                logits,
                targets: targets.clone(),
                pos_weight,
            },
            rg,
            "bce",
        )
    }

    /// Populate gradients of `root` with respect to every node that requires one.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check(root)?;
        if self.nodes[root.0].value.numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                let contributions = self.node_backward(i, &g);
                let negate = self.fault == Some(self.nodes[i].op.kind());
                for (v, mut c) in contributions {
                    if negate {
                        c.iter_mut().for_each(|x| *x = -*x);
                    }
                    self.accumulate(v, c);
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<T>) {
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &c)| *a += c),
            slot => *slot = Some(contribution),
        }
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.rg(*b) {
                    out.push((*b, g.iter().map(|&x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect()));
                }
                if self.rg(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect()));
                }
            }
            Op::AddScalar(a) => out.push((*a, g.to_vec())),
            Op::MulScalar(a, s) => out.push((*a, g.iter().map(|&x| x * *s).collect())),
            Op::Conv2d { x, w, b, geom } => {
                if self.rg(*x) {
                    out.push((*x, conv::backward_input(g, val(*w), geom)));
                }
                if self.rg(*w) || self.rg(*b) {
                    let xp = conv::pad_planes(val(*x), geom.n * geom.cin, geom.h, geom.w, geom.pad);
                    let (dw, db) = conv::backward_params(g, &xp, geom);
                    if self.rg(*w) {
                        out.push((*w, dw));
                    }
                    if self.rg(*b) {
                        out.push((*b, db));
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); self.nodes[x.0].value.numel()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] += gv;
                }
                out.push((*x, dx));
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("4-D");
                let ow = 2 * w;
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            let top = (p * 2 * h + 2 * y) * ow + 2 * xx;
                            dx[(p * h + y) * w + xx] = g[top] + g[top + 1] + g[top + ow] + g[top + ow + 1];
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.nodes[a.0].value.dims4().expect("4-D");
                let cb = self.nodes[b.0].value.dims4().expect("4-D").1;
                let plane = h * w;
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for s in 0..n {
                    let base = s * (ca + cb) * plane;
                    da.extend_from_slice(&g[base..base + ca * plane]);
                    db.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                if self.rg(*a) {
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    out.push((*b, db));
                }
            }
            Op::Slice { x, start } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("4-D");
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut dx = vec![T::zero(); n * c * plane];
                for s in 0..n {
                    let src = &g[s * len * plane..(s + 1) * len * plane];
                    dx[(s * c + start) * plane..(s * c + start + len) * plane].copy_from_slice(src);
                }
                out.push((*x, dx));
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::Sigmoid(x) => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &s)| gv * s * (T::one() - s))
                    .collect();
                out.push((*x, dx));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.nodes[x.0].value.numel()])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                out.push((*x, vec![g[0] / T::of(n as f64); n]));
            }
            Op::Bce {
                logits,
                targets,
                pos_weight,
            } => {
                let vl = &self.nodes[logits.0].value;
                let (n, _, h, w) = vl.dims4().expect("4-D");
                let scale = g[0] / T::of((n * h * w) as f64);
                let dx = vl
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&x, &y)| {
                        let s = stable_sigmoid(x);
                        scale * (*pos_weight * y * (s - T::one()) + (T::one() - y) * s)
                    })
                    .collect();
                out.push((*logits, dx));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let b = g.constant(t(&[3], &[0.0, 1.0, 2.0])).unwrap();
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[0.0, 2.0, 6.0]);
        let z = g.add_scalar(a, 0.0).unwrap();
        assert_eq!(g.value(z), g.value(a));
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([3])).unwrap();
        let b = g.constant(Tensor::zeros([4])).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::new();
        let x = g.param(t(&[4], &[1.0, -2.0, 0.5, 3.0])).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.param(t(&[4], &[1.0, -2.0, 0.5, 3.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = 3x + x*x -> dy/dx = 3 + 2x
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.5, -1.0])).unwrap();
        let a = g.mul_scalar(x, 3.0).unwrap();
        let b = g.mul(x, x).unwrap();
        let y = g.add(a, b).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0, 1.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_tie_goes_to_top_left() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full([1, 1, 4, 4], 2.0)).unwrap();
        let p = g.maxpool2(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.0; 4]);
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        let gx = g.grad(x).unwrap();
        for y in 0..4 {
            for xx in 0..4 {
                let expect = if y % 2 == 0 && xx % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(gx.at4(0, 0, y, xx), expect);
            }
        }
    }

    #[test]
    fn maxpool_odd_is_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 1, 3, 4])).unwrap();
        assert!(g.maxpool2(x).is_err());
    }

    #[test]
    fn small_pool_and_upsample() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let p = g.maxpool2(x).unwrap();
        assert_eq!(g.value(p).data(), &[4.0]);
        let five = g.constant(t(&[1, 1, 1, 1], &[5.0])).unwrap();
        let u = g.upsample2(five).unwrap();
        assert_eq!(g.value(u).data(), &[5.0; 4]);
        let c = g.constant(Tensor::full([1, 2, 4, 4], 0.25)).unwrap();
        let down = g.maxpool2(c).unwrap();
        let up = g.upsample2(down).unwrap();
        assert_eq!(g.value(up), g.value(c));
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn([1, 2, 4, 4], |i| i as f64)).unwrap();
        let b = g.constant(Tensor::from_fn([1, 3, 4, 4], |i| -(i as f64))).unwrap();
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 5, 4, 4]);
        let a2 = g.slice_channels(c, 0, 2).unwrap();
        let b2 = g.slice_channels(c, 2, 3).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
        let bad = g.constant(Tensor::zeros([1, 1, 2, 4])).unwrap();
        assert!(g.concat_channels(a, bad).is_err());
    }

    #[test]
    fn activations() {
        let mut g = Graph::new();
        let x = g.constant(t(&[5], &[0.0, -3.0, 3.0, 50.0, -50.0])).unwrap();
        let s = g.sigmoid(x).unwrap();
        let r = g.relu(x).unwrap();
        let sv = g.value(s).data();
        assert_eq!(sv[0], 0.5);
        // sigmoid(50) = 1 - 2e-22 rounds to 1.0; sigmoid(-50) stays representable
        assert!(sv[3].is_finite() && sv[3] <= 1.0 && sv[3] > 0.5);
        assert!(sv[4].is_finite() && sv[4] > 0.0 && sv[4] < 1e-20);
        assert_eq!(&g.value(r).data()[..3], &[0.0, 0.0, 3.0]);
        // f32 at the extremes as well
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new([2], vec![50.0, -50.0]).unwrap()).unwrap();
        let s = g.sigmoid(x).unwrap();
        assert!(g.value(s).data().iter().all(|v| v.is_finite() && *v > 0.0 && *v <= 1.0));
    }

    #[test]
    fn non_finite_detected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[1e308])).unwrap();
        assert!(matches!(g.mul_scalar(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn no_grad_records_nothing() {
        let mut g = Graph::<f32>::no_grad();
        let x = g.param(Tensor::full([2], 1.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.grad_node_count(), 0);
        g.backward(s).unwrap();
        assert_eq!(g.allocated_grads(), 0);
    }

    #[test]
    fn identity_kernel_conv() {
        let mut g = Graph::new();
        let data = Tensor::from_fn([1, 1, 4, 5], |i| (i as f64).sin());
        let x = g.constant(data.clone()).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(t(&[1, 1, 3, 3], &k)).unwrap();
        let b = g.constant(t(&[1], &[0.0])).unwrap();
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y), &data);
    }
}
