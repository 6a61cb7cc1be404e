use super::kernels::{self, Vol};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive tag of a recorded node, with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Offset(f64),
    Relu,
    Log,
    Sqrt,
    Abs,
    Clamp { lo: f64, hi: f64 },
    Sum,
    Mean,
    Conv3d { stride: usize, padding: usize },
    ConvTranspose3d { stride: usize },
    MaxPool3d { window: usize, stride: usize },
    Dense,
    Softmax { axis: usize },
    Concat,
    SpatialMean,
    Select { index: usize },
    Reshape,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
    argmax: Vec<usize>,
}

/// Append-only computation graph owned by one session.
///
/// Nodes are stored in creation order, which is a topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss w.r.t. every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn vol(shape: &[usize]) -> Vol {
    Vol {
        c: shape[0],
        d: shape[1],
        h: shape[2],
        w: shape[3],
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, Vec::new(), requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: Vec<Var>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
            argmax: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op, inputs: Vec<Var>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, inputs, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let name = match op {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            _ => "div",
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.is_scalar() {
            let y = tb.item();
            let data = ta.data().iter().map(|&x| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if ta.is_scalar() {
            let x = ta.item();
            let data = tb.data().iter().map(|&y| f(x, y)).collect();
            Tensor::new(tb.shape().to_vec(), data)?
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        };
        Ok(self.record(value, op, vec![a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div, |x, y| x / y)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("unary op preserves shape");
        self.record(value, op, vec![a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = T::of(c);
        self.unary(a, Op::Scale(c), |x| x * k)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let k = T::of(c);
        self.unary(a, Op::Offset(c), |x| x + k)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs, |x| x.abs())
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::of(lo), T::of(hi));
        self.unary(a, Op::Clamp { lo, hi }, |x| x.max(l).min(h))
    }

    /// Natural log; every input value must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > T::zero())) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("argument {bad:?} is not positive; clamp first"),
            });
        }
        Ok(self.unary(a, Op::Log, |x| x.ln()))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x >= T::zero())) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("argument {bad:?} is negative"),
            });
        }
        Ok(self.unary(a, Op::Sqrt, |x| x.sqrt()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        self.record(Tensor::scalar(s), Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().fold(T::zero(), |acc, &x| acc + x) / T::of(t.numel() as f64);
        self.record(Tensor::scalar(s), Op::Mean, vec![a])
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(Error::shape(op, format!("expected rank {rank}, got shape {s:?}")));
        }
        Ok(())
    }

    /// 3D cross-correlation with zero padding.
    ///
    /// `input: [C_in, D, H, W]`, `kernel: [C_out, C_in, k, k, k]`, `bias: [C_out]`.
    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.expect_rank("conv3d", input, 4)?;
        self.expect_rank("conv3d", kernel, 5)?;
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let k = ks[2];
        if ks[3] != k || ks[4] != k {
            return Err(Error::shape("conv3d", format!("kernel must be cubic, got {ks:?}")));
        }
        if k % 2 == 0 {
            return Err(Error::shape("conv3d", format!("kernel extent {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv3d stride must be >= 1"));
        }
        if ks[1] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                left: xs,
                right: ks,
            });
        }
        if self.shape(bias) != [ks[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv3d bias",
                left: ks,
                right: self.shape(bias).to_vec(),
            });
        }
        let mut out = [ks[0], 0, 0, 0];
        for a in 1..4 {
            out[a] = kernels::conv_out_extent(xs[a], k, stride, padding).ok_or_else(|| {
                Error::shape(
                    "conv3d",
                    format!(
                        "output extent ({} + 2*{padding} - {k})/{stride} + 1 is not a positive integer",
                        xs[a]
                    ),
                )
            })?;
        }
        let y = kernels::conv3d_forward(
            self.value(input).data(),
            vol(&xs),
            self.value(kernel).data(),
            k,
            self.value(bias).data(),
            vol(&out),
            stride,
            padding,
        );
        let value = Tensor::new(out.to_vec(), y)?;
        Ok(self.record(value, Op::Conv3d { stride, padding }, vec![input, kernel, bias]))
    }

    /// Transposed 3D convolution without padding; output extent `(n - 1) * stride + k`.
    ///
    /// `input: [C_in, D, H, W]`, `kernel: [C_in, C_out, k, k, k]`, `bias: [C_out]`.
    pub fn conv_transpose3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var> {
        self.expect_rank("conv_transpose3d", input, 4)?;
        self.expect_rank("conv_transpose3d", kernel, 5)?;
        if stride == 0 {
            return Err(Error::invalid("conv_transpose3d stride must be >= 1"));
        }
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let k = ks[2];
        if ks[3] != k || ks[4] != k {
            return Err(Error::shape(
                "conv_transpose3d",
                format!("kernel must be cubic, got {ks:?}"),
            ));
        }
        if ks[0] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose3d",
                left: xs,
                right: ks,
            });
        }
        if self.shape(bias) != [ks[1]] {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose3d bias",
                left: ks,
                right: self.shape(bias).to_vec(),
            });
        }
        let out = [
            ks[1],
            (xs[1] - 1) * stride + k,
            (xs[2] - 1) * stride + k,
            (xs[3] - 1) * stride + k,
        ];
        let y = kernels::conv_transpose3d_forward(
            self.value(input).data(),
            vol(&xs),
            self.value(kernel).data(),
            k,
            self.value(bias).data(),
            vol(&out),
            stride,
        );
        let value = Tensor::new(out.to_vec(), y)?;
        Ok(self.record(value, Op::ConvTranspose3d { stride }, vec![input, kernel, bias]))
    }

    pub fn maxpool3d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        self.expect_rank("maxpool3d", input, 4)?;
        if window == 0 || stride == 0 {
            return Err(Error::invalid("maxpool3d window and stride must be >= 1"));
        }
        let xs = self.shape(input).to_vec();
        let mut out = [xs[0], 0, 0, 0];
        for a in 1..4 {
            if xs[a] < window || (xs[a] - window) % stride != 0 {
                return Err(Error::shape(
                    "maxpool3d",
                    format!(
                        "extent {} not divisible into windows of {window} at stride {stride}",
                        xs[a]
                    ),
                ));
            }
            out[a] = (xs[a] - window) / stride + 1;
        }
        let (y, argmax) =
            kernels::maxpool3d_forward(self.value(input).data(), vol(&xs), window, stride, vol(&out));
        let value = Tensor::new(out.to_vec(), y)?;
        let v = self.record(value, Op::MaxPool3d { window, stride }, vec![input]);
        self.nodes[v.0].argmax = argmax;
        Ok(v)
    }

    /// Affine map `W x + b` with `x: [m]`, `W: [n, m]`, `b: [n]`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weights).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "dense",
                left: xs,
                right: ws,
            });
        }
        if bs != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "dense bias",
                left: ws,
                right: bs,
            });
        }
        let (n, m) = (ws[0], ws[1]);
        let x = self.value(input).data();
        let w = self.value(weights).data();
        let b = self.value(bias).data();
        let y = (0..n)
            .map(|i| {
                w[i * m..(i + 1) * m]
                    .iter()
                    .zip(x)
                    .fold(b[i], |acc, (&wv, &xv)| acc + wv * xv)
            })
            .collect();
        let value = Tensor::new(vec![n], y)?;
        Ok(self.record(value, Op::Dense, vec![input, weights, bias]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(input).data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut m = x[at(0)];
                for j in 1..len {
                    m = m.max(x[at(j)]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - m).exp();
                    y[at(j)] = e;
                    s = s + e;
                }
                for j in 0..len {
                    y[at(j)] = y[at(j)] / s;
                }
            }
        }
        let value = Tensor::new(shape, y)?;
        Ok(self.record(value, Op::Softmax { axis }, vec![input]))
    }

    /// Concatenates along the leading (channel) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: sa,
                right: sb,
            });
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, Op::Concat, vec![a, b]))
    }

    /// Mean over all non-leading axes: `[C, ...] -> [C]`.
    pub fn spatial_mean(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("spatial_mean", format!("rank >= 2 required, got {shape:?}")));
        }
        let per: usize = shape[1..].iter().product();
        let n = T::of(per as f64);
        let y = self
            .value(input)
            .data()
            .chunks(per)
            .map(|c| c.iter().fold(T::zero(), |a, &v| a + v) / n)
            .collect();
        let value = Tensor::new(vec![shape[0]], y)?;
        Ok(self.record(value, Op::SpatialMean, vec![input]))
    }

    /// Picks `index` along the leading axis: `[C, ...] -> [...]`.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::shape(
                "select",
                format!("index {index} out of range for {shape:?}"),
            ));
        }
        let per: usize = shape[1..].iter().product();
        let data = self.value(input).data()[index * per..(index + 1) * per].to_vec();
        let value = Tensor::new(shape[1..].to_vec(), data)?;
        Ok(self.record(value, Op::Select { index }, vec![input]))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.record(value, Op::Reshape, vec![input]))
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lt.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            for (slot, g) in self.local_grads(node, &gy).into_iter().enumerate() {
                let Some(g) = g else { continue };
                let input = node.inputs[slot];
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a = *a + *v;
                        }
                    }
                    empty @ None => *empty = Some(g),
                }
            }
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products for each input of `node`, given its output gradient.
    fn local_grads(&self, node: &Node<T>, gy: &[T]) -> Vec<Option<Vec<T>>> {
        let inp = |i: usize| &self.nodes[node.inputs[i].0].value;
        let needs = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        let y = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let (a, b) = (inp(0), inp(1));
                let n = node.value.numel();
                let av = |i: usize| if a.is_scalar() { a.data()[0] } else { a.data()[i] };
                let bv = |i: usize| if b.is_scalar() { b.data()[0] } else { b.data()[i] };
                let (da, db): (Vec<T>, Vec<T>) = match node.op {
                    Op::Add => (gy.to_vec(), gy.to_vec()),
                    Op::Sub => (gy.to_vec(), gy.iter().map(|&g| -g).collect()),
                    Op::Mul => (
                        (0..n).map(|i| gy[i] * bv(i)).collect(),
                        (0..n).map(|i| gy[i] * av(i)).collect(),
                    ),
                    _ => (
                        (0..n).map(|i| gy[i] / bv(i)).collect(),
                        (0..n).map(|i| -gy[i] * av(i) / (bv(i) * bv(i))).collect(),
                    ),
                };
                let reduce = |t: &Tensor<T>, g: Vec<T>| {
                    if t.numel() == g.len() {
                        g
                    } else {
                        vec![g.iter().fold(T::zero(), |s, &v| s + v)]
                    }
                };
                vec![
                    needs(0).then(|| reduce(a, da)),
                    needs(1).then(|| reduce(b, db)),
                ]
            }
            Op::Scale(c) => {
                let k = T::of(*c);
                vec![Some(gy.iter().map(|&g| g * k).collect())]
            }
            Op::Offset(_) | Op::Reshape => vec![Some(gy.to_vec())],
            Op::Relu => {
                let x = inp(0).data();
                vec![Some(
                    x.iter()
                        .zip(gy)
                        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                )]
            }
            Op::Log => {
                let x = inp(0).data();
                vec![Some(x.iter().zip(gy).map(|(&x, &g)| g / x).collect())]
            }
            Op::Sqrt => {
                let two = T::of(2.0);
                vec![Some(y.iter().zip(gy).map(|(&y, &g)| g / (two * y)).collect())]
            }
            Op::Abs => {
                let x = inp(0).data();
                vec![Some(
                    x.iter()
                        .zip(gy)
                        .map(|(&x, &g)| {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                )]
            }
            Op::Clamp { lo, hi } => {
                let (l, h) = (T::of(*lo), T::of(*hi));
                let x = inp(0).data();
                vec![Some(
                    x.iter()
                        .zip(gy)
                        .map(|(&x, &g)| if x >= l && x <= h { g } else { T::zero() })
                        .collect(),
                )]
            }
            Op::Sum => vec![Some(vec![gy[0]; inp(0).numel()])],
            Op::Mean => {
                let n = inp(0).numel();
                vec![Some(vec![gy[0] / T::of(n as f64); n])]
            }
            Op::Conv3d { stride, padding } => {
                let (x, w) = (inp(0), inp(1));
                let (gx, gw, gb) = kernels::conv3d_backward(
                    x.data(),
                    vol(x.shape()),
                    w.data(),
                    w.shape()[2],
                    gy,
                    vol(node.value.shape()),
                    *stride,
                    *padding,
                );
                vec![needs(0).then_some(gx), needs(1).then_some(gw), needs(2).then_some(gb)]
            }
            Op::ConvTranspose3d { stride } => {
                let (x, w) = (inp(0), inp(1));
                let (gx, gw, gb) = kernels::conv_transpose3d_backward(
                    x.data(),
                    vol(x.shape()),
                    w.data(),
                    w.shape()[2],
                    gy,
                    vol(node.value.shape()),
                    *stride,
                );
                vec![needs(0).then_some(gx), needs(1).then_some(gw), needs(2).then_some(gb)]
            }
            Op::MaxPool3d { .. } => {
                let mut gx = vec![T::zero(); inp(0).numel()];
                for (&src, &g) in node.argmax.iter().zip(gy) {
                    gx[src] = gx[src] + g;
                }
                vec![Some(gx)]
            }
            Op::Dense => {
                let (x, w) = (inp(0).data(), inp(1).data());
                let (n, m) = (gy.len(), x.len());
                let gx = needs(0).then(|| {
                    let mut gx = vec![T::zero(); m];
                    for i in 0..n {
                        for j in 0..m {
                            gx[j] = gx[j] + w[i * m + j] * gy[i];
                        }
                    }
                    gx
                });
                let gw = needs(1).then(|| {
                    let mut gw = Vec::with_capacity(n * m);
                    for &g in gy {
                        gw.extend(x.iter().map(|&xv| g * xv));
                    }
                    gw
                });
                vec![gx, gw, needs(2).then(|| gy.to_vec())]
            }
            Op::Softmax { axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot = (0..len).fold(T::zero(), |s, j| s + gy[at(j)] * y[at(j)]);
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (gy[at(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::Concat => {
                let na = inp(0).numel();
                vec![
                    needs(0).then(|| gy[..na].to_vec()),
                    needs(1).then(|| gy[na..].to_vec()),
                ]
            }
            Op::SpatialMean => {
                let x = inp(0);
                let per = x.numel() / x.shape()[0];
                let n = T::of(per as f64);
                let mut gx = Vec::with_capacity(x.numel());
                for &g in gy {
                    gx.extend(std::iter::repeat_n(g / n, per));
                }
                vec![Some(gx)]
            }
            Op::Select { index } => {
                let x = inp(0);
                let per = gy.len();
                let mut gx = vec![T::zero(); x.numel()];
                gx[index * per..(index + 1) * per].copy_from_slice(gy);
                vec![Some(gx)]
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
