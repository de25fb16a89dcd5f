//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each recorded node
//! owns its value; gradients are allocated lazily during [`Tape::backward`]
//! and retained only for leaves. Nodes are appended in evaluation order,
//! so a reverse sweep is a valid topological traversal.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{self, log_clamped, Element, Tensor, LOG_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    Square(Var),
    LogClamped(Var),
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu { x: Var, slope: T },
    Clamp { x: Var, lo: T, hi: T },
    Concat { parts: Vec<Var>, axis: usize },
    Sum(Var),
    Mean(Var),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, batch: usize, c_in: usize, c_out: usize },
    Deconv { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, batch: usize, c_in: usize, c_out: usize },
    MaxPool { x: Var, argmax: Vec<u32>, in_len: usize, out_len: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool, batch: usize, channels: usize, spatial: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Statistics selector for [`Tape::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    /// Standardize with the batch's own mean and variance.
    Batch,
    /// Standardize with supplied (running) statistics.
    Fixed { mean: &'a [T], var: &'a [T] },
}

/// Per-channel mean and biased variance of a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

/// `[B, C, D, H, W]` or unbatched `[C, D, H, W]`.
fn volume_layout(shape: &[usize]) -> Result<(usize, usize, [usize; 3])> {
    match *shape {
        [b, c, d, h, w] => Ok((b, c, [d, h, w])),
        [c, d, h, w] => Ok((1, c, [d, h, w])),
        _ => Err(Error::Shape(format!("expected a volume [B,C,D,H,W] or [C,D,H,W], got {shape:?}"))),
    }
}

fn volume_shape(template: &[usize], batch: usize, channels: usize, dims: [usize; 3]) -> Vec<usize> {
    if template.len() == 5 {
        vec![batch, channels, dims[0], dims[1], dims[2]]
    } else {
        vec![channels, dims[0], dims[1], dims[2]]
    }
}

fn grad_slot<T: Element>(nodes: &mut [Node<T>], v: Var) -> Option<&mut [T]> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(node.grad.get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
}

fn accumulate<T: Element>(nodes: &mut [Node<T>], v: Var, f: impl Fn(usize) -> T) {
    if let Some(g) = grad_slot(nodes, v) {
        g.iter_mut().enumerate().for_each(|(i, gi)| *gi += f(i));
    }
}

fn accumulate_vec<T: Element>(nodes: &mut [Node<T>], v: Var, src: &[T]) {
    if let Some(g) = grad_slot(nodes, v) {
        g.iter_mut().zip(src).for_each(|(gi, s)| *gi += *s);
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_vec(node.value.shape(), g.clone()).expect("grad shape"))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x);
        let value = Tensor::from_vec(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("shape");
        self.push(value, op, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p + q, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p - q, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p * q, Op::Mul(a, b), "mul")
    }

    pub fn zip_map(&mut self, a: Var, b: Var, op: tensor::BinaryOp) -> Result<Var> {
        match op {
            tensor::BinaryOp::Add => self.add(a, b),
            tensor::BinaryOp::Sub => self.sub(a, b),
            tensor::BinaryOp::Mul => self.mul(a, b),
        }
    }

    pub fn map(&mut self, x: Var, op: tensor::UnaryOp) -> Var {
        match op {
            tensor::UnaryOp::Scale(k) => self.scale(x, k),
            tensor::UnaryOp::LogClamped => self.log_clamped(x),
            tensor::UnaryOp::Square => self.square(x),
        }
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, b) = (T::of(scale), T::of(shift));
        self.unary(x, |v| s * v + b, Op::Affine { x, scale: s })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.affine(x, k, 0.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn log_clamped(&mut self, x: Var) -> Var {
        self.unary(x, log_clamped, Op::LogClamped(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v < T::zero() { T::zero() } else { v }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.unary(x, |v| if v > T::zero() { v } else { s * v }, Op::LeakyRelu { x, slope: s })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(x, move |v| if v < lo { lo } else if v > hi { hi } else { v }, Op::Clamp { x, lo, hi })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&tensors, axis)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = self.value(x).reduce(tensor::Reduce::Sum);
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = self.value(x).reduce(tensor::Reduce::Mean);
        self.push(value, Op::Mean(x), &[x])
    }

    pub fn reduce(&mut self, x: Var, mode: tensor::Reduce) -> Var {
        match mode {
            tensor::Reduce::Sum => self.sum(x),
            tensor::Reduce::Mean => self.mean(x),
        }
    }

    /// Cross-correlation with a `[C_out, C_in, k, k, k]` kernel.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, dilation: usize) -> Result<Var> {
        let (batch, c_in, dims) = volume_layout(self.shape(x))?;
        let (c_out, kernel) = match *self.shape(w) {
            [o, i, k, k2, k3] if k == k2 && k == k3 && i == c_in => (o, k),
            ref s => {
                return Err(Error::Shape(format!("conv weight {s:?} does not match input channels {c_in}")))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::Shape(format!("conv bias {:?} for {c_out} outputs", self.shape(b))));
            }
        }
        let geom = ConvGeometry::conv(dims, kernel, stride, dilation)?;
        let y = kernels::conv_apply(&geom, batch, c_in, c_out, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let value = Tensor::from_vec(&volume_shape(self.shape(x), batch, c_out, geom.small), y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv { x, w, b, geom, batch, c_in, c_out }, &inputs))
    }

    /// Transposed convolution with a `[C_in, C_out, 3, 3, 3]` kernel whose
    /// output is exactly `stride`× the input on every axis.
    pub fn deconv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (batch, c_in, dims) = volume_layout(self.shape(x))?;
        let c_out = match *self.shape(w) {
            [i, o, 3, 3, 3] if i == c_in => o,
            ref s => {
                return Err(Error::Shape(format!("deconv weight {s:?} does not match input channels {c_in}")))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::Shape(format!("deconv bias {:?} for {c_out} outputs", self.shape(b))));
            }
        }
        let geom = ConvGeometry::upsample(dims, stride)?;
        let y = kernels::conv_adjoint(&geom, batch, c_out, c_in, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let value = Tensor::from_vec(&volume_shape(self.shape(x), batch, c_out, geom.big), y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Deconv { x, w, b, geom, batch, c_in, c_out }, &inputs))
    }

    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let (batch, channels, dims) = volume_layout(self.shape(x))?;
        let (out, argmax) = kernels::max_pool2(batch, channels, dims, self.data(x))?;
        let half = dims.map(|e| e / 2);
        let value = Tensor::from_vec(&volume_shape(self.shape(x), batch, channels, half), out)?;
        let op = Op::MaxPool {
            x,
            argmax,
            in_len: dims.iter().product(),
            out_len: half.iter().product(),
        };
        Ok(self.push(value, op, &[x]))
    }

    /// Per-channel standardization over batch and space followed by the
    /// affine `gamma·x̂ + beta`. Returns the batch statistics in
    /// [`NormStats::Batch`] mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (batch, channels, dims) = volume_layout(self.shape(x))?;
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::Shape(format!("batch norm affine params for {channels} channels")));
        }
        let spatial: usize = dims.iter().product();
        let count = batch * spatial;
        let xs = self.data(x);
        let (mean, var, train) = match stats {
            NormStats::Batch => {
                if count < 2 {
                    return Err(Error::Contract(format!(
                        "training-mode batch norm needs at least 2 values per channel, got {count}"
                    )));
                }
                let mut mean = vec![0.0f64; channels];
                let mut var = vec![0.0f64; channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let s = (b * channels + c) * spatial;
                        mean[c] += xs[s..s + spatial].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for b in 0..batch {
                    for c in 0..channels {
                        let s = (b * channels + c) * spatial;
                        var[c] += xs[s..s + spatial]
                            .iter()
                            .map(|v| (v.as_f64() - mean[c]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::Shape("running statistics length".into()));
                }
                if var.iter().any(|v| !v.is_finite() || *v < T::zero()) || mean.iter().any(|m| !m.is_finite()) {
                    return Err(Error::State("non-finite or negative running statistics".into()));
                }
                (
                    mean.iter().map(|v| v.as_f64()).collect(),
                    var.iter().map(|v| v.as_f64()).collect(),
                    false,
                )
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..batch {
            for c in 0..channels {
                let s = (b * channels + c) * spatial;
                let m = T::of(mean[c]);
                for i in s..s + spatial {
                    let h = (xs[i] - m) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + bt[c];
                }
            }
        }
        let value = Tensor::from_vec(self.shape(x), out)?;
        let batch_stats = train.then(|| BatchStats {
            mean: mean.iter().map(|&m| T::of(m)).collect(),
            var: var.iter().map(|&v| T::of(v)).collect(),
        });
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, train, batch, channels, spatial };
        Ok((self.push(value, op, &[x, gamma, beta]), batch_stats))
    }

    /// Propagates `∂loss/∂·` to every node that requires a gradient. Leaf
    /// gradients accumulate across calls; intermediate gradients are freed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = match &self.nodes[loss.0].op {
            Op::Leaf => {
                self.nodes[loss.0].grad.get_or_insert_with(|| vec![T::zero()])[0] += T::one();
                return Ok(());
            }
            _ => vec![T::one()],
        };
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.take() else { continue };
            backprop(before, node, &g);
        }
        Ok(())
    }
}

fn backprop<T: Element>(nodes: &mut [Node<T>], node: &Node<T>, g: &[T]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate_vec(nodes, *a, g);
            accumulate_vec(nodes, *b, g);
        }
        Op::Sub(a, b) => {
            accumulate_vec(nodes, *a, g);
            accumulate(nodes, *b, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let av = nodes[a.0].value.data().to_vec();
            let bv = nodes[b.0].value.data().to_vec();
            accumulate(nodes, *a, |i| g[i] * bv[i]);
            accumulate(nodes, *b, |i| g[i] * av[i]);
        }
        Op::Affine { x, scale } => accumulate(nodes, *x, |i| g[i] * *scale),
        Op::Square(x) => {
            let xv = nodes[x.0].value.data().to_vec();
            accumulate(nodes, *x, |i| T::of(2.0) * xv[i] * g[i]);
        }
        Op::LogClamped(x) => {
            let xv = nodes[x.0].value.data().to_vec();
            let lo = T::of(LOG_EPS);
            let hi = T::one() - lo;
            accumulate(nodes, *x, |i| {
                let v = xv[i];
                if v > lo && v < hi {
                    g[i] / v
                } else {
                    T::zero()
                }
            });
        }
        Op::Exp(x) => accumulate(nodes, *x, |i| g[i] * out[i]),
        Op::Sigmoid(x) => accumulate(nodes, *x, |i| g[i] * out[i] * (T::one() - out[i])),
        Op::Relu(x) => {
            let xv = nodes[x.0].value.data().to_vec();
            accumulate(nodes, *x, |i| if xv[i] > T::zero() { g[i] } else { T::zero() });
        }
        Op::LeakyRelu { x, slope } => {
            let xv = nodes[x.0].value.data().to_vec();
            accumulate(nodes, *x, |i| if xv[i] > T::zero() { g[i] } else { *slope * g[i] });
        }
        Op::Clamp { x, lo, hi } => {
            let xv = nodes[x.0].value.data().to_vec();
            accumulate(nodes, *x, |i| if xv[i] >= *lo && xv[i] <= *hi { g[i] } else { T::zero() });
        }
        Op::Concat { parts, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let full = shape[*axis] * inner;
            let mut offset = 0;
            for p in parts {
                let extent = nodes[p.0].value.shape()[*axis];
                let block = extent * inner;
                if let Some(pg) = grad_slot(nodes, *p) {
                    for o in 0..outer {
                        let src = &g[o * full + offset..o * full + offset + block];
                        pg[o * block..(o + 1) * block]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += *s);
                    }
                }
                offset += block;
            }
        }
        Op::Sum(x) => accumulate(nodes, *x, |_| g[0]),
        Op::Mean(x) => {
            let n = T::of(nodes[x.0].value.len() as f64);
            accumulate(nodes, *x, |_| g[0] / n);
        }
        Op::Conv { x, w, b, geom, batch, c_in, c_out } => {
            if nodes[x.0].requires_grad {
                let dx = kernels::conv_adjoint(geom, *batch, *c_in, *c_out, g, nodes[w.0].value.data(), None);
                accumulate_vec(nodes, *x, &dx);
            }
            if nodes[w.0].requires_grad {
                let dw = kernels::conv_weight_grad(geom, *batch, *c_in, *c_out, nodes[x.0].value.data(), g);
                accumulate_vec(nodes, *w, &dw);
            }
            if let Some(b) = b {
                if nodes[b.0].requires_grad {
                    let db = kernels::channel_sums(*batch, *c_out, geom.small_len(), g);
                    accumulate_vec(nodes, *b, &db);
                }
            }
        }
        Op::Deconv { x, w, b, geom, batch, c_in, c_out } => {
            if nodes[x.0].requires_grad {
                let dx = kernels::conv_apply(geom, *batch, *c_out, *c_in, g, nodes[w.0].value.data(), None);
                accumulate_vec(nodes, *x, &dx);
            }
            if nodes[w.0].requires_grad {
                let dw = kernels::conv_weight_grad(geom, *batch, *c_out, *c_in, g, nodes[x.0].value.data());
                accumulate_vec(nodes, *w, &dw);
            }
            if let Some(b) = b {
                if nodes[b.0].requires_grad {
                    let db = kernels::channel_sums(*batch, *c_out, geom.big_len(), g);
                    accumulate_vec(nodes, *b, &db);
                }
            }
        }
        Op::MaxPool { x, argmax, in_len, out_len } => {
            if let Some(xg) = grad_slot(nodes, *x) {
                for (o, (&a, &gv)) in argmax.iter().zip(g).enumerate() {
                    let chan = o / out_len;
                    xg[chan * in_len + a as usize] += gv;
                }
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, train, batch, channels, spatial } => {
            let (batch, channels, spatial) = (*batch, *channels, *spatial);
            let mut sum_g = vec![T::zero(); channels];
            let mut sum_gx = vec![T::zero(); channels];
            for b in 0..batch {
                for c in 0..channels {
                    let s = (b * channels + c) * spatial;
                    for i in s..s + spatial {
                        sum_g[c] += g[i];
                        sum_gx[c] += g[i] * xhat[i];
                    }
                }
            }
            let gam = nodes[gamma.0].value.data().to_vec();
            if nodes[x.0].requires_grad {
                let m = T::of((batch * spatial) as f64);
                let mut dx = vec![T::zero(); g.len()];
                for b in 0..batch {
                    for c in 0..channels {
                        let s = (b * channels + c) * spatial;
                        let k = gam[c] * inv_std[c];
                        for i in s..s + spatial {
                            dx[i] = if *train {
                                k / m * (m * g[i] - sum_g[c] - xhat[i] * sum_gx[c])
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                accumulate_vec(nodes, *x, &dx);
            }
            accumulate_vec(nodes, *gamma, &sum_gx);
            accumulate_vec(nodes, *beta, &sum_g);
        }
    }
}

/// Central-difference estimate of `∇f(x)`, evaluated in `f64`.
pub fn finite_difference_grad(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::from_vec(x.shape(), grad).expect("same shape")
}

/// `|a − b| / max(|a|, |b|, 1e-6)`, maximized over elements. Any NaN
/// counts as an infinite error.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let r = (x - y).abs() / x.abs().max(y.abs()).max(1e-6);
            if r.is_nan() {
                f64::INFINITY
            } else {
                r
            }
        })
        .fold(0.0, f64::max)
}

/// Builds a scalar function on a fresh `f64` tape from a set of inputs.
pub type TapeFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Compares reverse-mode gradients of `f` against central differences with
/// respect to every input; returns the worst relative error.
pub fn check_gradients(f: &TapeFn<'_>, inputs: &[Tensor<f64>], eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let eval = |probe: &Tensor<f64>| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, orig)| t.constant(if j == k { probe.clone() } else { orig.clone() }))
                .collect();
            let out = f(&mut t, &vs).expect("forward succeeded once");
            t.value(out).data()[0]
        };
        let numeric = finite_difference_grad(eval, input, eps);
        worst = worst.max(max_relative_error(&analytic, numeric.data()));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Fill, Reduce, UnaryOp};

    fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::new(shape, Fill::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap()
    }

    #[test]
    fn nan_propagates_through_saturating_ops() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_vec(&[1], vec![f64::NAN]).unwrap());
        for y in [t.relu(x), t.clamp(x, -1.0, 1.0), t.log_clamped(x), t.leaky_relu(x, 0.2)] {
            assert!(t.value(y).data()[0].is_nan());
        }
        assert_eq!(max_relative_error(&[f64::NAN], &[1.0]), f64::INFINITY);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(&[3, 4], Fill::Constant(2.0)).unwrap(), true);
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn square_gradient_is_twice_x() {
        let mut tape = Tape::<f64>::new();
        let xv = t(&[5], 1);
        let x = tape.leaf(xv.clone(), true);
        let s = tape.square(x);
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        for (g, v) in tape.grad(x).unwrap().iter().zip(xv.data()) {
            assert_eq!(*g, 2.0 * v);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]).unwrap(), true);
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn reuse_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1], vec![3.0]).unwrap(), true);
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let l = tape.sum(z);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn fd_oracle_examples() {
        let x = t(&[7], 3);
        let g = finite_difference_grad(|v| v.reduce(Reduce::Sum).item().unwrap(), &x, 1e-3);
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
        let three = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let g = finite_difference_grad(|v| v.map(UnaryOp::Square).reduce(Reduce::Sum).item().unwrap(), &three, 1e-3);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
        let half = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let g = finite_difference_grad(
            |v| v.map(UnaryOp::LogClamped).reduce(Reduce::Mean).item().unwrap(),
            &half,
            1e-4,
        );
        assert!((g.data()[0] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn composite_matches_finite_differences() {
        let f = |tape: &mut Tape<f64>, v: &[Var]| {
            let a = tape.mul(v[0], v[1])?;
            let b = tape.sigmoid(a);
            let c = tape.log_clamped(b);
            let d = tape.concat(&[c, v[1]], 0)?;
            let e = tape.square(d);
            let s = tape.exp(v[0]);
            let m = tape.mean(e);
            let n = tape.sum(s);
            let o = tape.scale(n, 0.1);
            tape.add(m, o)
        };
        let err = check_gradients(&f, &[t(&[2, 3], 5), t(&[2, 3], 6)], 1e-6).unwrap();
        assert!(err <= 1e-3, "err {err}");
    }

    #[test]
    fn sum_of_losses_is_sum_of_gradients() {
        let xv = t(&[4, 2], 9);
        let run = |which: u8| {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(xv.clone(), true);
            let sq = tape.square(x);
            let l1 = tape.sum(sq);
            let sg = tape.sigmoid(x);
            let l2 = tape.mean(sg);
            let l = match which {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            tape.backward(l).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let (a, b, c) = (run(0), run(1), run(2));
        for i in 0..a.len() {
            assert!((a[i] + b[i] - c[i]).abs() < 1e-12);
        }
    }
}
