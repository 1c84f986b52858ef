//! Define-by-run gradient tape.
//!
//! Every op appends a node holding its output value. Because nodes can only
//! reference earlier nodes, the tape is already in topological order and
//! [`Tape::backward`] is a single reverse sweep.

use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels::{self, NormStats};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

type Id = usize;

enum Op<T> {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Scale(Id, T),
    AddScalar(Id),
    Square(Id),
    Abs(Id),
    LeakyRelu(Id, T),
    Tanh(Id),
    Sum(Id),
    Mean(Id),
    Reshape(Id),
    Linear {
        x: Id,
        w: Id,
        b: Option<Id>,
    },
    Conv2d {
        x: Id,
        w: Id,
        b: Option<Id>,
        stride: usize,
        pad: usize,
    },
    ChannelAffine {
        x: Id,
        scale: Id,
        shift: Id,
    },
    Normalize {
        x: Id,
        per_sample: bool,
        eps: T,
        stats: NormStats<T>,
    },
    UpsampleNearest(Id, usize),
    UpsampleBilinear2x(Id),
    AvgPool2(Id),
    MaxPool2(Id, Vec<usize>),
    ConcatChannels(Vec<Id>),
    SoftmaxCrossEntropy {
        logits: Id,
        probs: Tensor<T>,
        targets: Rc<[u8]>,
    },
    SpectralDivide {
        w: Id,
        u: Vec<T>,
        v: Vec<T>,
        sigma: T,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: Id,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, id: Id) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn val(&self, id: Id) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels<'t>(&'t self, parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = vals[0].dims4();
        let ctot: usize = vals.iter().map(|v| v.dims4().1).sum();
        let mut out = Vec::with_capacity(n * ctot * h * w);
        for b in 0..n {
            for v in &vals {
                let (vn, c, vh, vw) = v.dims4();
                assert!(vn == n && vh == h && vw == w, "concat shape mismatch");
                let len = c * h * w;
                out.extend_from_slice(&v.data()[b * len..(b + 1) * len]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.id));
        self.push(
            Tensor::new(vec![n, ctot, h, w], out),
            Op::ConcatChannels(parts.iter().map(|p| p.id).collect()),
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        assert_eq!(root.value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape().to_vec()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            let need = |i: Id| nodes[i].requires_grad;
            let value = |i: Id| -> &Tensor<T> { &nodes[i].value };
            let mut acc = |i: Id, t: Tensor<T>| match &mut grads[i] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if need(*a) {
                        acc(*a, g.clone());
                    }
                    if need(*b) {
                        acc(*b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if need(*a) {
                        acc(*a, g.clone());
                    }
                    if need(*b) {
                        acc(*b, g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if need(*a) {
                        acc(*a, g.zip_map(value(*b), |x, y| x * y));
                    }
                    if need(*b) {
                        acc(*b, g.zip_map(value(*a), |x, y| x * y));
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(*a, g.map(|x| x * s));
                }
                Op::AddScalar(a) => acc(*a, g),
                Op::Square(a) => {
                    let two = T::lit(2.0);
                    acc(*a, g.zip_map(value(*a), |x, y| two * x * y));
                }
                Op::Abs(a) => {
                    acc(
                        *a,
                        g.zip_map(value(*a), |x, y| {
                            if y > T::zero() {
                                x
                            } else if y < T::zero() {
                                -x
                            } else {
                                T::zero()
                            }
                        }),
                    );
                }
                Op::LeakyRelu(a, slope) => {
                    let s = *slope;
                    acc(*a, g.zip_map(value(*a), |x, y| if y > T::zero() { x } else { x * s }));
                }
                Op::Tanh(a) => {
                    acc(*a, g.zip_map(&node.value, |x, y| x * (T::one() - y * y)));
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    acc(*a, Tensor::full(value(*a).shape().to_vec(), gv));
                }
                Op::Mean(a) => {
                    let v = value(*a);
                    let gv = g.item() / T::lit(v.numel() as f64);
                    acc(*a, Tensor::full(v.shape().to_vec(), gv));
                }
                Op::Reshape(a) => {
                    let shape = value(*a).shape().to_vec();
                    acc(*a, g.reshape(shape));
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (value(*x), value(*w));
                    let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                    let fout = wv.shape()[0];
                    if need(*x) {
                        let mut gx = vec![T::zero(); n * fin];
                        gemm(n, fout, fin, g.data(), false, wv.data(), false, &mut gx, T::zero());
                        acc(*x, Tensor::new(vec![n, fin], gx));
                    }
                    if need(*w) {
                        let mut gw = vec![T::zero(); fout * fin];
                        gemm(fout, n, fin, g.data(), true, xv.data(), false, &mut gw, T::zero());
                        acc(*w, Tensor::new(vec![fout, fin], gw));
                    }
                    if let Some(b) = b {
                        if need(*b) {
                            let mut gb = vec![T::zero(); fout];
                            for row in g.data().chunks(fout) {
                                for (a, &r) in gb.iter_mut().zip(row) {
                                    *a += r;
                                }
                            }
                            acc(*b, Tensor::new(vec![fout], gb));
                        }
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let need_b = b.map(&need).unwrap_or(false);
                    let grads_c = kernels::conv2d_backward(
                        value(*x),
                        value(*w),
                        &g,
                        *stride,
                        *pad,
                        need(*x),
                        need(*w),
                        need_b,
                    );
                    if let Some(t) = grads_c.x {
                        acc(*x, t);
                    }
                    if let Some(t) = grads_c.w {
                        acc(*w, t);
                    }
                    if let (Some(b), Some(t)) = (b, grads_c.b) {
                        acc(*b, t);
                    }
                }
                Op::ChannelAffine { x, scale, shift } => {
                    let xv = value(*x);
                    let (n, c, h, w) = xv.dims4();
                    let hw = h * w;
                    let sv = value(*scale);
                    if need(*x) {
                        let mut gx = g.clone();
                        for (i, chunk) in gx.data_mut().chunks_mut(hw).enumerate() {
                            let s = sv.data()[i % c];
                            chunk.iter_mut().for_each(|v| *v *= s);
                        }
                        acc(*x, gx);
                    }
                    if need(*scale) || need(*shift) {
                        let mut gs = vec![T::zero(); c];
                        let mut gb = vec![T::zero(); c];
                        for i in 0..n * c {
                            let gc = &g.data()[i * hw..(i + 1) * hw];
                            let xc = &xv.data()[i * hw..(i + 1) * hw];
                            gs[i % c] += gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>();
                            gb[i % c] += gc.iter().copied().sum::<T>();
                        }
                        if need(*scale) {
                            acc(*scale, Tensor::new(vec![c], gs));
                        }
                        if need(*shift) {
                            acc(*shift, Tensor::new(vec![c], gb));
                        }
                    }
                }
                Op::Normalize {
                    x,
                    per_sample,
                    eps,
                    stats,
                } => {
                    acc(*x, kernels::normalize_backward(&node.value, &g, *per_sample, stats, *eps));
                }
                Op::UpsampleNearest(a, f) => acc(*a, kernels::upsample_nearest_backward(&g, *f)),
                Op::UpsampleBilinear2x(a) => acc(*a, kernels::upsample_bilinear2x_backward(&g)),
                Op::AvgPool2(a) => acc(*a, kernels::avg_pool2_backward(&g)),
                Op::MaxPool2(a, arg) => {
                    let mut gx = Tensor::zeros(value(*a).shape().to_vec());
                    for (&src, &gv) in arg.iter().zip(g.data()) {
                        gx.data_mut()[src] += gv;
                    }
                    acc(*a, gx);
                }
                Op::ConcatChannels(parts) => {
                    let (n, ctot, h, w) = g.dims4();
                    let mut offset = 0;
                    for &p in parts {
                        let c = value(p).dims4().1;
                        if need(p) {
                            let mut out = Vec::with_capacity(n * c * h * w);
                            for b in 0..n {
                                let start = (b * ctot + offset) * h * w;
                                out.extend_from_slice(&g.data()[start..start + c * h * w]);
                            }
                            acc(p, Tensor::new(vec![n, c, h, w], out));
                        }
                        offset += c;
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    targets,
                } => {
                    let (n, k, h, w) = probs.dims4();
                    let hw = h * w;
                    let scale = g.item() / T::lit((n * hw) as f64);
                    let mut gl = probs.map(|p| p * scale);
                    for b in 0..n {
                        for s in 0..hw {
                            let t = targets[b * hw + s] as usize;
                            gl.data_mut()[(b * k + t) * hw + s] -= scale;
                        }
                    }
                    acc(*logits, gl);
                }
                Op::SpectralDivide { w, u, v, sigma } => {
                    let wv = value(*w);
                    let inner: T = g.data().iter().zip(wv.data()).map(|(&a, &b)| a * b).sum();
                    let coef = inner / (*sigma * *sigma);
                    let cols = v.len();
                    let inv = T::one() / *sigma;
                    let gw = Tensor::from_fn(wv.shape().to_vec(), |i| {
                        g.data()[i] * inv - coef * u[i / cols] * v[i % cols]
                    });
                    acc(*w, gw);
                }
            }
        }
        Gradients { grads }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Self {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Self, value: Tensor<T>, op: Op<T>) -> Self {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn add(self, other: Self) -> Self {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Self) -> Self {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Self) -> Self {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, s: T) -> Self {
        let v = self.value().map(|a| a * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: T) -> Self {
        let v = self.value().map(|a| a + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn square(self) -> Self {
        let v = self.value().map(|a| a * a);
        self.unary(v, Op::Square(self.id))
    }

    pub fn abs(self) -> Self {
        let v = self.value().map(|a| a.abs());
        self.unary(v, Op::Abs(self.id))
    }

    pub fn leaky_relu(self, slope: T) -> Self {
        let v = self.value().map(|a| if a > T::zero() { a } else { a * slope });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn relu(self) -> Self {
        self.leaky_relu(T::zero())
    }

    pub fn tanh(self) -> Self {
        let v = self.value().map(|a| a.tanh());
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn sum(self) -> Self {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        let v = Tensor::scalar(self.value().mean());
        self.unary(v, Op::Mean(self.id))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Self {
        let v = (*self.value()).clone().reshape(shape);
        self.unary(v, Op::Reshape(self.id))
    }

    /// `x·wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(self, w: Self, b: Option<Self>) -> Self {
        let (xv, wv) = (self.value(), w.value());
        assert_eq!(xv.shape().len(), 2, "linear input must be [n, in]");
        let (n, fin) = (xv.shape()[0], xv.shape()[1]);
        let (fout, wfin) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(fin, wfin, "linear weight expects {wfin} inputs, got {fin}");
        let mut out = vec![T::zero(); n * fout];
        let mut beta = T::zero();
        if let Some(b) = b {
            let bv = b.value();
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv.data());
            }
            beta = T::one();
        }
        gemm(n, fin, fout, xv.data(), false, wv.data(), true, &mut out, beta);
        let rg = self.requires_grad() || w.requires_grad() || b.map(|b| b.requires_grad()).unwrap_or(false);
        self.tape.push(
            Tensor::new(vec![n, fout], out),
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            rg,
        )
    }

    pub fn conv2d(self, w: Self, b: Option<Self>, stride: usize, pad: usize) -> Self {
        let bv = b.map(|b| b.value());
        let v = kernels::conv2d_forward(&self.value(), &w.value(), bv.as_deref(), stride, pad);
        let rg = self.requires_grad() || w.requires_grad() || b.map(|b| b.requires_grad()).unwrap_or(false);
        self.tape.push(
            v,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                stride,
                pad,
            },
            rg,
        )
    }

    /// Per-channel `x * scale[c] + shift[c]`.
    pub fn channel_affine(self, scale: Self, shift: Self) -> Self {
        let xv = self.value();
        let (_, c, h, w) = xv.dims4();
        let (sv, bv) = (scale.value(), shift.value());
        assert!(sv.numel() == c && bv.numel() == c, "channel_affine needs {c} scales/shifts");
        let hw = h * w;
        let mut out = (*xv).clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let (s, b) = (sv.data()[i % c], bv.data()[i % c]);
            chunk.iter_mut().for_each(|v| *v = *v * s + b);
        }
        let rg = self.requires_grad() || scale.requires_grad() || shift.requires_grad();
        self.tape.push(
            out,
            Op::ChannelAffine {
                x: self.id,
                scale: scale.id,
                shift: shift.id,
            },
            rg,
        )
    }

    /// Parameter-free standardisation; returns the output and the batch
    /// statistics `(mean, biased variance)` per group.
    pub fn normalize(self, per_sample: bool, eps: T) -> (Self, Vec<T>, Vec<T>) {
        let (v, stats) = kernels::normalize_forward(&self.value(), per_sample, eps);
        let (mean, var) = (stats.mean.clone(), stats.var.clone());
        let out = self.unary(
            v,
            Op::Normalize {
                x: self.id,
                per_sample,
                eps,
                stats,
            },
        );
        (out, mean, var)
    }

    pub fn upsample_nearest(self, factor: usize) -> Self {
        let v = kernels::upsample_nearest_forward(&self.value(), factor);
        self.unary(v, Op::UpsampleNearest(self.id, factor))
    }

    pub fn upsample_bilinear2x(self) -> Self {
        let v = kernels::upsample_bilinear2x_forward(&self.value());
        self.unary(v, Op::UpsampleBilinear2x(self.id))
    }

    pub fn avg_pool2(self) -> Self {
        let v = kernels::avg_pool2_forward(&self.value());
        self.unary(v, Op::AvgPool2(self.id))
    }

    pub fn max_pool2(self) -> Self {
        let (v, arg) = kernels::max_pool2_forward(&self.value());
        self.unary(v, Op::MaxPool2(self.id, arg))
    }

    /// Mean softmax cross-entropy over all pixels. `self` holds `[n, k, h, w]`
    /// logits and `targets` the `n·h·w` class indices.
    pub fn softmax_cross_entropy(self, targets: Rc<[u8]>) -> Self {
        let lv = self.value();
        let (n, k, h, w) = lv.dims4();
        let hw = h * w;
        assert_eq!(targets.len(), n * hw, "target count mismatch");
        let mut probs = Tensor::zeros(lv.shape().to_vec());
        let mut total = T::zero();
        for b in 0..n {
            for s in 0..hw {
                let at = |c: usize| lv.data()[(b * k + c) * hw + s];
                let mx = (0..k).map(at).fold(T::neg_infinity(), T::max);
                let z: T = (0..k).map(|c| (at(c) - mx).exp()).sum();
                for c in 0..k {
                    probs.data_mut()[(b * k + c) * hw + s] = (at(c) - mx).exp() / z;
                }
                let t = targets[b * hw + s] as usize;
                assert!(t < k, "target class {t} out of range for {k} logits");
                total += z.ln() + mx - at(t);
            }
        }
        let loss = Tensor::scalar(total / T::lit((n * hw) as f64));
        self.unary(
            loss,
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                probs,
                targets,
            },
        )
    }

    /// `W / σ` with `σ = uᵀ W v`, where `W` is viewed as `[rows, cols]`
    /// (`rows` = leading dimension). `u` and `v` are held constant.
    pub fn spectral_divide(self, u: Vec<T>, v: Vec<T>) -> (Self, T) {
        let wv = self.value();
        let rows = wv.shape()[0];
        let cols = wv.numel() / rows;
        assert!(u.len() == rows && v.len() == cols, "power-iteration vectors do not match weight");
        let mut sigma = T::zero();
        for r in 0..rows {
            let row = &wv.data()[r * cols..(r + 1) * cols];
            sigma += u[r] * row.iter().zip(&v).map(|(&a, &b)| a * b).sum::<T>();
        }
        let inv = T::one() / sigma;
        let out = wv.map(|x| x * inv);
        (self.unary(out, Op::SpectralDivide { w: self.id, u, v, sigma }), sigma)
    }
}

impl<'t, T: Real> std::ops::Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'t, T: Real> std::ops::Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'t, T: Real> std::ops::Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}
