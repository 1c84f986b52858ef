use std::cell::RefCell;

use histosynth_autograd::{Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::store::{Bound, Slot, Store};
use crate::error::{Error, Result};
use crate::init::glorot_tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch statistics observed by one normalisation layer in train mode.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean_slot: Slot,
    pub var_slot: Slot,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements per channel.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub label: String,
    pub shape: Vec<usize>,
}

/// Per-forward state: mode, collected batch statistics and a shape trace.
pub struct Ctx<T> {
    pub mode: Mode,
    pub stats: Vec<BatchStats<T>>,
    pub trace: Vec<TraceEntry>,
}

impl<T> Ctx<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            stats: Vec::new(),
            trace: Vec::new(),
        }
    }

    pub fn record(&mut self, label: impl Into<String>, shape: Vec<usize>) {
        self.trace.push(TraceEntry {
            label: label.into(),
            shape,
        });
    }
}

/// Power-iteration state for one weight viewed as `[rows, cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNormState<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
    pub iterations: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralOutput<T> {
    pub weight: Tensor<T>,
    pub sigma: T,
    /// Set when the weight had no usable direction and was returned as is.
    pub degenerate: bool,
}

fn unit_vec<T: Real>(v: &mut [T]) -> bool {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if !(n.is_finite() && n > T::zero()) {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

fn rows_cols<T: Real>(w: &Tensor<T>) -> (usize, usize) {
    let rows = w.shape()[0];
    (rows, w.numel() / rows)
}

/// One power-iteration step: `v ← Wᵀu/‖·‖`, `u ← Wv/‖·‖`. Leaves `u`, `v`
/// untouched and returns `false` when `W` annihilates them.
pub fn power_iteration<T: Real>(w: &Tensor<T>, u: &mut [T], v: &mut [T]) -> bool {
    let (rows, cols) = rows_cols(w);
    let d = w.data();
    let mut nv = vec![T::zero(); cols];
    for r in 0..rows {
        let ur = u[r];
        for (acc, &x) in nv.iter_mut().zip(&d[r * cols..(r + 1) * cols]) {
            *acc += ur * x;
        }
    }
    if !unit_vec(&mut nv) {
        return false;
    }
    let mut nu: Vec<T> = (0..rows)
        .map(|r| d[r * cols..(r + 1) * cols].iter().zip(&nv).map(|(&a, &b)| a * b).sum())
        .collect();
    if !unit_vec(&mut nu) {
        return false;
    }
    u.copy_from_slice(&nu);
    v.copy_from_slice(&nv);
    true
}

/// `uᵀ W v`.
pub fn sigma_estimate<T: Real>(w: &Tensor<T>, u: &[T], v: &[T]) -> T {
    let (rows, cols) = rows_cols(w);
    (0..rows)
        .map(|r| u[r] * w.data()[r * cols..(r + 1) * cols].iter().zip(v).map(|(&a, &b)| a * b).sum::<T>())
        .sum()
}

impl<T: Real> SpectralNormState<T> {
    /// Random unit `u` and matching `v` for a weight of the given shape.
    pub fn init(w: &Tensor<T>, rng: &mut impl Rng) -> Self {
        let (rows, cols) = rows_cols(w);
        let mut u: Vec<T> = (0..rows)
            .map(|_| T::lit(StandardNormal.sample(rng)))
            .collect();
        if !unit_vec(&mut u) {
            u = vec![T::zero(); rows];
            u[0] = T::one();
        }
        let mut v = vec![T::zero(); cols];
        v[0] = T::one();
        let mut s = Self { u, v, iterations: 0 };
        if power_iteration(w, &mut s.u, &mut s.v) {
            s.iterations = 1;
        }
        s
    }
}

/// Run `n_iter` power iterations, then divide by `σ = uᵀWv`.
pub fn spectral_normalize<T: Real>(w: &Tensor<T>, state: &mut SpectralNormState<T>, n_iter: usize) -> SpectralOutput<T> {
    let mut ok = true;
    for _ in 0..n_iter {
        ok &= power_iteration(w, &mut state.u, &mut state.v);
        state.iterations += 1;
    }
    let sigma = sigma_estimate(w, &state.u, &state.v);
    if !ok || !(sigma.is_finite() && sigma.abs() > T::lit(1e-12)) {
        return SpectralOutput {
            weight: w.clone(),
            sigma,
            degenerate: true,
        };
    }
    let inv = T::one() / sigma;
    SpectralOutput {
        weight: w.map(|x| x * inv),
        sigma,
        degenerate: false,
    }
}

/// 2-D convolution with optional bias and optional spectral normalisation.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: Slot,
    pub b: Option<Slot>,
    /// `(u, v)` buffer slots.
    pub sn: Option<(Slot, Slot)>,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvSpec<'a> {
    pub name: &'a str,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
    pub spectral: bool,
}

impl<'a> ConvSpec<'a> {
    /// Stride-1 "same" convolution with bias.
    pub fn same(name: &'a str, cin: usize, cout: usize, kernel: usize, spectral: bool) -> Self {
        Self {
            name,
            cin,
            cout,
            kernel,
            stride: 1,
            pad: kernel / 2,
            bias: true,
            spectral,
        }
    }
}

impl Conv {
    pub fn new<T: Real>(params: &mut Store<T>, bufs: &mut Store<T>, s: ConvSpec<'_>, rng: &mut impl Rng) -> Self {
        let k2 = s.kernel * s.kernel;
        let w = glorot_tensor::<T>(vec![s.cout, s.cin, s.kernel, s.kernel], s.cin * k2, s.cout * k2, rng);
        let sn = s.spectral.then(|| {
            let st = SpectralNormState::init(&w, rng);
            let u = bufs.add(format!("{}.sn_u", s.name), Tensor::new(vec![st.u.len()], st.u));
            let v = bufs.add(format!("{}.sn_v", s.name), Tensor::new(vec![st.v.len()], st.v));
            (u, v)
        });
        let w = params.add(format!("{}.weight", s.name), w);
        let b = s.bias.then(|| params.add(format!("{}.bias", s.name), Tensor::zeros(vec![s.cout])));
        Self {
            w,
            b,
            sn,
            stride: s.stride,
            pad: s.pad,
        }
    }

    /// Effective weight on the tape (divided by σ when normalised).
    pub fn weight<'t, T: Real>(&self, p: &Bound<'t, T>, bufs: &Store<T>) -> Var<'t, T> {
        let w = p[self.w];
        match self.sn {
            None => w,
            Some((us, vs)) => {
                let (u, v) = (bufs.get(us).data().to_vec(), bufs.get(vs).data().to_vec());
                let sigma = sigma_estimate(&w.value(), &u, &v);
                if sigma.is_finite() && sigma.abs() > T::lit(1e-12) {
                    w.spectral_divide(u, v).0
                } else {
                    w
                }
            }
        }
    }

    pub fn forward<'t, T: Real>(&self, x: Var<'t, T>, p: &Bound<'t, T>, bufs: &Store<T>) -> Var<'t, T> {
        let w = self.weight(p, bufs);
        x.conv2d(w, self.b.map(|b| p[b]), self.stride, self.pad)
    }

    /// One power-iteration step on the stored vectors. Returns `false` for a
    /// degenerate (e.g. all-zero) weight.
    pub fn power_iterate<T: Real>(&self, params: &Store<T>, bufs: &mut Store<T>) -> bool {
        let Some((us, vs)) = self.sn else { return true };
        let mut u = bufs.get(us).data().to_vec();
        let mut v = bufs.get(vs).data().to_vec();
        let ok = power_iteration(params.get(self.w), &mut u, &mut v);
        bufs.get_mut(us).data_mut().copy_from_slice(&u);
        bufs.get_mut(vs).data_mut().copy_from_slice(&v);
        ok
    }

    pub fn cout<T: Real>(&self, params: &Store<T>) -> usize {
        params.get(self.w).shape()[0]
    }
}

/// Label map one-hot volume with cached nearest-neighbour resamplings.
pub struct LabelPyramid<'t, T: Real> {
    tape: &'t Tape<T>,
    full: Tensor<T>,
    cache: RefCell<Vec<((usize, usize), Var<'t, T>)>>,
}

/// Nearest-neighbour resize of an NCHW tensor (`src = ⌊dst·in/out⌋`).
pub fn resize_nearest<T: Real>(x: &Tensor<T>, ho: usize, wo: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for y in 0..ho {
            let sy = y * h / ho;
            for xo in 0..wo {
                out.push(plane[sy * w + xo * w / wo]);
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

impl<'t, T: Real> LabelPyramid<'t, T> {
    /// `onehot` is `[N, K, H, W]`.
    pub fn new(tape: &'t Tape<T>, onehot: Tensor<T>) -> Self {
        Self {
            tape,
            full: onehot,
            cache: RefCell::new(Vec::new()),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.full.dims4().1
    }

    pub fn batch(&self) -> usize {
        self.full.dims4().0
    }

    pub fn full(&self) -> &Tensor<T> {
        &self.full
    }

    /// Constant one-hot volume at `h × w`.
    pub fn at(&self, h: usize, w: usize) -> Var<'t, T> {
        if let Some((_, v)) = self.cache.borrow().iter().find(|(k, _)| *k == (h, w)) {
            return *v;
        }
        let (_, _, fh, fw) = self.full.dims4();
        let t = if (fh, fw) == (h, w) {
            self.full.clone()
        } else {
            resize_nearest(&self.full, h, w)
        };
        let v = self.tape.constant(t);
        self.cache.borrow_mut().push(((h, w), v));
        v
    }
}

/// Spatially-adaptive normalisation: `x̂ ⊙ (1 + γ(m)) + β(m)`.
#[derive(Clone, Debug)]
pub struct Spade {
    pub shared: Conv,
    pub gamma: Conv,
    pub beta: Conv,
    pub running_mean: Slot,
    pub running_var: Slot,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

pub struct SpadeSpec<'a> {
    pub name: &'a str,
    pub channels: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub spectral: bool,
    pub eps: f64,
    pub momentum: f64,
}

impl Spade {
    pub fn new<T: Real>(params: &mut Store<T>, bufs: &mut Store<T>, s: SpadeSpec<'_>, rng: &mut impl Rng) -> Self {
        let shared_name = format!("{}.shared", s.name);
        let gamma_name = format!("{}.gamma", s.name);
        let beta_name = format!("{}.beta", s.name);
        let shared = Conv::new(params, bufs, ConvSpec::same(&shared_name, s.num_classes, s.hidden, 3, s.spectral), rng);
        let gamma = Conv::new(params, bufs, ConvSpec::same(&gamma_name, s.hidden, s.channels, 3, s.spectral), rng);
        let beta = Conv::new(params, bufs, ConvSpec::same(&beta_name, s.hidden, s.channels, 3, s.spectral), rng);
        let running_mean = bufs.add(format!("{}.running_mean", s.name), Tensor::zeros(vec![s.channels]));
        let running_var = bufs.add(format!("{}.running_var", s.name), Tensor::ones(vec![s.channels]));
        Self {
            shared,
            gamma,
            beta,
            running_mean,
            running_var,
            channels: s.channels,
            eps: s.eps,
            momentum: s.momentum,
        }
    }

    /// Parameter-free normalisation of `x` for the given mode.
    fn standardize<'t, T: Real>(&self, x: Var<'t, T>, bufs: &Store<T>, ctx: &mut Ctx<T>) -> Var<'t, T> {
        let eps = T::lit(self.eps);
        match ctx.mode {
            Mode::Train => {
                let (n, _, h, w) = x.value().dims4();
                let (xh, mean, var) = x.normalize(false, eps);
                ctx.stats.push(BatchStats {
                    mean_slot: self.running_mean,
                    var_slot: self.running_var,
                    mean,
                    var,
                    count: n * h * w,
                });
                xh
            }
            Mode::Infer => {
                let rm = bufs.get(self.running_mean).data();
                let rv = bufs.get(self.running_var).data();
                let scale: Vec<T> = rv.iter().map(|&v| T::one() / v.max(eps).sqrt()).collect();
                let shift: Vec<T> = rm.iter().zip(&scale).map(|(&m, &s)| -m * s).collect();
                let tape = x.tape();
                let c = scale.len();
                x.channel_affine(
                    tape.constant(Tensor::new(vec![c], scale)),
                    tape.constant(Tensor::new(vec![c], shift)),
                )
            }
        }
    }

    /// `(γ, β)` maps at `h × w`.
    pub fn modulation<'t, T: Real>(
        &self,
        labels: &LabelPyramid<'t, T>,
        h: usize,
        w: usize,
        p: &Bound<'t, T>,
        bufs: &Store<T>,
    ) -> (Var<'t, T>, Var<'t, T>) {
        let m = labels.at(h, w);
        let hidden = self.shared.forward(m, p, bufs).relu();
        (self.gamma.forward(hidden, p, bufs), self.beta.forward(hidden, p, bufs))
    }

    pub fn forward<'t, T: Real>(
        &self,
        x: Var<'t, T>,
        labels: &LabelPyramid<'t, T>,
        p: &Bound<'t, T>,
        bufs: &Store<T>,
        ctx: &mut Ctx<T>,
    ) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Shape(format!(
                "normalisation layer expects {} channels, got shape {shape:?}",
                self.channels
            )));
        }
        if labels.batch() != shape[0] {
            return Err(Error::Shape(format!(
                "label batch {} does not match activation batch {}",
                labels.batch(),
                shape[0]
            )));
        }
        let xh = self.standardize(x, bufs, ctx);
        let (gamma, beta) = self.modulation(labels, shape[2], shape[3], p, bufs);
        Ok(xh * gamma.add_scalar(T::one()) + beta)
    }

    fn convs(&self) -> [&Conv; 3] {
        [&self.shared, &self.gamma, &self.beta]
    }
}

/// Residual block with SPADE on both the main and (when channels change)
/// the skip path.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm0: Spade,
    pub conv0: Conv,
    pub norm1: Spade,
    pub conv1: Conv,
    pub skip: Option<(Spade, Conv)>,
    pub cin: usize,
    pub cout: usize,
}

pub struct ResBlockSpec<'a> {
    pub name: &'a str,
    pub cin: usize,
    pub cout: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub spectral: bool,
    pub eps: f64,
    pub momentum: f64,
}

fn spade_spec<'a>(name: &'a str, channels: usize, s: &ResBlockSpec<'_>) -> SpadeSpec<'a> {
    SpadeSpec {
        name,
        channels,
        num_classes: s.num_classes,
        hidden: s.hidden,
        spectral: s.spectral,
        eps: s.eps,
        momentum: s.momentum,
    }
}

impl ResBlock {
    pub fn new<T: Real>(params: &mut Store<T>, bufs: &mut Store<T>, s: ResBlockSpec<'_>, rng: &mut impl Rng) -> Self {
        let mid = s.cin.min(s.cout);
        let n = s.name;
        let names = [format!("{n}.norm0"), format!("{n}.norm1"), format!("{n}.norm_skip")];
        let norm0 = Spade::new(params, bufs, spade_spec(&names[0], s.cin, &s), rng);
        let conv0 = Conv::new(params, bufs, ConvSpec::same(&format!("{n}.conv0"), s.cin, mid, 3, s.spectral), rng);
        let norm1 = Spade::new(params, bufs, spade_spec(&names[1], mid, &s), rng);
        let conv1 = Conv::new(params, bufs, ConvSpec::same(&format!("{n}.conv1"), mid, s.cout, 3, s.spectral), rng);
        let skip = (s.cin != s.cout).then(|| {
            let norm = Spade::new(params, bufs, spade_spec(&names[2], s.cin, &s), rng);
            let skip_name = format!("{n}.conv_skip");
            let mut spec = ConvSpec::same(&skip_name, s.cin, s.cout, 3, s.spectral);
            spec.bias = false;
            (norm, Conv::new(params, bufs, spec, rng))
        });
        Self {
            norm0,
            conv0,
            norm1,
            conv1,
            skip,
            cin: s.cin,
            cout: s.cout,
        }
    }

    pub fn forward<'t, T: Real>(
        &self,
        x: Var<'t, T>,
        labels: &LabelPyramid<'t, T>,
        p: &Bound<'t, T>,
        bufs: &Store<T>,
        ctx: &mut Ctx<T>,
    ) -> Result<Var<'t, T>> {
        let slope = T::lit(LEAKY_SLOPE);
        let h = self.norm0.forward(x, labels, p, bufs, ctx)?.leaky_relu(slope);
        let h = self.conv0.forward(h, p, bufs);
        let h = self.norm1.forward(h, labels, p, bufs, ctx)?.leaky_relu(slope);
        let main = self.conv1.forward(h, p, bufs);
        let skip = match &self.skip {
            Some((norm, conv)) => conv.forward(norm.forward(x, labels, p, bufs, ctx)?, p, bufs),
            None => x,
        };
        Ok(main + skip)
    }

    pub fn convs(&self) -> Vec<&Conv> {
        let mut out: Vec<&Conv> = self.norm0.convs().into_iter().chain(self.norm1.convs()).collect();
        out.push(&self.conv0);
        out.push(&self.conv1);
        if let Some((norm, conv)) = &self.skip {
            out.extend(norm.convs());
            out.push(conv);
        }
        out
    }
}

/// Fold train-mode batch statistics into the running buffers:
/// `running ← momentum·running + (1 − momentum)·batch` with the unbiased
/// batch variance.
pub fn apply_batch_stats<T: Real>(bufs: &mut Store<T>, stats: &[BatchStats<T>], momentum: f64) {
    let mo = T::lit(momentum);
    let one_minus = T::one() - mo;
    for s in stats {
        let unbias = if s.count > 1 {
            T::lit(s.count as f64 / (s.count - 1) as f64)
        } else {
            T::one()
        };
        for (r, &m) in bufs.get_mut(s.mean_slot).data_mut().iter_mut().zip(&s.mean) {
            *r = mo * *r + one_minus * m;
        }
        for (r, &v) in bufs.get_mut(s.var_slot).data_mut().iter_mut().zip(&s.var) {
            *r = mo * *r + one_minus * v * unbias;
        }
    }
}
