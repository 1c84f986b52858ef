//! Generator with spatially-adaptive normalisation and the two-scale patch
//! discriminators.

pub mod layers;
pub mod store;

use histosynth_autograd::{Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use layers::{
    apply_batch_stats, power_iteration, resize_nearest, sigma_estimate, spectral_normalize, BatchStats, Conv,
    ConvSpec, Ctx, LabelPyramid, Mode, ResBlock, ResBlockSpec, Spade, SpadeSpec, SpectralNormState,
    SpectralOutput, TraceEntry, LEAKY_SLOPE,
};
pub use store::{Bound, Slot, Store};

use crate::data_model::{one_hot_batch, LabelMap, LatentVector, NormImage, LATENT_DIM};
use crate::error::{Error, Result};

/// Channel schedule the stages are cut from.
pub const DEFAULT_SCHEDULE: [usize; 7] = [1024, 1024, 512, 256, 128, 64, 64];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    /// Channels of the initial 4×4 feature block.
    pub base_channels: usize,
    pub resolution: usize,
    pub num_classes: usize,
    /// Per-stage output channels; truncated to the stage count, or extended
    /// by repeating the last entry.
    pub schedule: Vec<usize>,
    pub spade_hidden: usize,
    pub spectral_norm: bool,
    pub norm_eps: f64,
    pub norm_momentum: f64,
}

impl GeneratorConfig {
    pub fn new(resolution: usize, num_classes: usize) -> Self {
        Self {
            latent_dim: LATENT_DIM,
            base_channels: 1024,
            resolution,
            num_classes,
            schedule: DEFAULT_SCHEDULE.to_vec(),
            spade_hidden: 128,
            spectral_norm: true,
            norm_eps: 1e-5,
            norm_momentum: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || self.resolution < 16 {
            return Err(Error::Config(format!(
                "resolution {} must be a power of two >= 16",
                self.resolution
            )));
        }
        if !(2..=256).contains(&self.num_classes) {
            return Err(Error::Config(format!("class count {} outside 2..=256", self.num_classes)));
        }
        if self.latent_dim == 0 || self.base_channels == 0 || self.spade_hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.schedule.is_empty() || self.schedule.contains(&0) {
            return Err(Error::Config("channel schedule must be non-empty and positive".into()));
        }
        if !(0.0..1.0).contains(&self.norm_momentum) || self.norm_eps <= 0.0 {
            return Err(Error::Config("invalid normalisation momentum or eps".into()));
        }
        Ok(())
    }

    /// `S = log2(R / 4)`.
    pub fn stages(&self) -> usize {
        (self.resolution / 4).trailing_zeros() as usize
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        let last = *self.schedule.last().expect("validated schedule");
        (0..self.stages())
            .map(|i| self.schedule.get(i).copied().unwrap_or(last))
            .collect()
    }

    pub fn dense_outputs(&self) -> usize {
        self.base_channels * 16
    }
}

/// Generator weights, buffers and layer layout.
#[derive(Clone, Debug)]
pub struct Generator<T: Real> {
    pub cfg: GeneratorConfig,
    pub params: Store<T>,
    pub buffers: Store<T>,
    dense_w: Slot,
    dense_b: Slot,
    blocks: Vec<ResBlock>,
    out_conv: Conv,
}

impl<T: Real> Generator<T> {
    pub fn build(cfg: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = Store::new();
        let mut buffers = Store::new();
        let dense_out = cfg.dense_outputs();
        let dense_w = params.add(
            "dense.weight",
            crate::init::glorot_tensor(vec![dense_out, cfg.latent_dim], cfg.latent_dim, dense_out, rng),
        );
        let dense_b = params.add("dense.bias", Tensor::zeros(vec![dense_out]));
        let mut blocks = Vec::new();
        let mut cin = cfg.base_channels;
        for (i, cout) in cfg.stage_channels().into_iter().enumerate() {
            let name = format!("stage{i}");
            blocks.push(ResBlock::new(
                &mut params,
                &mut buffers,
                ResBlockSpec {
                    name: &name,
                    cin,
                    cout,
                    num_classes: cfg.num_classes,
                    hidden: cfg.spade_hidden,
                    spectral: cfg.spectral_norm,
                    eps: cfg.norm_eps,
                    momentum: cfg.norm_momentum,
                },
                rng,
            ));
            cin = cout;
        }
        let out_conv = Conv::new(
            &mut params,
            &mut buffers,
            ConvSpec::same("to_rgb", cin, 3, 3, cfg.spectral_norm),
            rng,
        );
        Ok(Self {
            cfg,
            params,
            buffers,
            dense_w,
            dense_b,
            blocks,
            out_conv,
        })
    }

    pub fn blocks(&self) -> &[ResBlock] {
        &self.blocks
    }

    fn convs(&self) -> Vec<&Conv> {
        let mut out: Vec<&Conv> = self.blocks.iter().flat_map(|b| b.convs()).collect();
        out.push(&self.out_conv);
        out
    }

    /// One power-iteration step on every normalised convolution. Returns the
    /// number of degenerate weights.
    pub fn power_iterate(&mut self) -> usize {
        let convs: Vec<Conv> = self.convs().into_iter().cloned().collect();
        convs
            .iter()
            .filter(|c| !c.power_iterate(&self.params, &mut self.buffers))
            .count()
    }

    pub fn apply_stats(&mut self, stats: &[BatchStats<T>]) {
        apply_batch_stats(&mut self.buffers, stats, self.cfg.norm_momentum);
    }

    /// `onehot` is `[N, K, R, R]`, `z` is `[N, latent_dim]`. Returns
    /// `[N, 3, R, R]` in `(−1, 1)`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t, T>,
        labels: &LabelPyramid<'t, T>,
        z: Var<'t, T>,
        ctx: &mut Ctx<T>,
    ) -> Result<Var<'t, T>> {
        let r = self.cfg.resolution;
        let (n, k, h, w) = labels.full().dims4();
        if k != self.cfg.num_classes || (h, w) != (r, r) {
            return Err(Error::Shape(format!(
                "generator expects labels [N, {}, {r}, {r}], got {:?}",
                self.cfg.num_classes,
                labels.full().shape()
            )));
        }
        if z.shape() != [n, self.cfg.latent_dim] {
            return Err(Error::Shape(format!(
                "generator expects latents [{n}, {}], got {:?}",
                self.cfg.latent_dim,
                z.shape()
            )));
        }
        let dense = z.linear(p[self.dense_w], Some(p[self.dense_b]));
        ctx.record("dense", dense.shape());
        let mut x = dense.reshape(vec![n, self.cfg.base_channels, 4, 4]);
        ctx.record("reshape", x.shape());
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(x, labels, p, &self.buffers, ctx)?;
            ctx.record(format!("stage{i}.block"), x.shape());
            x = x.upsample_nearest(2);
            ctx.record(format!("stage{i}.upsample"), x.shape());
        }
        let out = self.out_conv.forward(x, p, &self.buffers).tanh();
        ctx.record("output", out.shape());
        Ok(out)
    }

    fn check_map(&self, m: &LabelMap) -> Result<()> {
        let r = self.cfg.resolution;
        if (m.width(), m.height()) != (r, r) {
            return Err(Error::Shape(format!(
                "label map is {}x{}, model resolution is {r}",
                m.width(),
                m.height()
            )));
        }
        Ok(())
    }

    /// Infer-mode synthesis for one label map and latent. Deterministic.
    pub fn generate(&self, m: &LabelMap, z: &LatentVector) -> Result<NormImage> {
        self.check_map(m)?;
        if self.cfg.latent_dim != LATENT_DIM {
            return Err(Error::Shape(format!(
                "model latent size {} differs from {LATENT_DIM}",
                self.cfg.latent_dim
            )));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let labels = LabelPyramid::new(&tape, one_hot_batch::<T>(&[m], self.cfg.num_classes)?);
        let zt = Tensor::new(vec![1, LATENT_DIM], z.as_slice().iter().map(|&v| T::lit(v)).collect());
        let mut ctx = Ctx::new(Mode::Infer);
        let out = self.forward(&p, &labels, tape.constant(zt), &mut ctx)?;
        let v = out.value();
        NormImage::from_batch(&v, 0)
    }

    /// Layer shapes of an infer-mode forward on a constant map.
    pub fn shape_trace(&self) -> Result<Vec<TraceEntry>> {
        let r = self.cfg.resolution;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let m = LabelMap::filled(r, r, self.cfg.num_classes, 0)?;
        let labels = LabelPyramid::new(&tape, one_hot_batch::<T>(&[&m], self.cfg.num_classes)?);
        let z = tape.constant(Tensor::zeros(vec![1, self.cfg.latent_dim]));
        let mut ctx = Ctx::new(Mode::Infer);
        self.forward(&p, &labels, z, &mut ctx)?;
        Ok(ctx.trace)
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
            dense_w: self.dense_w,
            dense_b: self.dense_b,
            blocks: self.blocks.clone(),
            out_conv: self.out_conv.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub num_classes: usize,
    pub channels: Vec<usize>,
    /// Kernel of the strided blocks; the scoring convolution is always 3×3.
    pub kernel: usize,
    pub spectral_norm: bool,
    pub norm_eps: f64,
}

impl DiscriminatorConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            channels: vec![64, 128, 256, 512],
            kernel: 3,
            spectral_norm: true,
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("discriminator channels must be non-empty and positive".into()));
        }
        if !(self.kernel == 3 || self.kernel == 4) {
            return Err(Error::Config(format!("discriminator kernel {} must be 3 or 4", self.kernel)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("discriminator needs at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.num_classes + 3
    }
}

#[derive(Clone, Debug)]
struct DiscBlock {
    conv: Conv,
    scale: Slot,
    offset: Slot,
}

#[derive(Clone, Debug)]
struct DiscNet {
    blocks: Vec<DiscBlock>,
    out: Conv,
}

/// Two structurally identical patch discriminators. The first sees the
/// full-resolution `concat(one-hot, image)`, the second its 2×2 average.
#[derive(Clone, Debug)]
pub struct Discriminators<T: Real> {
    pub cfg: DiscriminatorConfig,
    pub params: Store<T>,
    pub buffers: Store<T>,
    nets: [DiscNet; 2],
}

impl<T: Real> Discriminators<T> {
    pub fn build(cfg: DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = Store::new();
        let mut buffers = Store::new();
        let mut nets = Vec::with_capacity(2);
        for prefix in ["d1", "d2"] {
            let mut blocks = Vec::new();
            let mut cin = cfg.in_channels();
            for (i, &cout) in cfg.channels.iter().enumerate() {
                let name = format!("{prefix}.block{i}");
                let conv = Conv::new(
                    &mut params,
                    &mut buffers,
                    ConvSpec {
                        name: &name,
                        cin,
                        cout,
                        kernel: cfg.kernel,
                        stride: 2,
                        pad: 1,
                        bias: true,
                        spectral: cfg.spectral_norm,
                    },
                    rng,
                );
                let scale = params.add(format!("{name}.norm_scale"), Tensor::ones(vec![cout]));
                let offset = params.add(format!("{name}.norm_offset"), Tensor::zeros(vec![cout]));
                blocks.push(DiscBlock { conv, scale, offset });
                cin = cout;
            }
            let out = Conv::new(
                &mut params,
                &mut buffers,
                ConvSpec::same(&format!("{prefix}.score"), cin, 1, 3, cfg.spectral_norm),
                rng,
            );
            nets.push(DiscNet { blocks, out });
        }
        let d2 = nets.pop().expect("two nets");
        let d1 = nets.pop().expect("two nets");
        Ok(Self {
            cfg,
            params,
            buffers,
            nets: [d1, d2],
        })
    }

    fn convs(&self) -> Vec<&Conv> {
        self.nets
            .iter()
            .flat_map(|n| n.blocks.iter().map(|b| &b.conv).chain(std::iter::once(&n.out)))
            .collect()
    }

    pub fn power_iterate(&mut self) -> usize {
        let convs: Vec<Conv> = self.convs().into_iter().cloned().collect();
        convs
            .iter()
            .filter(|c| !c.power_iterate(&self.params, &mut self.buffers))
            .count()
    }

    /// Score map of discriminator `which` (0 or 1) for an input that is
    /// already at that discriminator's scale.
    pub fn score<'t>(&self, which: usize, input: Var<'t, T>, p: &Bound<'t, T>) -> Var<'t, T> {
        let net = &self.nets[which];
        let eps = T::lit(self.cfg.norm_eps);
        let mut x = input;
        for b in &net.blocks {
            x = b.conv.forward(x, p, &self.buffers);
            x = x.normalize(true, eps).0.channel_affine(p[b.scale], p[b.offset]);
            x = x.leaky_relu(T::lit(LEAKY_SLOPE));
        }
        net.out.forward(x, p, &self.buffers)
    }

    /// Both score maps for a full-resolution `concat(one-hot, image)` input.
    pub fn scores<'t>(&self, input: Var<'t, T>, p: &Bound<'t, T>) -> Result<[Var<'t, T>; 2]> {
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels() {
            return Err(Error::Shape(format!(
                "discriminator expects {} input channels, got {shape:?}",
                self.cfg.in_channels()
            )));
        }
        if shape[2] % 2 != 0 || shape[3] % 2 != 0 {
            return Err(Error::Shape(format!("discriminator input must have even size, got {shape:?}")));
        }
        let s1 = self.score(0, input, p);
        let s2 = self.score(1, input.avg_pool2(), p);
        Ok([s1, s2])
    }

    /// Parameter shapes of one discriminator, in construction order.
    pub fn layout(&self, which: usize) -> Vec<Vec<usize>> {
        let prefix = format!("d{}.", which + 1);
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(&prefix))
            .map(|(_, t)| t.shape().to_vec())
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Discriminators<U> {
        Discriminators {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
            nets: self.nets.clone(),
        }
    }
}

/// 2×2 average pooling of an image.
pub fn downsample2x(img: &NormImage) -> Result<NormImage> {
    let (w, h) = (img.width(), img.height());
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::Shape(format!("downsampling needs even dimensions, got {w}x{h}")));
    }
    let (wo, ho) = (w / 2, h / 2);
    let d = img.data();
    let mut out = Vec::with_capacity(wo * ho * 3);
    for y in 0..ho {
        for x in 0..wo {
            for c in 0..3 {
                let at = |yy: usize, xx: usize| d[(yy * w + xx) * 3 + c];
                let s = at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1);
                out.push(s * 0.25);
            }
        }
    }
    NormImage::new(wo, ho, out)
}

/// `concat(one-hot, image)` along channels.
pub fn disc_input<'t, T: Real>(tape: &'t Tape<T>, onehot: Var<'t, T>, image: Var<'t, T>) -> Var<'t, T> {
    tape.concat_channels(&[onehot, image])
}
