use std::path::{Path, PathBuf};

use histosynth_autograd::{Gradients, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::checkpoint::Container;
use super::perceptual::FeatureExtractor;
use super::{multiscale_d_loss, multiscale_g_loss, Adam, AdamConfig, LossWeights, LrSchedule};
use crate::data_model::{
    denormalize, normalize, one_hot_batch, ByteImage, ClassPalette, LabelMap, LatentVector, NormImage,
};
use crate::error::{Error, Result};
use crate::networks::{
    disc_input, Bound, Ctx, DiscriminatorConfig, Discriminators, Generator, GeneratorConfig, LabelPyramid, Mode,
};
use crate::stain_prep::{apply_transform, PatchPair, Transform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Write a checkpoint and sample grid every this many iterations
    /// (0 = only at the end).
    pub checkpoint_every: u64,
    /// Random rotation/reflection of every sampled pair.
    pub augment: bool,
    /// Seed of the random fallback feature extractor.
    pub perceptual_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            schedule: LrSchedule::GAN,
            adam: AdamConfig::GAN,
            loss_weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            augment: true,
            perceptual_seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.schedule.base > 0.0 && self.schedule.factor > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.loss_weights.gan < 0.0 || self.loss_weights.perceptual < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
}

impl GanConfig {
    /// Full-width networks for the given resolution and class count.
    pub fn new(resolution: usize, num_classes: usize) -> Self {
        Self {
            generator: GeneratorConfig::new(resolution, num_classes),
            discriminator: DiscriminatorConfig::new(num_classes),
            train: TrainConfig::default(),
        }
    }

    /// Narrow networks for 64×64 desk-scale runs.
    pub fn toy(num_classes: usize) -> Self {
        let mut cfg = Self::new(64, num_classes);
        cfg.generator.base_channels = 32;
        cfg.generator.schedule = vec![32, 32, 16, 16];
        cfg.generator.spade_hidden = 16;
        cfg.discriminator.channels = vec![8, 16, 32, 32];
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.train.validate()?;
        if self.generator.num_classes != self.discriminator.num_classes {
            return Err(Error::Config("generator and discriminator class counts differ".into()));
        }
        Ok(())
    }
}

/// One row of the loss log. Loss values are unweighted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub lr: f64,
    pub d_loss: f64,
    pub g_gan_loss: f64,
    pub g_perc_loss: f64,
}

impl LossRecord {
    /// `λ_gan·g_gan + λ_perc·g_perc`.
    pub fn generator_total(&self, w: &LossWeights) -> f64 {
        w.gan * self.g_gan_loss + w.perceptual * self.g_perc_loss
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct GanState {
    pub cfg: GanConfig,
    pub palette: Option<ClassPalette>,
    pub generator: Generator<f32>,
    pub discriminators: Discriminators<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub phi: FeatureExtractor<f32>,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
}

fn grads_for<'t>(g: &mut Gradients<f32>, bound: &Bound<'t, f32>) -> Vec<Option<Tensor<f32>>> {
    bound.vars().iter().map(|&v| g.take(v)).collect()
}

impl GanState {
    pub fn new(cfg: GanConfig, palette: Option<ClassPalette>) -> Result<Self> {
        let phi = FeatureExtractor::default_random(cfg.train.perceptual_seed);
        Self::with_extractor(cfg, palette, phi)
    }

    pub fn with_extractor(cfg: GanConfig, palette: Option<ClassPalette>, phi: FeatureExtractor<f32>) -> Result<Self> {
        cfg.validate()?;
        if let Some(p) = &palette {
            if p.len() != cfg.generator.num_classes {
                return Err(Error::Config(format!(
                    "palette has {} classes, model has {}",
                    p.len(),
                    cfg.generator.num_classes
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let generator = Generator::build(cfg.generator.clone(), &mut rng)?;
        let discriminators = Discriminators::build(cfg.discriminator.clone(), &mut rng)?;
        let opt_g = Adam::new(cfg.train.adam, &generator.params);
        let opt_d = Adam::new(cfg.train.adam, &discriminators.params);
        Ok(Self {
            cfg,
            palette,
            generator,
            discriminators,
            opt_g,
            opt_d,
            phi,
            rng,
            iteration: 0,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.put_json("kind", &"gan");
        c.put_json("config", &self.cfg);
        c.put_json("palette", &self.palette);
        c.put_json("iteration", &self.iteration);
        c.put_json("rng", &self.rng);
        c.put_store("g.param", &self.generator.params);
        c.put_store("g.buffer", &self.generator.buffers);
        c.put_store("d.param", &self.discriminators.params);
        c.put_store("d.buffer", &self.discriminators.buffers);
        self.opt_g.save(&mut c, "opt_g");
        self.opt_d.save(&mut c, "opt_d");
        self.phi.save(&mut c, "phi");
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let kind: String = c.json("kind")?;
        if kind != "gan" {
            return Err(Error::Checkpoint(format!("expected a GAN checkpoint, found {kind:?}")));
        }
        let cfg: GanConfig = c.json("config")?;
        let palette: Option<ClassPalette> = c.json("palette")?;
        let phi = FeatureExtractor::load(c, "phi")?;
        let mut s = Self::with_extractor(cfg, palette, phi)?;
        c.load_store("g.param", &mut s.generator.params)?;
        c.load_store("g.buffer", &mut s.generator.buffers)?;
        c.load_store("d.param", &mut s.discriminators.params)?;
        c.load_store("d.buffer", &mut s.discriminators.buffers)?;
        s.opt_g.load(c, "opt_g")?;
        s.opt_d.load(c, "opt_d")?;
        s.iteration = c.json("iteration")?;
        s.rng = c.json("rng")?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Generator, config and palette from a GAN checkpoint.
pub fn load_generator(path: &Path) -> Result<(GanConfig, Generator<f32>, Option<ClassPalette>)> {
    let c = Container::load(path)?;
    let kind: String = c.json("kind")?;
    if kind != "gan" {
        return Err(Error::Checkpoint(format!("expected a GAN checkpoint, found {kind:?}")));
    }
    let cfg: GanConfig = c.json("config")?;
    let palette: Option<ClassPalette> = c.json("palette")?;
    let mut g = Generator::build(cfg.generator.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    c.load_store("g.param", &mut g.params)?;
    c.load_store("g.buffer", &mut g.buffers)?;
    Ok((cfg, g, palette))
}

fn check_dataset(cfg: &GanConfig, data: &[PatchPair]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let r = cfg.generator.resolution;
    for (i, p) in data.iter().enumerate() {
        if p.size() != (r, r) {
            return Err(Error::Shape(format!(
                "training pair {i} is {:?}, model resolution is {r}",
                p.size()
            )));
        }
        if p.label.num_classes() > cfg.generator.num_classes {
            return Err(Error::Config(format!(
                "training pair {i} has {} classes, model has {}",
                p.label.num_classes(),
                cfg.generator.num_classes
            )));
        }
    }
    Ok(())
}

/// `[N, 3, H, W]` batch of normalised images.
pub fn image_batch(images: &[&ByteImage]) -> Tensor<f32> {
    let items: Vec<Tensor<f32>> = images
        .iter()
        .map(|im| {
            let t = normalize(im).to_chw::<f32>();
            let s = t.shape().to_vec();
            t.reshape(vec![1, s[0], s[1], s[2]])
        })
        .collect();
    Tensor::stack_batch(&items)
}

fn draw_latents(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![n, dim], |_| rng.sample::<f64, _>(StandardNormal) as f32)
}

/// Points inside [`train_step_observed`] at which the observer runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepPhase {
    DiscriminatorUpdated,
    GeneratorUpdated,
}

/// One adversarial update: power iteration, discriminator step on detached
/// fakes, generator step against the updated discriminators.
pub fn train_step(state: &mut GanState, data: &[PatchPair]) -> Result<LossRecord> {
    train_step_observed(state, data, |_, _| {})
}

/// [`train_step`] with a read-only look at the state after each update.
pub fn train_step_observed(
    state: &mut GanState,
    data: &[PatchPair],
    mut observe: impl FnMut(StepPhase, &GanState),
) -> Result<LossRecord> {
    let cfg = state.cfg.clone();
    let it = state.iteration;
    let lr = cfg.train.schedule.at(it);
    let k = cfg.generator.num_classes;
    let b = cfg.train.batch_size;

    let mut batch = Vec::with_capacity(b);
    for _ in 0..b {
        let idx = state.rng.random_range(0..data.len());
        let pair = if cfg.train.augment {
            apply_transform(&data[idx], Transform::random(&mut state.rng))?
        } else {
            data[idx].clone()
        };
        batch.push(pair);
    }
    let z = draw_latents(&mut state.rng, b, cfg.generator.latent_dim);
    let maps: Vec<&LabelMap> = batch.iter().map(|p| &p.label).collect();
    let onehot = one_hot_batch::<f32>(&maps, k)?;
    let real = image_batch(&batch.iter().map(|p| &p.image).collect::<Vec<_>>());

    state.generator.power_iterate();
    state.discriminators.power_iterate();

    // generator forward, kept for the generator update
    let tape_g = Tape::new();
    let pg = state.generator.params.bind(&tape_g, true);
    let labels = LabelPyramid::new(&tape_g, onehot.clone());
    let mut ctx = Ctx::new(Mode::Train);
    let fake = state.generator.forward(&pg, &labels, tape_g.constant(z), &mut ctx)?;
    state.generator.apply_stats(&ctx.stats);

    // discriminator update on detached fakes
    let d_loss = {
        let tape = Tape::new();
        let pd = state.discriminators.params.bind(&tape, true);
        let oh = tape.constant(onehot.clone());
        let real_in = disc_input(&tape, oh, tape.constant(real.clone()));
        let fake_in = disc_input(&tape, oh, tape.constant((*fake.value()).clone()));
        let rs = state.discriminators.scores(real_in, &pd)?;
        let fs = state.discriminators.scores(fake_in, &pd)?;
        let loss = multiscale_d_loss(&rs, &fs);
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                detail: format!("discriminator loss {value}"),
            });
        }
        let mut grads = tape.backward(loss);
        let grads = grads_for(&mut grads, &pd);
        state.opt_d.update(&mut state.discriminators.params, &grads, lr);
        value
    };
    observe(StepPhase::DiscriminatorUpdated, state);

    // generator update through the frozen, updated discriminators
    let pd = state.discriminators.params.bind(&tape_g, false);
    let fake_in = disc_input(&tape_g, labels.at(cfg.generator.resolution, cfg.generator.resolution), fake);
    let fs = state.discriminators.scores(fake_in, &pd)?;
    let g_gan = multiscale_g_loss(&fs);
    let pphi = state.phi.bind(&tape_g);
    let g_perc = state.phi.loss(fake, tape_g.constant(real), &pphi)?;
    let w = cfg.train.loss_weights;
    let total: Var<'_, f32> = g_gan.scale(w.gan as f32) + g_perc.scale(w.perceptual as f32);
    let (gv, pv) = (g_gan.item() as f64, g_perc.item() as f64);
    if !(gv.is_finite() && pv.is_finite()) {
        return Err(Error::NonFiniteLoss {
            iteration: it,
            detail: format!("generator losses gan={gv} perceptual={pv}"),
        });
    }
    let mut grads = tape_g.backward(total);
    let grads = grads_for(&mut grads, &pg);
    state.opt_g.update(&mut state.generator.params, &grads, lr);
    observe(StepPhase::GeneratorUpdated, state);

    state.iteration += 1;
    Ok(LossRecord {
        iteration: it,
        lr,
        d_loss,
        g_gan_loss: gv,
        g_perc_loss: pv,
    })
}

/// Run [`train_step`] until `state.iteration == until`, calling `on_step`
/// after every step.
pub fn train(
    state: &mut GanState,
    data: &[PatchPair],
    until: u64,
    mut on_step: impl FnMut(&GanState, &LossRecord) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    check_dataset(&state.cfg, data)?;
    let mut log = Vec::new();
    while state.iteration < until {
        let rec = train_step(state, data)?;
        on_step(state, &rec)?;
        log.push(rec);
    }
    Ok(log)
}

/// Fixed sample grid: the first four training label maps with four latents
/// drawn from a seed-derived stream, one column per sample. Rows are the
/// label colours, the real image and the synthesis.
pub fn sample_grid(state: &GanState, data: &[PatchPair]) -> Result<ByteImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(state.cfg.train.seed ^ 0x5eed_9a1d);
    let palette = match &state.palette {
        Some(p) => p.clone(),
        None => ClassPalette::generic(state.cfg.generator.num_classes)?,
    };
    let mut labels = Vec::new();
    let mut reals = Vec::new();
    let mut fakes = Vec::new();
    for i in 0..4 {
        let pair = &data[i % data.len()];
        let z = LatentVector::new((0..crate::data_model::LATENT_DIM).map(|_| rng.sample(StandardNormal)).collect())?;
        let m = pair.label.with_num_classes(state.cfg.generator.num_classes)?;
        fakes.push(denormalize(&state.generator.generate(&m, &z)?));
        reals.push(pair.image.clone());
        labels.push(colorize(&m, &palette));
    }
    let all: Vec<ByteImage> = labels.into_iter().chain(reals).chain(fakes).collect();
    ByteImage::grid(&all, 4)
}

/// Label map painted with palette colours.
pub fn colorize(m: &LabelMap, palette: &ClassPalette) -> ByteImage {
    let data = m
        .values()
        .iter()
        .flat_map(|&v| palette.classes().get(v as usize).map(|c| c.rgb).unwrap_or([0, 0, 0]))
        .collect();
    ByteImage::new(m.width(), m.height(), data).expect("dimensions from a valid map")
}

/// Files written by [`train_to_dir`].
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub records: Vec<LossRecord>,
}

pub fn write_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

/// Train to `state.cfg.train.iterations`, writing periodic checkpoints and
/// sample grids, `final.ckpt` and `loss_log.csv` under `out_dir`. When
/// resuming, rows of an existing log before the resume point are kept.
pub fn train_to_dir(state: &mut GanState, data: &[PatchPair], out_dir: &Path) -> Result<TrainArtifacts> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("loss_log.csv");
    let start = state.iteration;
    let mut records: Vec<LossRecord> = if start > 0 && log_path.exists() {
        read_loss_log(&log_path)?.into_iter().filter(|r| r.iteration < start).collect()
    } else {
        Vec::new()
    };
    let every = state.cfg.train.checkpoint_every;
    let until = state.cfg.train.iterations;
    let new = train(state, data, until, |s, rec| {
        let done = rec.iteration + 1;
        if every > 0 && done % every == 0 && done < until {
            s.save(&out_dir.join(format!("checkpoint_{done:07}.ckpt")))?;
            sample_grid(s, data)?.save_png(&out_dir.join(format!("sample_{done:07}.png")))?;
            log::info!("iteration {done}: d={:.4} g_gan={:.4} g_perc={:.4}", rec.d_loss, rec.g_gan_loss, rec.g_perc_loss);
        }
        Ok(())
    })?;
    records.extend(new);
    let final_checkpoint = out_dir.join("final.ckpt");
    state.save(&final_checkpoint)?;
    sample_grid(state, data)?.save_png(&out_dir.join(format!("sample_{:07}.png", state.iteration)))?;
    write_loss_log(&log_path, &records)?;
    Ok(TrainArtifacts {
        final_checkpoint,
        loss_log: log_path,
        records,
    })
}

/// Infer-mode synthesis of one image per `(map, latent)` pair.
pub fn synthesize_all(g: &Generator<f32>, maps: &[LabelMap], latents: &[LatentVector]) -> Result<Vec<NormImage>> {
    maps.iter().zip(latents).map(|(m, z)| g.generate(m, z)).collect()
}
