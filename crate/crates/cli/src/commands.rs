//! Subcommands of the `histosynth` binary.

use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use histosynth_core::concordance::{load_detections, load_ratings, stats_report, LoadedRatings};
use histosynth_core::data_model::{
    denormalize, ByteImage, ClassPalette, DatasetManifest, LabelMap, LatentVector, ManifestRecord, Split,
};
use histosynth_core::latent::{interpolation_latents, latent_stream, seed_latent};
use histosynth_core::seg_eval::{
    evaluate_maps, evaluate_model, majority_baseline, metrics_report, train_seg, SegConfig, SegModel,
};
use histosynth_core::stain_prep::{prepare_dataset, PatchPair, PrepOptions, ThresholdMethod};
use histosynth_core::toy::write_toy_dataset;
use histosynth_core::training::{load_generator, train_to_dir, GanConfig, GanState};

use crate::error::CliError;
use crate::service::{self, ServiceConfig};

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "histosynth", version, about = "Label-conditioned histology synthesis pipeline")]
pub struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tile paired images and label maps into a patch dataset.
    Prep(PrepArgs),
    /// Write a procedural three-class dataset.
    MakeToy(MakeToyArgs),
    /// Train the conditional GAN.
    Train(TrainArgs),
    /// Train a segmentation model.
    TrainSeg(TrainSegArgs),
    /// Per-class PA/IOU report for a segmentation model or saved predictions.
    EvalSeg(EvalSegArgs),
    /// Detection and agreement report from rating CSVs.
    Stats(StatsArgs),
    /// Generate images from label maps.
    Synth(SynthArgs),
    /// Frames along a straight line between two latents.
    Interpolate(InterpolateArgs),
    /// Run the HTTP synthesis service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    /// Directory with `images/`, `labels/` and `palette.json`.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    #[arg(long, default_value_t = 512)]
    pub stride: usize,
    /// Derive a nuclei class from the hematoxylin channel of 2-class data.
    #[arg(long)]
    pub add_nuclei: bool,
    /// `otsu` or a fixed hematoxylin concentration.
    #[arg(long, default_value = "otsu", value_parser = parse_threshold)]
    pub threshold: ThresholdMethod,
    /// Fraction of source images held out as the test split.
    #[arg(long, default_value_t = 0.0)]
    pub test_fraction: f64,
}

fn parse_threshold(s: &str) -> Result<ThresholdMethod, String> {
    if s.eq_ignore_ascii_case("otsu") {
        return Ok(ThresholdMethod::Otsu);
    }
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(ThresholdMethod::Fixed)
        .ok_or_else(|| format!("expected `otsu` or a number, got `{s}`"))
}

#[derive(Debug, Args)]
pub struct MakeToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub train: usize,
    #[arg(long, default_value_t = 100)]
    pub test: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Width {
    /// Published channel widths.
    Full,
    /// Narrow networks, 64×64 only.
    Toy,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Prepared dataset directory (manifest.jsonl + palette.json).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Write a checkpoint and sample grid every N iterations (0 = only at the end).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long, value_enum, default_value_t = Width::Full)]
    pub width: Width,
    #[arg(long)]
    pub no_augment: bool,
    /// Continue from a checkpoint; its stored seed and config are kept.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainSegArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `seg.ckpt` and `seg_loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub iterations: u64,
    #[arg(long, default_value_t = 256)]
    pub crop: usize,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    /// Feature count of the first level.
    #[arg(long, default_value_t = 64)]
    pub features: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalSegArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Segmentation checkpoint to evaluate.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub model: Option<PathBuf>,
    /// Directory of predicted label PNGs named like the dataset's label files.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Also report the majority-class baseline fitted on the train split.
    #[arg(long)]
    pub baseline: bool,
    /// Write the CSV report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// `item,rater,grade` CSV, optionally prefixed with `NAME=`. Repeatable.
    #[arg(long)]
    pub ratings: Vec<String>,
    /// `item,predicted,truth` CSV of real/synthesized calls.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A label PNG, or a directory of label PNGs.
    #[arg(long)]
    pub labels: PathBuf,
    /// Output PNG, or output dataset directory when `--labels` is a directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON array of 256 numbers used instead of the seeded latent.
    #[arg(long)]
    pub latent: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    /// Seed of the first latent (default: `--seed`).
    #[arg(long)]
    pub from_seed: Option<u64>,
    /// Seed of the second latent (default: `--seed` + 1).
    #[arg(long)]
    pub to_seed: Option<u64>,
    #[arg(long, conflicts_with = "from_seed")]
    pub from_latent: Option<PathBuf>,
    #[arg(long, conflicts_with = "to_seed")]
    pub to_latent: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "HISTOSYNTH_CHECKPOINT_DIR")]
    pub checkpoint_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Largest label map accepted, in pixels.
    #[arg(long, default_value_t = 512 * 512)]
    pub max_pixels: usize,
    #[arg(long, default_value_t = 64)]
    pub max_steps: usize,
}

pub fn run(cli: Cli) -> CliResult<String> {
    let seed = cli.seed;
    match cli.command {
        Command::Prep(a) => prep(&a, seed),
        Command::MakeToy(a) => make_toy(&a, seed),
        Command::Train(a) => train(&a, seed),
        Command::TrainSeg(a) => train_seg_cmd(&a, seed),
        Command::EvalSeg(a) => eval_seg(&a),
        Command::Stats(a) => stats(&a),
        Command::Synth(a) => synth(&a, seed),
        Command::Interpolate(a) => interpolate(&a, seed),
        Command::Serve(a) => {
            let cfg = ServiceConfig {
                bind: a.bind,
                checkpoint_dir: a.checkpoint_dir.clone(),
                max_pixels: a.max_pixels,
                max_steps: a.max_steps,
                default_seed: seed,
            };
            service::serve_blocking(cfg)?;
            Ok(String::new())
        }
    }
}

pub fn prep(a: &PrepArgs, seed: u64) -> CliResult<String> {
    let opts = PrepOptions {
        patch_size: a.size,
        stride: a.stride,
        add_nuclei: a.add_nuclei,
        threshold: a.threshold,
        test_fraction: a.test_fraction,
        seed,
    };
    let s = prepare_dataset(&a.input, &a.out, &opts)?;
    Ok(format!(
        "source pairs: {}\ntrain patches: {}\ntest patches: {}\nclasses: {}\n",
        s.source_pairs, s.train_patches, s.test_patches, s.num_classes
    ))
}

pub fn make_toy(a: &MakeToyArgs, seed: u64) -> CliResult<String> {
    let m = write_toy_dataset(&a.out, a.train, a.test, a.size, seed)?;
    Ok(format!("wrote {} pairs to {}\n", m.records.len(), a.out.display()))
}

/// Palette and the pairs of one split of a prepared dataset.
pub fn load_dataset(dir: &Path, split: Split) -> CliResult<(ClassPalette, Vec<PatchPair>)> {
    let palette = ClassPalette::load(&dir.join("palette.json"))?;
    let manifest = DatasetManifest::load(&dir.join("manifest.jsonl"))?;
    let pairs = manifest
        .load_pairs(split, palette.len())?
        .into_iter()
        .map(|(img, lab)| PatchPair::new(img, lab))
        .collect::<histosynth_core::Result<Vec<_>>>()?;
    Ok((palette, pairs))
}

pub fn train(a: &TrainArgs, seed: u64) -> CliResult<String> {
    let (palette, data) = load_dataset(&a.data, Split::Train)?;
    let mut state = match &a.resume {
        Some(path) => {
            let mut s = GanState::load(path)?;
            if s.cfg.train.seed != seed {
                log::info!("resuming with the checkpoint's seed {}", s.cfg.train.seed);
            }
            if let Some(n) = a.iterations {
                s.cfg.train.iterations = n;
            }
            if let Some(n) = a.checkpoint_every {
                s.cfg.train.checkpoint_every = n;
            }
            s
        }
        None => {
            let (w, h) = data
                .first()
                .map(|p| p.size())
                .ok_or_else(|| CliError::Usage("training split is empty".into()))?;
            if w != h {
                return Err(CliError::Usage(format!("patches must be square, got {w}x{h}")));
            }
            let mut cfg = match a.width {
                Width::Full => GanConfig::new(w, palette.len()),
                Width::Toy => {
                    let mut c = GanConfig::toy(palette.len());
                    c.generator.resolution = w;
                    c
                }
            };
            cfg.train.seed = seed;
            cfg.train.augment = !a.no_augment;
            if let Some(n) = a.iterations {
                cfg.train.iterations = n;
            }
            if let Some(n) = a.batch_size {
                cfg.train.batch_size = n;
            }
            if let Some(n) = a.checkpoint_every {
                cfg.train.checkpoint_every = n;
            }
            GanState::new(cfg, Some(palette))?
        }
    };
    let art = train_to_dir(&mut state, &data, &a.out)?;
    let mut out = format!(
        "trained to iteration {}\ncheckpoint: {}\nloss log: {}\n",
        state.iteration,
        art.final_checkpoint.display(),
        art.loss_log.display()
    );
    if let Some(r) = art.records.last() {
        let _ = writeln!(
            out,
            "last losses: d {:.4} g_gan {:.4} g_perc {:.4}",
            r.d_loss, r.g_gan_loss, r.g_perc_loss
        );
    }
    Ok(out)
}

pub fn train_seg_cmd(a: &TrainSegArgs, seed: u64) -> CliResult<String> {
    let (palette, data) = load_dataset(&a.data, Split::Train)?;
    let mut cfg = SegConfig::new(palette.len());
    cfg.iterations = a.iterations;
    cfg.crop_size = a.crop;
    cfg.batch_size = a.batch_size;
    cfg.base_features = a.features;
    cfg.seed = seed;
    let out = train_seg(cfg, &data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let ckpt = a.out.join("seg.ckpt");
    out.model.save(&ckpt)?;
    let mut log = String::from("iteration,lr,loss\n");
    for r in &out.losses {
        let _ = writeln!(log, "{},{},{}", r.iteration, r.lr, r.loss);
    }
    let log_path = a.out.join("seg_loss.csv");
    std::fs::write(&log_path, log).map_err(|e| CliError::io(&log_path, e))?;
    let mut msg = format!("segmentation model: {}\n", ckpt.display());
    for c in &out.absent_classes {
        let _ = writeln!(msg, "warning: class {c} absent from training labels");
    }
    Ok(msg)
}

pub fn eval_seg(a: &EvalSegArgs) -> CliResult<String> {
    let (palette, data) = load_dataset(&a.data, a.split.into())?;
    let k = palette.len();
    let metrics = match (&a.model, &a.predictions) {
        (Some(path), _) => {
            let model = SegModel::load(path)?;
            if model.num_classes() != k {
                return Err(CliError::Usage(format!(
                    "model predicts {} classes, dataset has {k}",
                    model.num_classes()
                )));
            }
            evaluate_model(&model, &data)?
        }
        (None, Some(dir)) => {
            let manifest = DatasetManifest::load(&a.data.join("manifest.jsonl"))?;
            let split: Split = a.split.into();
            let mut preds = Vec::new();
            for r in manifest.split(split) {
                let name = r
                    .label
                    .file_name()
                    .ok_or_else(|| CliError::Usage(format!("bad label path {}", r.label.display())))?;
                preds.push(LabelMap::load_png(&dir.join(name), k)?);
            }
            let truths: Vec<LabelMap> = data.iter().map(|p| p.label.clone()).collect();
            evaluate_maps(&preds, &truths, k)?
        }
        (None, None) => return Err(CliError::Usage("one of --model or --predictions is required".into())),
    };
    let mut report = metrics_report(&metrics, Some(&palette));
    if a.baseline {
        let (_, train) = load_dataset(&a.data, Split::Train)?;
        let train_maps: Vec<&LabelMap> = train.iter().map(|p| &p.label).collect();
        let truths: Vec<LabelMap> = data.iter().map(|p| p.label.clone()).collect();
        let b = majority_baseline(&train_maps, &truths, k)?;
        let _ = writeln!(report, "majority,,{},{},", b.mpa, b.miou);
    }
    if let Some(out) = &a.out {
        std::fs::write(out, &report).map_err(|e| CliError::io(out, e))?;
    }
    Ok(report)
}

pub fn stats(a: &StatsArgs) -> CliResult<String> {
    if a.ratings.is_empty() && a.detections.is_none() {
        return Err(CliError::Usage("nothing to report: pass --ratings and/or --detections".into()));
    }
    let mut loaded: Vec<(String, LoadedRatings)> = Vec::new();
    for spec in &a.ratings {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let n = p.file_stem().and_then(|s| s.to_str()).unwrap_or(spec).to_string();
                (n, p)
            }
        };
        loaded.push((name, load_ratings(&path)?));
    }
    let detections = a.detections.as_deref().map(load_detections).transpose()?;
    let named: Vec<(&str, &LoadedRatings)> = loaded.iter().map(|(n, r)| (n.as_str(), r)).collect();
    let report = stats_report(detections.as_deref(), &named);
    if let Some(out) = &a.out {
        std::fs::write(out, &report).map_err(|e| CliError::io(out, e))?;
    }
    Ok(report)
}

pub fn read_latent(path: &Path) -> CliResult<LatentVector> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let v: Vec<f64> = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: expected a JSON array of numbers: {e}", path.display())))?;
    Ok(LatentVector::new(v)?)
}

fn label_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path();
        if p.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) == Some(true) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// One label PNG → one image. A directory of label PNGs → a dataset whose
/// i-th latent is the i-th draw of the `--seed` stream.
pub fn synth(a: &SynthArgs, seed: u64) -> CliResult<String> {
    let (cfg, g, palette) = load_generator(&a.checkpoint)?;
    let k = cfg.generator.num_classes;
    if a.labels.is_dir() {
        if a.latent.is_some() {
            return Err(CliError::Usage("--latent applies to a single label map".into()));
        }
        let files = label_files(&a.labels)?;
        if files.is_empty() {
            return Err(CliError::Usage(format!("no label PNGs in {}", a.labels.display())));
        }
        for sub in ["images", "labels"] {
            let d = a.out.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
        }
        let latents = latent_stream(seed, files.len());
        let mut manifest = DatasetManifest::default();
        for (f, z) in files.iter().zip(&latents) {
            let m = LabelMap::load_png(f, k)?;
            let img = denormalize(&g.generate(&m, z)?);
            let name = f.file_name().expect("listed files have names");
            let ip = a.out.join("images").join(name);
            let lp = a.out.join("labels").join(name);
            img.save_png(&ip)?;
            m.save_png(&lp)?;
            manifest.records.push(ManifestRecord {
                image: ip,
                label: lp,
                split: Split::Train,
            });
        }
        palette.unwrap_or(ClassPalette::generic(k)?).save(&a.out.join("palette.json"))?;
        manifest.save(&a.out.join("manifest.jsonl"))?;
        return Ok(format!("synthesized {} pairs into {}\n", files.len(), a.out.display()));
    }
    let m = LabelMap::load_png(&a.labels, k)?;
    let z = match &a.latent {
        Some(p) => read_latent(p)?,
        None => seed_latent(seed),
    };
    let img = denormalize(&g.generate(&m, &z)?);
    img.save_png(&a.out)?;
    Ok(format!("wrote {}\n", a.out.display()))
}

pub fn interpolate(a: &InterpolateArgs, seed: u64) -> CliResult<String> {
    let (cfg, g, _) = load_generator(&a.checkpoint)?;
    let m = LabelMap::load_png(&a.labels, cfg.generator.num_classes)?;
    let z1 = match &a.from_latent {
        Some(p) => read_latent(p)?,
        None => seed_latent(a.from_seed.unwrap_or(seed)),
    };
    let z2 = match &a.to_latent {
        Some(p) => read_latent(p)?,
        None => seed_latent(a.to_seed.unwrap_or(seed.wrapping_add(1))),
    };
    let latents = interpolation_latents(&z1, &z2, a.steps)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let mut frames = Vec::with_capacity(latents.len());
    for (i, z) in latents.iter().enumerate() {
        let img = denormalize(&g.generate(&m, z)?);
        img.save_png(&a.out.join(format!("frame_{i:03}.png")))?;
        frames.push(img);
    }
    ByteImage::grid(&frames, frames.len())?.save_png(&a.out.join("contact_sheet.png"))?;
    Ok(format!("wrote {} frames to {}\n", frames.len(), a.out.display()))
}
