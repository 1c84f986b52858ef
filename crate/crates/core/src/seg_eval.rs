//! Segmentation quality harness: a residual U-Net, its training loop and
//! per-class pixel accuracy / IOU metrics.

use std::path::Path;
use std::rc::Rc;

use histosynth_autograd::{Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{ByteImage, ClassPalette, LabelMap};
use crate::error::{Error, Result};
use crate::networks::{Bound, Conv, ConvSpec, Store};
use crate::stain_prep::{crop_pair, PatchPair};
use crate::training::{gan::image_batch, Adam, AdamConfig, Container, LrSchedule};

pub const LEVELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    pub num_classes: usize,
    /// Feature count of the first level; doubles per level.
    pub base_features: usize,
    pub crop_size: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub iterations: u64,
    pub seed: u64,
}

impl SegConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            base_features: 64,
            crop_size: 256,
            batch_size: 10,
            schedule: LrSchedule::SEG,
            adam: AdamConfig::SEG,
            iterations: 2000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.crop_size % (1 << LEVELS) != 0 {
            return Err(Error::Config(format!("crop size {} must be a positive multiple of 8", self.crop_size)));
        }
        if !(2..=256).contains(&self.num_classes) {
            return Err(Error::Config(format!("class count {} outside 2..=256", self.num_classes)));
        }
        if self.base_features == 0 || self.batch_size == 0 {
            return Err(Error::Config("feature count and batch size must be positive".into()));
        }
        Ok(())
    }

    /// Feature counts of the down levels followed by the bridge.
    pub fn level_features(&self) -> Vec<usize> {
        (0..=LEVELS).map(|i| self.base_features << i).collect()
    }
}

#[derive(Clone, Debug)]
struct Residual {
    a: Conv,
    b: Conv,
}

impl Residual {
    fn new(params: &mut Store<f32>, bufs: &mut Store<f32>, name: &str, c: usize, rng: &mut impl Rng) -> Self {
        let na = format!("{name}.res_a");
        let nb = format!("{name}.res_b");
        Self {
            a: Conv::new(params, bufs, ConvSpec::same(&na, c, c, 3, false), rng),
            b: Conv::new(params, bufs, ConvSpec::same(&nb, c, c, 3, false), rng),
        }
    }

    fn forward<'t>(&self, x: Var<'t, f32>, p: &Bound<'t, f32>, bufs: &Store<f32>) -> Var<'t, f32> {
        let h = self.a.forward(x, p, bufs).relu();
        (x + self.b.forward(h, p, bufs)).relu()
    }
}

#[derive(Clone, Debug)]
struct Level {
    conv: Conv,
    res: Residual,
}

impl Level {
    fn new(params: &mut Store<f32>, bufs: &mut Store<f32>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let n = format!("{name}.conv");
        Self {
            conv: Conv::new(params, bufs, ConvSpec::same(&n, cin, cout, 3, false), rng),
            res: Residual::new(params, bufs, name, cout, rng),
        }
    }

    fn forward<'t>(&self, x: Var<'t, f32>, p: &Bound<'t, f32>, bufs: &Store<f32>) -> Var<'t, f32> {
        self.res.forward(self.conv.forward(x, p, bufs).relu(), p, bufs)
    }
}

/// Residual U-Net: three down levels (conv, residual block, max pool), a
/// bridge, three up levels (bilinear ×2, skip concat, conv, residual block)
/// and a 1×1 head producing one logit map per class.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub cfg: SegConfig,
    pub params: Store<f32>,
    bufs: Store<f32>,
    down: Vec<Level>,
    bridge: Level,
    up: Vec<Level>,
    head: Conv,
}

impl SegModel {
    pub fn build(cfg: SegConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.level_features();
        let mut params = Store::new();
        let mut bufs = Store::new();
        let mut down = Vec::new();
        let mut cin = 3;
        for (i, &fi) in f[..LEVELS].iter().enumerate() {
            down.push(Level::new(&mut params, &mut bufs, &format!("down{i}"), cin, fi, rng));
            cin = fi;
        }
        let bridge = Level::new(&mut params, &mut bufs, "bridge", cin, f[LEVELS], rng);
        let mut up = Vec::new();
        let mut c = f[LEVELS];
        for i in (0..LEVELS).rev() {
            up.push(Level::new(&mut params, &mut bufs, &format!("up{i}"), c + f[i], f[i], rng));
            c = f[i];
        }
        let head = Conv::new(
            &mut params,
            &mut bufs,
            ConvSpec::same("head", f[0], cfg.num_classes, 1, false),
            rng,
        );
        Ok(Self {
            cfg,
            params,
            bufs,
            down,
            bridge,
            up,
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    /// Logits `[N, K, H, W]` for `[N, 3, H, W]` input; `H` and `W` must be
    /// multiples of 8.
    pub fn forward<'t>(&self, x: Var<'t, f32>, p: &Bound<'t, f32>) -> Result<Var<'t, f32>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] % 8 != 0 || s[3] % 8 != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::Shape(format!(
                "segmentation input {s:?} must be [N, 3, H, W] with H, W multiples of 8"
            )));
        }
        let tape = x.tape();
        let mut skips = Vec::new();
        let mut h = x;
        for level in &self.down {
            h = level.forward(h, p, &self.bufs);
            skips.push(h);
            h = h.max_pool2();
        }
        h = self.bridge.forward(h, p, &self.bufs);
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let u = h.upsample_bilinear2x();
            h = level.forward(tape.concat_channels(&[u, skip]), p, &self.bufs);
        }
        Ok(self.head.forward(h, p, &self.bufs))
    }

    /// Logits for a batch of images without gradient tracking.
    pub fn logits(&self, images: &[&ByteImage]) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.forward(tape.constant(image_batch(images)), &p)?;
        Ok((*out.value()).clone())
    }

    /// Per-pixel argmax label map.
    pub fn predict(&self, img: &ByteImage) -> Result<LabelMap> {
        argmax_labels(&self.logits(&[img])?, 0)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.put_json("kind", &"seg");
        c.put_json("config", &self.cfg);
        c.put_store("seg.param", &self.params);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let kind: String = c.json("kind")?;
        if kind != "seg" {
            return Err(Error::Checkpoint(format!("expected a segmentation checkpoint, found {kind:?}")));
        }
        let cfg: SegConfig = c.json("config")?;
        let mut m = Self::build(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        c.load_store("seg.param", &mut m.params)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Argmax over channels of batch item `n` of `[N, K, H, W]` logits. Ties go
/// to the lowest class index.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>, n: usize) -> Result<LabelMap> {
    let (bn, k, h, w) = logits.dims4();
    if n >= bn || k > 256 {
        return Err(Error::Shape(format!("cannot take item {n} of logits {:?}", logits.shape())));
    }
    let d = logits.data();
    let plane = h * w;
    let base = n * k * plane;
    let values = (0..plane)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[base + c * plane + i] > d[base + best * plane + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(w, h, k.max(2), values)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegLossRecord {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct SegTraining {
    pub model: SegModel,
    pub losses: Vec<SegLossRecord>,
    /// Classes that never occur in the training labels.
    pub absent_classes: Vec<usize>,
}

/// Softmax cross-entropy training on random crops drawn with replacement.
pub fn train_seg(cfg: SegConfig, data: &[PatchPair]) -> Result<SegTraining> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("segmentation training set is empty".into()));
    }
    let crop = cfg.crop_size;
    let mut counts = vec![0usize; cfg.num_classes];
    for (i, p) in data.iter().enumerate() {
        let (w, h) = p.size();
        if w < crop || h < crop {
            return Err(Error::PatchTooLarge {
                size: crop,
                width: w,
                height: h,
            });
        }
        if p.label.num_classes() > cfg.num_classes {
            return Err(Error::Config(format!(
                "training pair {i} has {} classes, model has {}",
                p.label.num_classes(),
                cfg.num_classes
            )));
        }
        for (c, n) in counts.iter_mut().zip(p.label.histogram()) {
            *c += n;
        }
    }
    let absent_classes: Vec<usize> = (0..cfg.num_classes).filter(|&c| counts[c] == 0).collect();
    for &c in &absent_classes {
        log::warn!("class {c} does not occur in the segmentation training labels");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = SegModel::build(cfg.clone(), &mut rng)?;
    let mut opt = Adam::new(cfg.adam, &model.params);
    let mut losses = Vec::new();
    for it in 0..cfg.iterations {
        let mut crops = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let p = &data[rng.random_range(0..data.len())];
            let (w, h) = p.size();
            let x0 = rng.random_range(0..=w - crop);
            let y0 = rng.random_range(0..=h - crop);
            crops.push(crop_pair(p, x0, y0, crop, crop)?);
        }
        let targets: Rc<[u8]> = crops.iter().flat_map(|c| c.label.values().iter().copied()).collect();
        let images = image_batch(&crops.iter().map(|c| &c.image).collect::<Vec<_>>());
        let lr = cfg.schedule.at(it);
        let tape = Tape::new();
        let p = model.params.bind(&tape, true);
        let loss = model.forward(tape.constant(images), &p)?.softmax_cross_entropy(targets);
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                detail: format!("segmentation loss {value}"),
            });
        }
        let mut grads = tape.backward(loss);
        let g: Vec<_> = p.vars().iter().map(|&v| grads.take(v)).collect();
        opt.update(&mut model.params, &g, lr);
        losses.push(SegLossRecord {
            iteration: it,
            lr,
            loss: value,
        });
    }
    Ok(SegTraining {
        model,
        losses,
        absent_classes,
    })
}

/// One-vs-rest pixel counts for a single class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    /// Class neither predicted nor present.
    pub fn is_absent(&self) -> bool {
        self.true_pos + self.false_pos + self.false_neg == 0
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.true_neg += other.true_neg;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
    }
}

fn check_pair(pred: &LabelMap, truth: &LabelMap) -> Result<()> {
    if (pred.width(), pred.height()) != (truth.width(), truth.height()) {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, truth is {}x{}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    Ok(())
}

pub fn confusion(pred: &LabelMap, truth: &LabelMap, class: u8) -> Result<ConfusionCounts> {
    check_pair(pred, truth)?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.values().iter().zip(truth.values()) {
        match (p == class, t == class) {
            (true, true) => c.true_pos += 1,
            (false, false) => c.true_neg += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
        }
    }
    Ok(c)
}

/// Counts for every class `0..k` in one pass.
pub fn confusion_all(pred: &LabelMap, truth: &LabelMap, k: usize) -> Result<Vec<ConfusionCounts>> {
    check_pair(pred, truth)?;
    let mut hits = vec![0u64; k];
    let mut pred_n = vec![0u64; k];
    let mut truth_n = vec![0u64; k];
    for (i, (&p, &t)) in pred.values().iter().zip(truth.values()).enumerate() {
        if p as usize >= k || t as usize >= k {
            return Err(Error::InvalidLabel {
                value: p.max(t),
                x: i % pred.width(),
                y: i / pred.width(),
                classes: k,
            });
        }
        let (p, t) = (p as usize, t as usize);
        pred_n[p] += 1;
        truth_n[t] += 1;
        if p == t {
            hits[p] += 1;
        }
    }
    let total = pred.values().len() as u64;
    Ok((0..k)
        .map(|c| {
            let tp = hits[c];
            let fp = pred_n[c] - tp;
            let fneg = truth_n[c] - tp;
            ConfusionCounts {
                true_pos: tp,
                true_neg: total - tp - fp - fneg,
                false_pos: fp,
                false_neg: fneg,
            }
        })
        .collect())
}

/// `(TP + TN) / (TP + TN + FP + FN)`.
pub fn pixel_accuracy(c: &ConfusionCounts) -> Result<f64> {
    let total = c.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("pixel accuracy over zero pixels".into()));
    }
    Ok((c.true_pos + c.true_neg) as f64 / total as f64)
}

/// `TP / (TP + FP + FN)`, or `None` when the class is absent.
pub fn iou(c: &ConfusionCounts) -> Option<f64> {
    let denom = c.true_pos + c.false_pos + c.false_neg;
    (denom > 0).then(|| c.true_pos as f64 / denom as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub counts: ConfusionCounts,
    pub pa: f64,
    /// `None` for absent classes.
    pub iou: Option<f64>,
}

impl ClassMetrics {
    pub fn from_counts(class: usize, counts: ConfusionCounts) -> Result<Self> {
        Ok(Self {
            class,
            counts,
            pa: pixel_accuracy(&counts)?,
            iou: iou(&counts),
        })
    }

    pub fn absent(&self) -> bool {
        self.iou.is_none()
    }
}

/// Unweighted `(mPA, mIOU)` over non-absent classes.
pub fn mean_metrics(per_class: &[ClassMetrics]) -> Result<(f64, f64)> {
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| !m.absent()).collect();
    if present.is_empty() {
        return Err(Error::UndefinedMetric("every class is absent".into()));
    }
    let n = present.len() as f64;
    let mpa = present.iter().map(|m| m.pa).sum::<f64>() / n;
    let miou = present.iter().filter_map(|m| m.iou).sum::<f64>() / n;
    Ok((mpa, miou))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub per_class: Vec<ClassMetrics>,
    pub mpa: f64,
    pub miou: f64,
}

impl SegMetrics {
    pub fn from_counts(counts: &[ConfusionCounts]) -> Result<Self> {
        let per_class = counts
            .iter()
            .enumerate()
            .map(|(c, &n)| ClassMetrics::from_counts(c, n))
            .collect::<Result<Vec<_>>>()?;
        let (mpa, miou) = mean_metrics(&per_class)?;
        Ok(Self { per_class, mpa, miou })
    }
}

/// Metrics from counts pooled over every pixel of every pair.
pub fn evaluate_maps(preds: &[LabelMap], truths: &[LabelMap], k: usize) -> Result<SegMetrics> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!("{} predictions for {} truths", preds.len(), truths.len())));
    }
    if preds.is_empty() {
        return Err(Error::EmptySet("no maps to evaluate".into()));
    }
    let mut acc = vec![ConfusionCounts::default(); k];
    for (p, t) in preds.iter().zip(truths) {
        for (a, c) in acc.iter_mut().zip(confusion_all(p, t, k)?) {
            a.merge(&c);
        }
    }
    SegMetrics::from_counts(&acc)
}

/// Predict every image and score against its label.
pub fn evaluate_model(model: &SegModel, data: &[PatchPair]) -> Result<SegMetrics> {
    let preds = data.iter().map(|p| model.predict(&p.image)).collect::<Result<Vec<_>>>()?;
    let truths: Vec<LabelMap> = data.iter().map(|p| p.label.clone()).collect();
    evaluate_maps(&preds, &truths, model.num_classes())
}

/// Most frequent class over the given maps (lowest index on ties).
pub fn majority_class(maps: &[&LabelMap], k: usize) -> Result<u8> {
    let mut counts = vec![0usize; k];
    for m in maps {
        for &v in m.values() {
            let slot = counts.get_mut(v as usize).ok_or_else(|| Error::Config(format!("label {v} exceeds {k} classes")))?;
            *slot += 1;
        }
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::EmptySet("no label pixels".into()));
    }
    let mut best = 0;
    for c in 1..k {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    Ok(best as u8)
}

/// Constant prediction of the training majority class.
pub fn majority_baseline(train: &[&LabelMap], test: &[LabelMap], k: usize) -> Result<SegMetrics> {
    let c = majority_class(train, k)?;
    let preds = test
        .iter()
        .map(|t| LabelMap::filled(t.width(), t.height(), k, c))
        .collect::<Result<Vec<_>>>()?;
    evaluate_maps(&preds, test, k)
}

/// CSV report: one row per class (`class,name,pa,iou,absent`) and a final
/// `mean` row carrying mPA and mIOU. Absent classes have an empty IOU.
pub fn metrics_report(m: &SegMetrics, palette: Option<&ClassPalette>) -> String {
    let mut out = String::from("class,name,pa,iou,absent\n");
    for c in &m.per_class {
        let name = palette
            .and_then(|p| p.classes().get(c.class))
            .map(|i| i.name.clone())
            .unwrap_or_else(|| format!("class_{}", c.class));
        let iou = c.iou.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!("{},{},{:.6},{},{}\n", c.class, name, c.pa, iou, c.absent()));
    }
    out.push_str(&format!("mean,,{:.6},{:.6},\n", m.mpa, m.miou));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(w: usize, v: &[u8], k: usize) -> LabelMap {
        LabelMap::new(w, v.len() / w, k, v.to_vec()).unwrap()
    }

    #[test]
    fn hand_enumerated_confusion() {
        let truth = map(2, &[1, 0], 2);
        let pred = map(2, &[0, 1], 2);
        let c = confusion(&pred, &truth, 1).unwrap();
        assert_eq!((c.true_pos, c.true_neg, c.false_pos, c.false_neg), (0, 0, 1, 1));
        assert!(confusion(&map(1, &[0], 2), &truth, 0).is_err());
    }

    #[test]
    fn reference_values() {
        let c = |tp, tn, fp, fneg| ConfusionCounts {
            true_pos: tp,
            true_neg: tn,
            false_pos: fp,
            false_neg: fneg,
        };
        assert_eq!(pixel_accuracy(&c(5, 5, 0, 0)).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&c(2, 3, 4, 1)).unwrap(), 0.5);
        assert_eq!(pixel_accuracy(&c(0, 0, 7, 3)).unwrap(), 0.0);
        assert!(matches!(pixel_accuracy(&c(0, 0, 0, 0)), Err(Error::UndefinedMetric(_))));
        assert_eq!(iou(&c(1, 0, 1, 2)), Some(0.25));
        assert_eq!(iou(&c(3, 9, 0, 0)), Some(1.0));
        assert_eq!(iou(&c(0, 9, 1, 0)), Some(0.0));
        assert_eq!(iou(&c(0, 9, 0, 0)), None);
    }

    #[test]
    fn means_skip_absent_classes() {
        let m = |class, pa, iou| ClassMetrics {
            class,
            counts: ConfusionCounts::default(),
            pa,
            iou,
        };
        let (mpa, _) = mean_metrics(&[m(0, 1.0, Some(1.0)), m(1, 0.8, Some(0.5))]).unwrap();
        assert!((mpa - 0.9).abs() < 1e-15);
        assert_eq!(mean_metrics(&[m(0, 0.7, Some(0.3)), m(1, 1.0, None)]).unwrap(), (0.7, 0.3));
        assert!(mean_metrics(&[m(0, 1.0, None)]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::<f32>::new(vec![1, 3, 1, 2], vec![1.0, 0.0, 1.0, 5.0, 0.5, 5.0]);
        assert_eq!(argmax_labels(&t, 0).unwrap().values(), &[0, 1]);
    }

    #[test]
    fn config_rejects_bad_crop() {
        let mut cfg = SegConfig::new(3);
        cfg.crop_size = 100;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert_eq!(SegConfig::new(4).level_features(), vec![64, 128, 256, 512]);
    }
}
