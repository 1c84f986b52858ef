//! Stain separation and patch preparation: optical density, colour
//! deconvolution, thresholding, 3×3 median cleanup, nuclei overlay, grid
//! patching and dihedral augmentation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{
    ByteImage, ClassPalette, DatasetManifest, LabelMap, ManifestRecord, Split,
};
use crate::error::{Error, Result};

/// Stain basis: rows are unit optical-density vectors (hematoxylin, eosin,
/// residual).
#[derive(Clone, Debug, PartialEq)]
pub struct StainMatrix {
    rows: [[f64; 3]; 3],
    /// `(Mᵀ)⁻¹`, cached.
    unmix: [[f64; 3]; 3],
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn unit(v: [f64; 3]) -> Result<[f64; 3]> {
    let n = norm3(v);
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::StainMatrix(format!("stain vector {v:?} has no direction")));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inverse3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let d = det3(m);
    if !d.is_finite() || d.abs() < 1e-12 {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, out) in row.iter_mut().enumerate() {
            // cofactor of (c, r)
            let (r0, r1) = ([1, 0, 0][c], [2, 2, 1][c]);
            let (c0, c1) = ([1, 0, 0][r], [2, 2, 1][r]);
            let minor = m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
            let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
            *out = sign * minor / d;
        }
    }
    Some(inv)
}

impl StainMatrix {
    /// Rows must already be unit length (±1e-6) and linearly independent.
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            let n = norm3(*r);
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::StainMatrix(format!("row {i} has norm {n}, expected 1")));
            }
        }
        let mut t = [[0.0; 3]; 3];
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                t[j][i] = v;
            }
        }
        let unmix = inverse3(&t).ok_or_else(|| Error::StainMatrix("matrix is singular".into()))?;
        Ok(Self { rows, unmix })
    }

    /// Basis from two stain vectors (normalised here); the third row is their
    /// normalised cross product.
    pub fn from_two_stains(first: [f64; 3], second: [f64; 3]) -> Result<Self> {
        let a = unit(first)?;
        let b = unit(second)?;
        let c = unit(cross(a, b)).map_err(|_| Error::StainMatrix("stain vectors are parallel".into()))?;
        Self::new([a, b, c])
    }

    /// Published H&E optical-density vectors.
    pub fn hematoxylin_eosin() -> Self {
        Self::from_two_stains([0.644211, 0.716556, 0.266844], [0.092789, 0.954111, 0.283111])
            .expect("standard basis is valid")
    }

    pub fn identity() -> Self {
        Self::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).expect("identity is valid")
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.rows
    }
}

/// Per-pixel optical densities, interleaved `H×W×3`.
#[derive(Clone, Debug, PartialEq)]
pub struct OdImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl OdImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!("OD image {width}x{height} needs {} values", width * height * 3)));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Range("optical densities must be finite and non-negative".into()));
        }
        Ok(Self { width, height, data })
    }
}

/// Stain concentrations, interleaved `H×W×3`; channel 0 is hematoxylin.
#[derive(Clone, Debug, PartialEq)]
pub struct Concentrations {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Concentrations {
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }
}

/// `OD = −log10(max(I, 1) / 255)` per channel.
pub fn rgb_to_od(img: &ByteImage) -> OdImage {
    let data = img
        .data()
        .iter()
        .map(|&i| -((i.max(1) as f64) / 255.0).log10())
        .map(|v| if v == 0.0 { 0.0 } else { v })
        .collect();
    OdImage {
        width: img.width(),
        height: img.height(),
        data,
    }
}

/// Solve `Mᵀc = od` for every pixel.
pub fn deconvolve(od: &OdImage, m: &StainMatrix) -> Concentrations {
    let u = &m.unmix;
    let mut data = Vec::with_capacity(od.data.len());
    for px in od.data.chunks(3) {
        for row in u {
            data.push(row[0] * px[0] + row[1] * px[1] + row[2] * px[2]);
        }
    }
    Concentrations {
        width: od.width,
        height: od.height,
        data,
    }
}

/// `od = Mᵀc`, the forward model of [`deconvolve`].
pub fn compose(c: &Concentrations, m: &StainMatrix) -> Vec<f64> {
    let r = &m.rows;
    let mut out = Vec::with_capacity(c.data.len());
    for px in c.data.chunks(3) {
        for j in 0..3 {
            out.push(px[0] * r[0][j] + px[1] * r[1][j] + px[2] * r[2][j]);
        }
    }
    out
}

/// Binary raster, one byte (0 or 1) per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Shape(format!("mask {width}x{height} with {} values", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Range("mask values must be 0 or 1".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum ThresholdMethod {
    #[default]
    Otsu,
    Fixed(f64),
}

/// Otsu threshold over a 256-bin histogram spanning `[min, max]`. Returns
/// the upper edge of the best lower class.
pub fn otsu_threshold(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::DegenerateHistogram("no values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Range("threshold input must be finite".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(Error::DegenerateHistogram(format!("constant channel ({lo})")));
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0);
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let d = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * d * d;
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    Ok(lo + (best_bin + 1) as f64 * width)
}

/// `mask = channel > t`.
pub fn threshold(channel: &[f64], width: usize, height: usize, method: ThresholdMethod) -> Result<Mask> {
    let t = match method {
        ThresholdMethod::Otsu => otsu_threshold(channel)?,
        ThresholdMethod::Fixed(t) => t,
    };
    Mask::new(width, height, channel.iter().map(|&v| (v > t) as u8).collect())
}

/// 3×3 median with edge replication. For a binary mask the median is 1
/// exactly when at least 5 of the 9 window pixels are 1.
pub fn median_filter3(mask: &Mask) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        mask.data[yc * w + xc]
    };
    let mut out = vec![0u8; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut ones = 0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    ones += at(x + dx, y + dy);
                }
            }
            out[y as usize * w + x as usize] = (ones >= 5) as u8;
        }
    }
    Mask {
        width: w,
        height: h,
        data: out,
    }
}

/// Hematoxylin mask: deconvolve, threshold channel 0, median-clean.
pub fn nuclei_mask(img: &ByteImage, stains: &StainMatrix, method: ThresholdMethod) -> Result<Mask> {
    let conc = deconvolve(&rgb_to_od(img), stains);
    let mask = threshold(&conc.channel(0), img.width(), img.height(), method)?;
    Ok(median_filter3(&mask))
}

/// Overlay a nuclei mask on a 2-class map as class 2.
pub fn overlay_nuclei(m2: &LabelMap, nuclei: &Mask) -> Result<LabelMap> {
    if m2.num_classes() != 2 {
        return Err(Error::Palette(format!(
            "nuclei overlay expects a 2-class map, got {} classes",
            m2.num_classes()
        )));
    }
    if (nuclei.width, nuclei.height) != (m2.width(), m2.height()) {
        return Err(Error::Alignment {
            image: (nuclei.width, nuclei.height),
            label: (m2.width(), m2.height()),
        });
    }
    let values = m2
        .values()
        .iter()
        .zip(&nuclei.data)
        .map(|(&v, &n)| if n == 1 { 2 } else { v })
        .collect();
    LabelMap::new(m2.width(), m2.height(), 3, values)
}

/// Add the nuclei class (index 2) to a 2-class map derived from its image.
pub fn derive_nuclei_class(
    img: &ByteImage,
    m2: &LabelMap,
    stains: &StainMatrix,
    method: ThresholdMethod,
) -> Result<LabelMap> {
    if (img.width(), img.height()) != (m2.width(), m2.height()) {
        return Err(Error::Alignment {
            image: (img.width(), img.height()),
            label: (m2.width(), m2.height()),
        });
    }
    overlay_nuclei(m2, &nuclei_mask(img, stains, method)?)
}

/// Display colour used for the derived nuclei class.
pub const NUCLEI_RGB: [u8; 3] = [52, 40, 140];

/// Image and label patch of identical size.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub image: ByteImage,
    pub label: LabelMap,
}

impl PatchPair {
    pub fn new(image: ByteImage, label: LabelMap) -> Result<Self> {
        if (image.width(), image.height()) != (label.width(), label.height()) {
            return Err(Error::Alignment {
                image: (image.width(), image.height()),
                label: (label.width(), label.height()),
            });
        }
        Ok(Self { image, label })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.width(), self.image.height())
    }
}

fn crop_raster<E: Copy>(data: &[E], width: usize, channels: usize, x0: usize, y0: usize, w: usize, h: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(w * h * channels);
    for y in y0..y0 + h {
        let start = (y * width + x0) * channels;
        out.extend_from_slice(&data[start..start + w * channels]);
    }
    out
}

/// Crop an aligned pair at `(x0, y0)` with the given size.
pub fn crop_pair(pair: &PatchPair, x0: usize, y0: usize, w: usize, h: usize) -> Result<PatchPair> {
    let (pw, ph) = pair.size();
    if x0 + w > pw || y0 + h > ph || w == 0 || h == 0 {
        return Err(Error::PatchTooLarge {
            size: w.max(h),
            width: pw,
            height: ph,
        });
    }
    let image = ByteImage::new(w, h, crop_raster(pair.image.data(), pw, 3, x0, y0, w, h))?;
    let label = LabelMap::new(
        w,
        h,
        pair.label.num_classes(),
        crop_raster(pair.label.values(), pw, 1, x0, y0, w, h),
    )?;
    Ok(PatchPair { image, label })
}

/// Grid-aligned square crops at offsets `0, stride, 2·stride, …` whose window
/// fits entirely. Row-major order.
pub fn extract_patches(pair: &PatchPair, size: usize, stride: usize) -> Result<Vec<PatchPair>> {
    let (w, h) = pair.size();
    if size == 0 || size > w.min(h) {
        return Err(Error::PatchTooLarge {
            size,
            width: w,
            height: h,
        });
    }
    if stride == 0 {
        return Err(Error::Config("patch stride must be >= 1".into()));
    }
    let mut out = Vec::new();
    for y in (0..=h - size).step_by(stride) {
        for x in (0..=w - size).step_by(stride) {
            out.push(crop_pair(pair, x, y, size, size)?);
        }
    }
    Ok(out)
}

/// Element of the dihedral group: `rot90` counter-clockwise quarter turns,
/// then an optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Transform {
    pub rot90: u8,
    pub flip: bool,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { rot90: 0, flip: false };

    pub fn all() -> [Transform; 8] {
        let mut out = [Self::IDENTITY; 8];
        for (i, t) in out.iter_mut().enumerate() {
            *t = Transform {
                rot90: (i % 4) as u8,
                flip: i >= 4,
            };
        }
        out
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Transform {
            rot90: rng.random_range(0..4u8),
            flip: rng.random_bool(0.5),
        }
    }
}

fn rot90_ccw<E: Copy>(data: &[E], n: usize, ch: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(data.len());
    for y in 0..n {
        for x in 0..n {
            let src = (x * n + (n - 1 - y)) * ch;
            out.extend_from_slice(&data[src..src + ch]);
        }
    }
    out
}

fn rot90_cw<E: Copy>(data: &[E], n: usize, ch: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(data.len());
    for y in 0..n {
        for x in 0..n {
            let src = ((n - 1 - x) * n + y) * ch;
            out.extend_from_slice(&data[src..src + ch]);
        }
    }
    out
}

fn rot180<E: Copy>(data: &[E], w: usize, h: usize, ch: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(data.len());
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let src = (y * w + x) * ch;
            out.extend_from_slice(&data[src..src + ch]);
        }
    }
    out
}

fn hflip<E: Copy>(data: &[E], w: usize, h: usize, ch: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(data.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let src = (y * w + x) * ch;
            out.extend_from_slice(&data[src..src + ch]);
        }
    }
    out
}

fn transform_raster<E: Copy>(data: &[E], w: usize, h: usize, ch: usize, t: Transform) -> Vec<E> {
    let rotated = match t.rot90 % 4 {
        0 => data.to_vec(),
        1 => rot90_ccw(data, w, ch),
        2 => rot180(data, w, h, ch),
        _ => rot90_cw(data, w, ch),
    };
    if t.flip {
        hflip(&rotated, w, h, ch)
    } else {
        rotated
    }
}

fn inverse_raster<E: Copy>(data: &[E], w: usize, h: usize, ch: usize, t: Transform) -> Vec<E> {
    let unflipped = if t.flip { hflip(data, w, h, ch) } else { data.to_vec() };
    match t.rot90 % 4 {
        0 => unflipped,
        1 => rot90_cw(&unflipped, w, ch),
        2 => rot180(&unflipped, w, h, ch),
        _ => rot90_ccw(&unflipped, w, ch),
    }
}

fn map_pair(
    pair: &PatchPair,
    t: Transform,
    f: fn(&[u8], usize, usize, usize, Transform) -> Vec<u8>,
) -> Result<PatchPair> {
    let (w, h) = pair.size();
    if t.rot90 % 2 == 1 && w != h {
        return Err(Error::Shape(format!("quarter-turn rotation needs a square patch, got {w}x{h}")));
    }
    let image = ByteImage::new(w, h, f(pair.image.data(), w, h, 3, t))?;
    let label = LabelMap::new(w, h, pair.label.num_classes(), f(pair.label.values(), w, h, 1, t))?;
    Ok(PatchPair { image, label })
}

/// Apply one dihedral transform to image and label together.
pub fn apply_transform(pair: &PatchPair, t: Transform) -> Result<PatchPair> {
    map_pair(pair, t, transform_raster::<u8>)
}

pub fn invert_transform(pair: &PatchPair, t: Transform) -> Result<PatchPair> {
    map_pair(pair, t, inverse_raster::<u8>)
}

/// Random rotation/reflection; returns the transform that was applied.
pub fn augment(pair: &PatchPair, rng: &mut impl Rng) -> Result<(PatchPair, Transform)> {
    let t = Transform::random(rng);
    Ok((apply_transform(pair, t)?, t))
}

/// Options for [`prepare_dataset`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrepOptions {
    pub patch_size: usize,
    pub stride: usize,
    pub add_nuclei: bool,
    pub threshold: ThresholdMethod,
    /// Fraction of source images whose patches go to the test split.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for PrepOptions {
    fn default() -> Self {
        Self {
            patch_size: 512,
            stride: 512,
            add_nuclei: false,
            threshold: ThresholdMethod::Otsu,
            test_fraction: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrepSummary {
    pub source_pairs: usize,
    pub train_patches: usize,
    pub test_patches: usize,
    pub num_classes: usize,
}

fn png_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) == Some(true) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Pair `images/*.png` with `labels/*.png` by file name.
pub fn find_pairs(in_dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let images = png_files(&in_dir.join("images"))?;
    let labels = png_files(&in_dir.join("labels"))?;
    let unpaired: Vec<&String> = images
        .keys()
        .filter(|k| !labels.contains_key(*k))
        .chain(labels.keys().filter(|k| !images.contains_key(*k)))
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::Config(format!(
            "unpaired files: {}",
            unpaired.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    if images.is_empty() {
        return Err(Error::EmptySet("no pairs found".into()));
    }
    Ok(images
        .into_iter()
        .map(|(name, img)| {
            let lab = labels[&name].clone();
            (img, lab)
        })
        .collect())
}

/// Full preparation: optional nuclei overlay on whole images, then grid
/// patches, written under `out_dir` with a palette and a manifest.
pub fn prepare_dataset(in_dir: &Path, out_dir: &Path, opts: &PrepOptions) -> Result<PrepSummary> {
    let pairs = find_pairs(in_dir)?;
    let mut palette = ClassPalette::load(&in_dir.join("palette.json"))?;
    if opts.add_nuclei {
        palette = palette.with_class("nuclei", NUCLEI_RGB)?;
    }
    let stains = StainMatrix::hematoxylin_eosin();
    for sub in ["images", "labels"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let n_test = ((pairs.len() as f64) * opts.test_fraction.clamp(0.0, 1.0)).round() as usize;
    let test_set: std::collections::HashSet<usize> = order[..n_test].iter().copied().collect();

    let mut manifest = DatasetManifest::default();
    let (mut train, mut test) = (0, 0);
    for (idx, (img_path, lab_path)) in pairs.iter().enumerate() {
        let image = ByteImage::load_png(img_path)?;
        let base_k = if opts.add_nuclei { 2 } else { palette.len() };
        let mut label = LabelMap::load_png(lab_path, base_k)?;
        if opts.add_nuclei {
            label = derive_nuclei_class(&image, &label, &stains, opts.threshold)?;
        }
        let pair = PatchPair::new(image, label)?;
        let stem = img_path.file_stem().and_then(|s| s.to_str()).unwrap_or("img");
        let split = if test_set.contains(&idx) { Split::Test } else { Split::Train };
        for (i, p) in extract_patches(&pair, opts.patch_size, opts.stride)?.into_iter().enumerate() {
            let name = format!("{stem}_{i:04}.png");
            let ip = out_dir.join("images").join(&name);
            let lp = out_dir.join("labels").join(&name);
            p.image.save_png(&ip)?;
            p.label.save_png(&lp)?;
            manifest.records.push(ManifestRecord {
                image: ip,
                label: lp,
                split,
            });
            match split {
                Split::Train => train += 1,
                Split::Test => test += 1,
            }
        }
    }
    palette.save(&out_dir.join("palette.json"))?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(PrepSummary {
        source_pairs: pairs.len(),
        train_patches: train,
        test_patches: test,
        num_classes: palette.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn od_endpoints() {
        let img = ByteImage::new(1, 1, vec![255, 0, 1]).unwrap();
        let od = rgb_to_od(&img);
        assert_eq!(od.data[0], 0.0);
        assert!((od.data[1] - 255f64.log10()).abs() < 1e-12);
        assert_eq!(od.data[1], od.data[2]);
    }

    #[test]
    fn od_strictly_decreasing() {
        let img = ByteImage::new(255, 1, (1..=255u8).flat_map(|b| [b, b, b]).collect()).unwrap();
        let od = rgb_to_od(&img);
        assert!(od.data.chunks(3).collect::<Vec<_>>().windows(2).all(|w| w[0][0] > w[1][0]));
    }

    #[test]
    fn standard_basis_rows_are_unit() {
        let m = StainMatrix::hematoxylin_eosin();
        for r in m.rows() {
            assert!((norm3(*r) - 1.0).abs() < 1e-12);
        }
        assert!(StainMatrix::new([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
        assert!(StainMatrix::new([[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn identity_basis_passes_od_through() {
        let od = OdImage::new(1, 1, vec![0.3, 0.2, 0.1]).unwrap();
        let c = deconvolve(&od, &StainMatrix::identity());
        assert_eq!(c.data, vec![0.3, 0.2, 0.1]);
        let zero = OdImage::new(1, 1, vec![0.0; 3]).unwrap();
        assert!(deconvolve(&zero, &StainMatrix::hematoxylin_eosin()).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fixed_threshold() {
        let m = threshold(&[0.2, 0.8], 2, 1, ThresholdMethod::Fixed(0.5)).unwrap();
        assert_eq!(m.data, vec![0, 1]);
        let none = threshold(&[0.1, 0.2], 2, 1, ThresholdMethod::Fixed(0.5)).unwrap();
        assert_eq!(none.count(), 0);
        assert!(matches!(
            threshold(&[0.3; 4], 2, 2, ThresholdMethod::Otsu),
            Err(Error::DegenerateHistogram(_))
        ));
    }

    #[test]
    fn median_removes_isolated_pixel() {
        let mut m = Mask::zeros(5, 5);
        m.data[12] = 1;
        assert_eq!(median_filter3(&m).count(), 0);
        let ones = Mask::new(3, 3, vec![1; 9]).unwrap();
        assert_eq!(median_filter3(&ones), ones);
    }

    #[test]
    fn patch_counts() {
        let pair = PatchPair::new(
            ByteImage::new(8, 8, vec![0; 192]).unwrap(),
            LabelMap::filled(8, 8, 2, 0).unwrap(),
        )
        .unwrap();
        assert_eq!(extract_patches(&pair, 4, 4).unwrap().len(), 4);
        assert_eq!(extract_patches(&pair, 4, 2).unwrap().len(), 9);
        assert_eq!(extract_patches(&pair, 8, 3).unwrap(), vec![pair.clone()]);
        assert!(matches!(extract_patches(&pair, 9, 1), Err(Error::PatchTooLarge { .. })));
    }

    #[test]
    fn transforms_are_invertible_and_distinct() {
        let vals: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
        let img: Vec<u8> = (0..48).map(|i| i as u8).collect();
        let pair = PatchPair::new(ByteImage::new(4, 4, img).unwrap(), LabelMap::new(4, 4, 3, vals).unwrap()).unwrap();
        let mut seen = std::collections::HashSet::new();
        for t in Transform::all() {
            let out = apply_transform(&pair, t).unwrap();
            seen.insert(out.image.data().to_vec());
            assert_eq!(invert_transform(&out, t).unwrap(), pair);
        }
        assert_eq!(seen.len(), 8);
        assert_eq!(apply_transform(&pair, Transform::IDENTITY).unwrap(), pair);
    }

    #[test]
    fn quarter_turn_needs_square() {
        let pair = PatchPair::new(ByteImage::new(2, 1, vec![0; 6]).unwrap(), LabelMap::filled(2, 1, 2, 1).unwrap()).unwrap();
        assert!(apply_transform(&pair, Transform { rot90: 1, flip: false }).is_err());
        assert!(apply_transform(&pair, Transform { rot90: 2, flip: true }).is_ok());
    }

    #[test]
    fn rotation_moves_corner_counter_clockwise() {
        // top-right corner ends up top-left after a quarter turn
        let mut vals = vec![0u8; 9];
        vals[2] = 1;
        let pair = PatchPair::new(ByteImage::new(3, 3, vec![0; 27]).unwrap(), LabelMap::new(3, 3, 2, vals).unwrap()).unwrap();
        let out = apply_transform(&pair, Transform { rot90: 1, flip: false }).unwrap();
        assert_eq!(out.label.get(0, 0), 1);
    }
}
