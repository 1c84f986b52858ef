//! Value types shared by every stage: class palettes, indexed label maps,
//! RGB images in byte and normalised form, latent codes and dataset
//! manifests, plus their on-disk formats.

use std::collections::HashSet;
use std::io::{BufRead, Cursor, Write};
use std::path::{Path, PathBuf};

use histosynth_autograd::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One class of a [`ClassPalette`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub index: u8,
    pub name: String,
    pub rgb: [u8; 3],
}

/// Ordered class metadata. Indices are exactly `0..K` and `K >= 2`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PaletteDoc", into = "PaletteDoc")]
pub struct ClassPalette {
    classes: Vec<ClassInfo>,
}

#[derive(Serialize, Deserialize)]
struct PaletteDoc {
    classes: Vec<ClassInfo>,
}

impl TryFrom<PaletteDoc> for ClassPalette {
    type Error = Error;
    fn try_from(doc: PaletteDoc) -> Result<Self> {
        ClassPalette::new(doc.classes)
    }
}

impl From<ClassPalette> for PaletteDoc {
    fn from(p: ClassPalette) -> Self {
        PaletteDoc { classes: p.classes }
    }
}

impl ClassPalette {
    pub fn new(mut classes: Vec<ClassInfo>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Palette(format!("need at least 2 classes, got {}", classes.len())));
        }
        if classes.len() > 256 {
            return Err(Error::Palette(format!("at most 256 classes, got {}", classes.len())));
        }
        classes.sort_by_key(|c| c.index);
        for (i, c) in classes.iter().enumerate() {
            if c.index as usize != i {
                return Err(Error::Palette(format!(
                    "class indices must be 0..{} without gaps, found {} at position {i}",
                    classes.len(),
                    c.index
                )));
            }
        }
        let mut names = HashSet::new();
        for c in &classes {
            if !names.insert(c.name.as_str()) {
                return Err(Error::Palette(format!("duplicate class name {:?}", c.name)));
            }
        }
        Ok(Self { classes })
    }

    /// Palette with generated names and evenly spread grey-ish colours.
    pub fn generic(k: usize) -> Result<Self> {
        Self::new(
            (0..k)
                .map(|i| {
                    let v = if k > 1 { (i * 255 / (k - 1)) as u8 } else { 0 };
                    ClassInfo {
                        index: i as u8,
                        name: format!("class{i}"),
                        rgb: [v, 255 - v, v / 2],
                    }
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    /// Palette with one more class appended at index `K`.
    pub fn with_class(&self, name: &str, rgb: [u8; 3]) -> Result<Self> {
        let mut classes = self.classes.clone();
        classes.push(ClassInfo {
            index: self.classes.len() as u8,
            name: name.to_string(),
            rgb,
        });
        Self::new(classes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Palette(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("palette serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Indexed semantic map: one class index per pixel, every value `< K`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    num_classes: usize,
    values: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, num_classes: usize, values: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("label map must be at least 1x1, got {width}x{height}")));
        }
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "label map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if !(2..=256).contains(&num_classes) {
            return Err(Error::Palette(format!("class count {num_classes} outside 2..=256")));
        }
        validate_labels(width, &values, num_classes)?;
        Ok(Self {
            width,
            height,
            num_classes,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, num_classes: usize, class: u8) -> Result<Self> {
        Self::new(width, height, num_classes, vec![class; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    /// Same values under a larger class count.
    pub fn with_num_classes(&self, num_classes: usize) -> Result<Self> {
        Self::new(self.width, self.height, num_classes, self.values.clone())
    }

    /// Pixel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &v in &self.values {
            h[v as usize] += 1;
        }
        h
    }

    pub fn from_png_bytes(bytes: &[u8], num_classes: usize) -> Result<Self> {
        let (w, h, values) = decode_indexed_png(bytes)?;
        Self::new(w, h, num_classes, values)
    }

    pub fn load_png(path: &Path, num_classes: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes, num_classes).map_err(|e| with_path(e, path))
    }

    /// 8-bit single-channel PNG, pixel value = class index.
    pub fn to_png_bytes(&self) -> Vec<u8> {
        encode_png(self.width, self.height, png::ColorType::Grayscale, &self.values)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Reject the first value `>= num_classes`.
pub fn validate_labels(width: usize, values: &[u8], num_classes: usize) -> Result<()> {
    if let Some((i, &v)) = values.iter().enumerate().find(|(_, &v)| v as usize >= num_classes) {
        return Err(Error::InvalidLabel {
            value: v,
            x: i % width.max(1),
            y: i / width.max(1),
            classes: num_classes,
        });
    }
    Ok(())
}

/// 8-bit RGB image, interleaved `H×W×3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ByteImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "RGB image {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let (w, h, data) = decode_rgb_png(bytes)?;
        Self::new(w, h, data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes).map_err(|e| with_path(e, path))
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        encode_png(self.width, self.height, png::ColorType::Rgb, &self.data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Tile equally sized images into a `rows × cols` grid (row-major).
    pub fn grid(images: &[ByteImage], cols: usize) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::EmptySet("no images to tile".into()))?;
        let (w, h) = (first.width, first.height);
        if images.iter().any(|im| im.width != w || im.height != h) {
            return Err(Error::Shape("grid images differ in size".into()));
        }
        let cols = cols.max(1).min(images.len());
        let rows = images.len().div_ceil(cols);
        let (gw, gh) = (w * cols, h * rows);
        let mut data = vec![255u8; gw * gh * 3];
        for (i, im) in images.iter().enumerate() {
            let (ox, oy) = ((i % cols) * w, (i / cols) * h);
            for y in 0..h {
                let dst = ((oy + y) * gw + ox) * 3;
                data[dst..dst + w * 3].copy_from_slice(&im.data[y * w * 3..(y + 1) * w * 3]);
            }
        }
        Self::new(gw, gh, data)
    }
}

/// RGB image with real values in `[-1, 1]`, interleaved `H×W×3`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl NormImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "normalized image {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("normalized image value {v} outside [-1, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `[3, H, W]` tensor.
    pub fn to_chw<T: Real>(&self) -> Tensor<T> {
        let hw = self.width * self.height;
        Tensor::from_fn(vec![3, self.height, self.width], |i| {
            let (c, p) = (i / hw, i % hw);
            T::lit(self.data[p * 3 + c] as f64)
        })
    }

    /// Image `n` of an `[N, 3, H, W]` tensor; values are clamped into `[-1, 1]`.
    pub fn from_batch<T: Real>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let (nb, c, h, w) = t.dims4();
        if c != 3 || n >= nb {
            return Err(Error::Shape(format!("cannot take image {n} from tensor {:?}", t.shape())));
        }
        let hw = h * w;
        let base = n * 3 * hw;
        let mut data = vec![0.0f32; hw * 3];
        for ch in 0..3 {
            for p in 0..hw {
                data[p * 3 + ch] = (t.data()[base + ch * hw + p].as_f64() as f32).clamp(-1.0, 1.0);
            }
        }
        Self::new(w, h, data)
    }
}

/// `x ↦ x / 127.5 − 1`.
pub fn normalize(img: &ByteImage) -> NormImage {
    NormImage {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&b| b as f32 / 127.5 - 1.0).collect(),
    }
}

/// Inverse of [`normalize`], rounded and clamped to bytes.
pub fn denormalize(img: &NormImage) -> ByteImage {
    ByteImage {
        width: img.width,
        height: img.height,
        data: img
            .data
            .iter()
            .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect(),
    }
}

/// Dimension of every latent code.
pub const LATENT_DIM: usize = 256;

/// Latent code: exactly [`LATENT_DIM`] finite components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != LATENT_DIM {
            return Err(Error::Shape(format!(
                "latent vector needs {LATENT_DIM} components, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Range("latent vector has non-finite components".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; LATENT_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for LatentVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LatentVector> for Vec<f64> {
    fn from(z: LatentVector) -> Self {
        z.0
    }
}

/// `[K, H, W]` one-hot volume of a label map.
pub fn one_hot_encode<T: Real>(m: &LabelMap, num_classes: usize) -> Result<Tensor<T>> {
    validate_labels(m.width, &m.values, num_classes)?;
    let hw = m.width * m.height;
    let mut t = Tensor::zeros(vec![num_classes, m.height, m.width]);
    for (p, &v) in m.values.iter().enumerate() {
        t.data_mut()[v as usize * hw + p] = T::one();
    }
    Ok(t)
}

/// `[N, K, H, W]` one-hot batch.
pub fn one_hot_batch<T: Real>(maps: &[&LabelMap], num_classes: usize) -> Result<Tensor<T>> {
    let items = maps
        .iter()
        .map(|m| one_hot_encode::<T>(m, num_classes))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack_batch(&items))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub label: PathBuf,
    pub split: Split,
}

/// Image/label pairs, one JSON record per line. Relative paths resolve
/// against the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::Parse(format!("manifest line {}: {e}", lineno + 1)))?;
            if rec.image.is_relative() {
                rec.image = base.join(&rec.image);
            }
            if rec.label.is_relative() {
                rec.label = base.join(&rec.label);
            }
            records.push(rec);
        }
        Ok(Self { records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for line in std::io::BufReader::new(file).lines() {
            text.push_str(&line.map_err(|e| Error::io(path, e))?);
            text.push('\n');
        }
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Write with paths made relative to the manifest's directory when possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut out = Vec::new();
        for r in &self.records {
            let rel = ManifestRecord {
                image: r.image.strip_prefix(base).unwrap_or(&r.image).to_path_buf(),
                label: r.label.strip_prefix(base).unwrap_or(&r.label).to_path_buf(),
                split: r.split,
            };
            serde_json::to_writer(&mut out, &rel).expect("record serializes");
            out.write_all(b"\n").expect("write to vec");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Check that every pair exists and has identical pixel dimensions.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            let a = png_dimensions(&r.image)?;
            let b = png_dimensions(&r.label)?;
            if a != b {
                return Err(Error::Alignment { image: a, label: b });
            }
        }
        Ok(())
    }

    /// Load the pairs of one split into memory.
    pub fn load_pairs(&self, split: Split, num_classes: usize) -> Result<Vec<(ByteImage, LabelMap)>> {
        self.split(split)
            .map(|r| {
                let img = ByteImage::load_png(&r.image)?;
                let lab = LabelMap::load_png(&r.label, num_classes)?;
                if (img.width, img.height) != (lab.width, lab.height) {
                    return Err(Error::Alignment {
                        image: (img.width, img.height),
                        label: (lab.width, lab.height),
                    });
                }
                Ok((img, lab))
            })
            .collect()
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Png(msg) => Error::Png(format!("{}: {msg}", path.display())),
        other => other,
    }
}

/// `(width, height)` from a PNG header.
pub fn png_dimensions(path: &Path) -> Result<(usize, usize)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let info = reader.info();
    Ok((info.width as usize, info.height as usize))
}

/// `(width, height)` from PNG bytes, without decoding pixel data.
pub fn png_dimensions_from_bytes(bytes: &[u8]) -> Result<(usize, usize)> {
    let reader = png::Decoder::new(Cursor::new(bytes))
        .read_info()
        .map_err(|e| Error::Png(e.to_string()))?;
    let info = reader.info();
    Ok((info.width as usize, info.height as usize))
}

fn read_frame(bytes: &[u8], transform: png::Transformations) -> Result<(png::OutputInfo, Vec<u8>)> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(transform);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Decode raw 8-bit indices from a grayscale or palette-indexed PNG.
fn decode_indexed_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (info, buf) = read_frame(bytes, png::Transformations::IDENTITY)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!("label maps must be 8-bit, got {:?}", info.bit_depth)));
    }
    match info.color_type {
        png::ColorType::Grayscale | png::ColorType::Indexed => {}
        other => {
            return Err(Error::Png(format!(
                "label maps must be single-channel or indexed, got {other:?}"
            )))
        }
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut values = Vec::with_capacity(w * h);
    for row in buf.chunks(info.line_size).take(h) {
        values.extend_from_slice(&row[..w]);
    }
    Ok((w, h, values))
}

fn decode_rgb_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (info, buf) = read_frame(bytes, png::Transformations::EXPAND | png::Transformations::STRIP_16)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Indexed => return Err(Error::Png("unexpanded palette image".into())),
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * channels].chunks(channels) {
            if channels < 3 {
                data.extend_from_slice(&[px[0]; 3]);
            } else {
                data.extend_from_slice(&px[..3]);
            }
        }
    }
    Ok((w, h, data))
}

fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("png header to memory");
        writer.write_image_data(data).expect("png data to memory");
    }
    out
}
