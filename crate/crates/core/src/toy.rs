//! Procedural three-class "blob" dataset used for desk-scale runs.
//!
//! Class 0 is a pink background texture, class 1 large purple blobs and
//! class 2 small dark dots. Target area fractions are roughly 0.6/0.3/0.1.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_model::{ByteImage, ClassInfo, ClassPalette, DatasetManifest, LabelMap, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::stain_prep::PatchPair;

pub const TOY_CLASSES: usize = 3;

const BASE_RGB: [[f64; 3]; TOY_CLASSES] = [[232.0, 168.0, 198.0], [150.0, 80.0, 160.0], [55.0, 35.0, 120.0]];

pub fn toy_palette() -> ClassPalette {
    let classes = ["stroma", "epithelium", "nuclei"]
        .iter()
        .enumerate()
        .map(|(i, name)| ClassInfo {
            index: i as u8,
            name: name.to_string(),
            rgb: BASE_RGB[i].map(|c| c as u8),
        })
        .collect();
    ClassPalette::new(classes).expect("static palette is valid")
}

fn paint_disc(values: &mut [u8], size: usize, cx: f64, cy: f64, r: f64, class: u8) {
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                values[y * size + x] = class;
            }
        }
    }
}

fn fraction(values: &[u8], class: u8) -> f64 {
    values.iter().filter(|&&v| v == class).count() as f64 / values.len() as f64
}

/// Label layout: blobs of class 1 until about 30% coverage, then dots of
/// class 2 until about 10%.
pub fn toy_label(size: usize, rng: &mut impl Rng) -> LabelMap {
    let mut values = vec![0u8; size * size];
    let s = size as f64;
    let target1 = rng.random_range(0.25..0.35);
    while fraction(&values, 1) < target1 {
        let r = rng.random_range(0.12..0.22) * s;
        paint_disc(&mut values, size, rng.random_range(0.0..s), rng.random_range(0.0..s), r, 1);
    }
    let target2 = rng.random_range(0.08..0.12);
    while fraction(&values, 2) < target2 {
        let r = rng.random_range(0.03..0.06) * s;
        paint_disc(&mut values, size, rng.random_range(0.0..s), rng.random_range(0.0..s), r, 2);
    }
    LabelMap::new(size, size, TOY_CLASSES, values).expect("values below class count")
}

/// Class colour plus a per-image sinusoidal texture and pixel noise.
pub fn toy_image(label: &LabelMap, rng: &mut impl Rng) -> ByteImage {
    let (w, h) = (label.width(), label.height());
    let fx = rng.random_range(0.2..0.5);
    let fy = rng.random_range(0.2..0.5);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let base = BASE_RGB[label.get(x, y) as usize];
            let tex = 10.0 * (fx * x as f64 + fy * y as f64 + phase).sin();
            for c in base {
                let v = c + tex + rng.random_range(-12.0..12.0);
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ByteImage::new(w, h, data).expect("buffer sized to dimensions")
}

/// `count` pairs of `size`×`size`; pair `i` depends only on `(seed, i)`.
pub fn toy_dataset(count: usize, size: usize, seed: u64) -> Vec<PatchPair> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let label = toy_label(size, &mut rng);
            let image = toy_image(&label, &mut rng);
            PatchPair::new(image, label).expect("matching dimensions")
        })
        .collect()
}

/// Write train and test pairs plus `palette.json` and `manifest.jsonl`.
pub fn write_toy_dataset(out_dir: &Path, train: usize, test: usize, size: usize, seed: u64) -> Result<DatasetManifest> {
    for sub in ["images", "labels"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let pairs = toy_dataset(train + test, size, seed);
    let mut records = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let image = out_dir.join("images").join(format!("toy_{i:05}.png"));
        let label = out_dir.join("labels").join(format!("toy_{i:05}.png"));
        p.image.save_png(&image)?;
        p.label.save_png(&label)?;
        let split = if i < train { Split::Train } else { Split::Test };
        records.push(ManifestRecord { image, label, split });
    }
    toy_palette().save(&out_dir.join("palette.json"))?;
    let manifest = DatasetManifest { records };
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn priors_and_determinism() {
        let a = toy_dataset(40, 64, 9);
        let b = toy_dataset(40, 64, 9);
        assert_eq!(a, b);
        let mut hist = [0usize; 3];
        for p in &a {
            for (h, c) in hist.iter_mut().zip(p.label.histogram()) {
                *h += c;
            }
        }
        let total = (40 * 64 * 64) as f64;
        let f: Vec<f64> = hist.iter().map(|&c| c as f64 / total).collect();
        assert!((0.5..0.7).contains(&f[0]), "{f:?}");
        assert!((0.2..0.4).contains(&f[1]), "{f:?}");
        assert!((0.05..0.15).contains(&f[2]), "{f:?}");
    }
}
