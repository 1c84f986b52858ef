//! Latent sampling, interpolation and condition-direction arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data_model::{LabelMap, LatentVector, NormImage, LATENT_DIM};
use crate::error::{Error, Result};
use crate::networks::Generator;

/// 256 independent standard-normal draws.
pub fn sample_latent(rng: &mut impl Rng) -> LatentVector {
    let v = (0..LATENT_DIM).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    LatentVector::new(v).expect("finite draws of the right length")
}

/// Latent for a seed: the first 256 standard-normal draws of a ChaCha8
/// stream seeded with `seed`.
pub fn seed_latent(seed: u64) -> LatentVector {
    sample_latent(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// `n` latents drawn in order from one ChaCha8 stream seeded with `seed`.
/// The first equals `seed_latent(seed)`.
pub fn latent_stream(seed: u64, n: usize) -> Vec<LatentVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_latent(&mut rng)).collect()
}

/// `(1 − t)·z1 + t·z2`, with `t` in `[0, 1]`.
pub fn lerp(z1: &LatentVector, z2: &LatentVector, t: f64) -> Result<LatentVector> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range(format!("interpolation parameter {t} outside [0, 1]")));
    }
    // endpoints are returned verbatim so they stay exact
    if t == 0.0 {
        return Ok(z1.clone());
    }
    if t == 1.0 {
        return Ok(z2.clone());
    }
    // The favoured endpoint gets weight l in [0.5, 1] and the other 1 − l.
    // Both are exact, so lerp(z1, z2, t) and lerp(z2, z1, 1 − t) agree bit
    // for bit.
    let (wa, wb) = if t >= 0.5 {
        (1.0 - t, t)
    } else {
        let l = 1.0 - t;
        (l, 1.0 - l)
    };
    let v = z1
        .as_slice()
        .iter()
        .zip(z2.as_slice())
        .map(|(&a, &b)| wa * a + wb * b)
        .collect();
    LatentVector::new(v)
}

/// `steps` frames along the line from `z1` to `z2`, all generated from the
/// same label map.
pub fn interpolation_sequence(
    g: &Generator<f32>,
    m: &LabelMap,
    z1: &LatentVector,
    z2: &LatentVector,
    steps: usize,
) -> Result<Vec<NormImage>> {
    interpolation_latents(z1, z2, steps)?.iter().map(|z| g.generate(m, z)).collect()
}

/// Latents used by [`interpolation_sequence`].
pub fn interpolation_latents(z1: &LatentVector, z2: &LatentVector, steps: usize) -> Result<Vec<LatentVector>> {
    if steps < 2 {
        return Err(Error::Range(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    (0..steps).map(|i| lerp(z1, z2, i as f64 / (steps - 1) as f64)).collect()
}

/// Latents sharing a condition tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSet {
    pub condition: String,
    latents: Vec<LatentVector>,
}

impl LatentSet {
    pub fn new(condition: impl Into<String>, latents: Vec<LatentVector>) -> Result<Self> {
        if latents.is_empty() {
            return Err(Error::EmptySet("latent set has no members".into()));
        }
        Ok(Self {
            condition: condition.into(),
            latents,
        })
    }

    pub fn latents(&self) -> &[LatentVector] {
        &self.latents
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.latents.len() as f64;
        let mut acc = vec![0.0; LATENT_DIM];
        for z in &self.latents {
            for (a, &v) in acc.iter_mut().zip(z.as_slice()) {
                *a += v;
            }
        }
        // a single member is its own mean, bit for bit
        if self.latents.len() > 1 {
            acc.iter_mut().for_each(|a| *a /= n);
        }
        acc
    }
}

/// Latent-space direction stored as an unevaluated sum `hi + lo`, which
/// holds the difference of two vectors exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    hi: Vec<f64>,
    lo: Vec<f64>,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

impl Direction {
    pub fn zeros() -> Self {
        Self {
            hi: vec![0.0; LATENT_DIM],
            lo: vec![0.0; LATENT_DIM],
        }
    }

    /// `to − from`, exactly.
    pub fn between(from: &[f64], to: &[f64]) -> Result<Self> {
        if from.len() != LATENT_DIM || to.len() != LATENT_DIM {
            return Err(Error::Shape(format!("directions need {LATENT_DIM} components")));
        }
        let (hi, lo) = from.iter().zip(to).map(|(&f, &t)| two_sum(t, -f)).unzip();
        Ok(Self { hi, lo })
    }

    /// Rounded components.
    pub fn values(&self) -> Vec<f64> {
        self.hi.iter().zip(&self.lo).map(|(h, l)| h + l).collect()
    }

    pub fn norm(&self) -> f64 {
        self.values().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `mean(target) − mean(source)`.
pub fn class_direction(source: &LatentSet, target: &LatentSet) -> Direction {
    Direction::between(&source.mean(), &target.mean()).expect("set members have latent length")
}

/// `z + α·d`, evaluated with compensated arithmetic so that
/// `apply(z1, z2 − z1, 1) == z2` holds exactly.
pub fn apply(z: &LatentVector, d: &Direction, alpha: f64) -> Result<LatentVector> {
    let v = z
        .as_slice()
        .iter()
        .zip(d.hi.iter().zip(&d.lo))
        .map(|(&zi, (&h, &l))| {
            let ph = alpha * h;
            let pl = alpha.mul_add(h, -ph);
            let (s, e) = two_sum(zi, ph);
            s + (e + (pl + alpha * l))
        })
        .collect();
    LatentVector::new(v)
}
