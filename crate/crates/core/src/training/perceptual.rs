use std::path::Path;

use histosynth_autograd::{Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Container;
use crate::data_model::NormImage;
use crate::error::{Error, Result};
use crate::init::glorot_tensor;
use crate::networks::{Bound, Slot, Store};

/// Layout of one extractor convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayer {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    /// ReLU after the convolution. The last layer's raw output is the
    /// feature map compared by the loss.
    pub relu: bool,
}

/// Frozen convolutional feature network `φ`.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T: Real> {
    layers: Vec<FeatureLayer>,
    params: Store<T>,
    slots: Vec<(Slot, Slot)>,
}

pub const DEFAULT_FEATURE_LAYERS: [FeatureLayer; 3] = [
    FeatureLayer {
        cin: 3,
        cout: 16,
        kernel: 3,
        stride: 1,
        relu: true,
    },
    FeatureLayer {
        cin: 16,
        cout: 32,
        kernel: 3,
        stride: 2,
        relu: true,
    },
    FeatureLayer {
        cin: 32,
        cout: 32,
        kernel: 3,
        stride: 1,
        relu: false,
    },
];

impl<T: Real> FeatureExtractor<T> {
    /// Seed-fixed random weights; used when no pretrained weights are given.
    pub fn random(layers: &[FeatureLayer], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        for l in layers {
            let k2 = l.kernel * l.kernel;
            let w = glorot_tensor::<T>(vec![l.cout, l.cin, l.kernel, l.kernel], l.cin * k2, l.cout * k2, &mut rng);
            weights.push((w, Tensor::zeros(vec![l.cout])));
        }
        Self::from_weights(layers, weights)
    }

    pub fn default_random(seed: u64) -> Self {
        Self::random(&DEFAULT_FEATURE_LAYERS, seed).expect("default layout is valid")
    }

    pub fn from_weights(layers: &[FeatureLayer], weights: Vec<(Tensor<T>, Tensor<T>)>) -> Result<Self> {
        if layers.is_empty() || layers.len() != weights.len() {
            return Err(Error::Config("feature extractor needs one weight pair per layer".into()));
        }
        if layers[0].cin != 3 {
            return Err(Error::Config("feature extractor must take 3 input channels".into()));
        }
        let mut params = Store::new();
        let mut slots = Vec::new();
        for (i, (l, (w, b))) in layers.iter().zip(weights).enumerate() {
            if i > 0 && layers[i - 1].cout != l.cin {
                return Err(Error::Config(format!("feature layer {i} input does not match previous output")));
            }
            if w.shape() != [l.cout, l.cin, l.kernel, l.kernel] || b.shape() != [l.cout] {
                return Err(Error::Shape(format!("feature layer {i} weight shape {:?}", w.shape())));
            }
            let ws = params.add(format!("layer{i}.weight"), w);
            let bs = params.add(format!("layer{i}.bias"), b);
            slots.push((ws, bs));
        }
        Ok(Self {
            layers: layers.to_vec(),
            params,
            slots,
        })
    }

    pub fn layers(&self) -> &[FeatureLayer] {
        &self.layers
    }

    pub fn params(&self) -> &Store<T> {
        &self.params
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        self.params.bind(tape, false)
    }

    /// Feature map of the last layer for `[N, 3, H, W]` input.
    pub fn features<'t>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Var<'t, T> {
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().zip(&self.slots) {
            h = h.conv2d(p[w], Some(p[b]), l.stride, l.kernel / 2);
            if l.relu {
                h = h.relu();
            }
        }
        h
    }

    /// `mean |φ(fake) − φ(real)|`.
    pub fn loss<'t>(&self, fake: Var<'t, T>, real: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        if fake.shape() != real.shape() {
            return Err(Error::Shape(format!(
                "perceptual loss inputs differ: {:?} vs {:?}",
                fake.shape(),
                real.shape()
            )));
        }
        Ok((self.features(fake, p) - self.features(real, p)).abs().mean())
    }

    /// Loss between two images, evaluated without gradients.
    pub fn image_loss(&self, fake: &NormImage, real: &NormImage) -> Result<f64> {
        if (fake.width(), fake.height()) != (real.width(), real.height()) {
            return Err(Error::Shape("perceptual loss needs images of equal size".into()));
        }
        let tape = Tape::new();
        let p = self.bind(&tape);
        let as_batch = |im: &NormImage| {
            let t = im.to_chw::<T>();
            let s = t.shape().to_vec();
            t.reshape(vec![1, s[0], s[1], s[2]])
        };
        let l = self.loss(tape.constant(as_batch(fake)), tape.constant(as_batch(real)), &p)?;
        Ok(l.item().as_f64())
    }

    pub fn save(&self, c: &mut Container, prefix: &str) {
        c.put_json(&format!("{prefix}.layers"), &self.layers);
        c.put_store(prefix, &self.params);
    }

    pub fn load(c: &Container, prefix: &str) -> Result<Self> {
        let layers: Vec<FeatureLayer> = c.json(&format!("{prefix}.layers"))?;
        let mut weights = Vec::new();
        for i in 0..layers.len() {
            weights.push((
                c.tensor(&format!("{prefix}/layer{i}.weight"))?,
                c.tensor(&format!("{prefix}/layer{i}.bias"))?,
            ));
        }
        Self::from_weights(&layers, weights)
    }

    /// Pretrained weights from a container file written by [`Self::save`]
    /// under the prefix `phi`.
    pub fn load_file(path: &Path) -> Result<Self> {
        Self::load(&Container::load(path)?, "phi")
    }
}
