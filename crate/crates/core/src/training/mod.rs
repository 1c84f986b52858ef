//! Objectives, optimisation and the adversarial training loop.

pub mod checkpoint;
pub mod gan;
pub mod perceptual;

use histosynth_autograd::{Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::networks::Store;

pub use crate::init::{glorot_bound, glorot_init};
pub use checkpoint::{Block, Container};
pub use gan::{
    load_generator, train, train_step, train_step_observed, train_to_dir, StepPhase, GanConfig, GanState, LossRecord, TrainArtifacts, TrainConfig,
};
pub use perceptual::FeatureExtractor;

/// `½·mean((real − 1)²) + ½·mean(fake²)` for one discriminator scale.
pub fn lsgan_d_loss<'t, T: Real>(real: Var<'t, T>, fake: Var<'t, T>) -> Var<'t, T> {
    let half = T::lit(0.5);
    real.add_scalar(-T::one()).square().mean().scale(half) + fake.square().mean().scale(half)
}

/// `½·mean((fake − 1)²)` for one discriminator scale.
pub fn lsgan_g_loss<'t, T: Real>(fake: Var<'t, T>) -> Var<'t, T> {
    fake.add_scalar(-T::one()).square().mean().scale(T::lit(0.5))
}

/// Sum of [`lsgan_d_loss`] over matching scales.
pub fn multiscale_d_loss<'t, T: Real>(real: &[Var<'t, T>], fake: &[Var<'t, T>]) -> Var<'t, T> {
    assert_eq!(real.len(), fake.len(), "scale count mismatch");
    let mut terms = real.iter().zip(fake).map(|(&r, &f)| lsgan_d_loss(r, f));
    let first = terms.next().expect("at least one scale");
    terms.fold(first, |a, b| a + b)
}

/// Sum of [`lsgan_g_loss`] over scales.
pub fn multiscale_g_loss<'t, T: Real>(fake: &[Var<'t, T>]) -> Var<'t, T> {
    let mut terms = fake.iter().map(|&f| lsgan_g_loss(f));
    let first = terms.next().expect("at least one scale");
    terms.fold(first, |a, b| a + b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gan: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gan: 1.0,
            perceptual: 10.0,
        }
    }
}

/// Step-decayed learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub every: u64,
}

impl LrSchedule {
    pub const GAN: LrSchedule = LrSchedule {
        base: 2e-4,
        factor: 0.95,
        every: 1000,
    };

    pub const SEG: LrSchedule = LrSchedule {
        base: 1e-4,
        factor: 0.95,
        every: 1000,
    };

    /// `base · factor^⌊iteration / every⌋`.
    pub fn at(&self, iteration: u64) -> f64 {
        self.base * self.factor.powi((iteration / self.every.max(1)) as i32)
    }
}

/// Generator/discriminator learning rate at `iteration`.
pub fn lr_at(iteration: u64) -> f64 {
    LrSchedule::GAN.at(iteration)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub const GAN: AdamConfig = AdamConfig {
        beta1: 0.5,
        beta2: 0.999,
        eps: 1e-8,
    };

    pub const SEG: AdamConfig = AdamConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

/// Adam with bias correction; moments mirror the parameter store layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real> {
    pub cfg: AdamConfig,
    pub m: Store<T>,
    pub v: Store<T>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &Store<T>) -> Self {
        Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// Apply one update. `grads[i]` belongs to the i-th stored parameter;
    /// parameters without a gradient are left alone.
    pub fn update(&mut self, params: &mut Store<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = T::lit(1.0 - b1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - b2.powi(self.step as i32));
        let (b1, b2, eps, lr) = (T::lit(b1), T::lit(b2), T::lit(self.cfg.eps), T::lit(lr));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let ms = self.m.values_mut();
        let vs = self.v.values_mut();
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (ms[i].data_mut(), vs[i].data_mut());
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    pub fn save(&self, c: &mut Container, prefix: &str) {
        c.put_json(&format!("{prefix}.state"), &serde_json::json!({ "step": self.step, "config": self.cfg }));
        c.put_store(&format!("{prefix}.m"), &self.m);
        c.put_store(&format!("{prefix}.v"), &self.v);
    }

    pub fn load(&mut self, c: &Container, prefix: &str) -> crate::Result<()> {
        #[derive(Deserialize)]
        struct State {
            step: u64,
            config: AdamConfig,
        }
        let st: State = c.json(&format!("{prefix}.state"))?;
        self.step = st.step;
        self.cfg = st.config;
        c.load_store(&format!("{prefix}.m"), &mut self.m)?;
        c.load_store(&format!("{prefix}.v"), &mut self.v)
    }
}
