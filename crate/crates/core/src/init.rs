use histosynth_autograd::{Real, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// Glorot/Xavier uniform bound `√(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `n` draws from `U(−a, a)` with the Glorot bound.
pub fn glorot_init(fan_in: usize, fan_out: usize, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    assert!(fan_in >= 1 && fan_out >= 1, "fans must be positive");
    let a = glorot_bound(fan_in, fan_out);
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub(crate) fn glorot_tensor<T: Real>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        glorot_init(fan_in, fan_out, n, rng).into_iter().map(T::lit).collect(),
    )
}
