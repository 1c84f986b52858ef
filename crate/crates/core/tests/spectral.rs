mod common;

use common::top_singular_value;
use histosynth_autograd::Tensor;
use histosynth_core::networks::{spectral_normalize, SpectralNormState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn normalized_weights_have_unit_top_singular_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..50 {
        let rows = rng.random_range(4..48);
        let cin = rng.random_range(1..8);
        let shape = vec![rows, cin, 3, 3];
        let cols = cin * 9;
        let w = Tensor::<f64>::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal));
        let mut st = SpectralNormState::init(&w, &mut rng);
        let out = spectral_normalize(&w, &mut st, 1000);
        assert!(!out.degenerate);
        let s = top_singular_value(out.weight.data(), rows, cols);
        assert!((0.999..=1.001).contains(&s), "sigma {s} for {rows}x{cols}");
        let raw = top_singular_value(w.data(), rows, cols);
        assert!((out.sigma - raw).abs() <= 1e-3 * raw);
    }
}

#[test]
fn zero_weight_is_left_alone() {
    let w = Tensor::<f64>::zeros(vec![4, 6]);
    let mut st = SpectralNormState::init(&w, &mut ChaCha8Rng::seed_from_u64(1));
    let out = spectral_normalize(&w, &mut st, 5);
    assert!(out.degenerate);
    assert_eq!(out.weight, w);
}
