mod common;

use common::grad;
use histosynth_autograd::{Tape, Tensor};
use histosynth_core::training::perceptual::{FeatureExtractor, FeatureLayer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn assert_all(reports: Vec<(String, histosynth_autograd::gradcheck::GradCheckReport)>) {
    for (name, r) in reports {
        assert!(r.max_rel_error < TOL, "{name}: {r:?}");
    }
}

#[test]
fn spade_normalization_gradients() {
    assert_all(grad::spade_normalization());
}

#[test]
fn spade_residual_block_gradients() {
    let (reports, cancelled) = grad::spade_residual_block();
    assert_all(reports);
    assert!(cancelled < 1e-10, "cancelled bias gradient {cancelled}");
}

#[test]
fn lsgan_gradients() {
    assert_all(grad::lsgan());
}

#[test]
fn perceptual_loss_gradients() {
    assert_all(grad::perceptual());
}

#[test]
fn perceptual_loss_matches_direct_convolution() {
    let layer = FeatureLayer {
        cin: 3,
        cout: 1,
        kernel: 3,
        stride: 1,
        relu: false,
    };
    let kernel: Vec<f64> = (0..27).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect();
    let phi = FeatureExtractor::from_weights(
        &[layer],
        vec![(Tensor::new(vec![1, 3, 3, 3], kernel.clone()), Tensor::zeros(vec![1]))],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w) = (5, 4);
    let a = grad::randn(&mut rng, vec![1, 3, h, w]);
    let b = grad::randn(&mut rng, vec![1, 3, h, w]);
    // linear φ: φ(a) − φ(b) = φ(a − b) for a bias-free kernel
    let d: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let mut total = 0.0;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for c in 0..3 {
                for ky in 0..3i64 {
                    for kx in 0..3i64 {
                        let (yy, xx) = (y + ky - 1, x + kx - 1);
                        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                            continue;
                        }
                        let k = kernel[(c * 3 + ky as usize) * 3 + kx as usize];
                        acc += k * d[(c * h + yy as usize) * w + xx as usize];
                    }
                }
            }
            total += acc.abs();
        }
    }
    let expected = total / (h * w) as f64;
    let tape = Tape::new();
    let p = phi.bind(&tape);
    let got = phi.loss(tape.constant(a), tape.constant(b), &p).unwrap().item();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}
