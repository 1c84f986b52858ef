//! Finite-difference checks of the hand-written backward passes. Each
//! function returns labelled reports; callers decide the tolerance.

use histosynth_autograd::gradcheck::{check_gradients, GradCheckReport};
use histosynth_autograd::{Tape, Tensor, Var};
use histosynth_core::networks::*;
use histosynth_core::training::perceptual::FeatureExtractor;
use histosynth_core::training::{lsgan_d_loss, lsgan_g_loss, multiscale_d_loss, multiscale_g_loss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-5;

pub fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

fn onehot(rng: &mut ChaCha8Rng, n: usize, k: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(vec![n, k, h, w]);
    for b in 0..n {
        for i in 0..h * w {
            let c = rng.random_range(0..k);
            t.data_mut()[(b * k + c) * h * w + i] = 1.0;
        }
    }
    t
}

/// Weighted sum so every output element carries a distinct gradient.
fn project<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, weights: &Tensor<f64>) -> Var<'t, f64> {
    (out * tape.constant(weights.clone())).sum()
}

pub fn spade_normalization() -> Vec<(String, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut params, mut bufs) = (Store::<f64>::new(), Store::<f64>::new());
    let spade = Spade::new(
        &mut params,
        &mut bufs,
        SpadeSpec {
            name: "n",
            channels: 3,
            num_classes: 3,
            hidden: 4,
            spectral: true,
            eps: 1e-5,
            momentum: 0.9,
        },
        &mut rng,
    );
    let labels = onehot(&mut rng, 2, 3, 4, 4);
    let proj = randn(&mut rng, vec![2, 3, 4, 4]);
    let mut inputs = vec![randn(&mut rng, vec![2, 3, 4, 4])];
    inputs.extend(params.values().iter().cloned());
    [Mode::Train, Mode::Infer]
        .into_iter()
        .map(|mode| {
            let report = check_gradients(&inputs, STEP, |tape, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let pyr = LabelPyramid::new(tape, labels.clone());
                let mut ctx = Ctx::new(mode);
                let out = spade.forward(v[0], &pyr, &p, &bufs, &mut ctx).unwrap();
                project(tape, out, &proj)
            });
            (format!("spade {mode:?}"), report)
        })
        .collect()
}

/// Reports for a channel-changing and a channel-preserving block, plus the
/// largest analytic gradient of `conv0.bias`. That bias feeds a batch
/// normalisation, so its exact gradient is zero and a finite difference
/// would only measure rounding noise; it is held constant in the check.
pub fn spade_residual_block() -> (Vec<(String, GradCheckReport)>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut reports = Vec::new();
    let mut cancelled_max = 0.0f64;
    for (cin, cout) in [(3, 2), (2, 2)] {
        let (mut params, mut bufs) = (Store::<f64>::new(), Store::<f64>::new());
        let block = ResBlock::new(
            &mut params,
            &mut bufs,
            ResBlockSpec {
                name: "b",
                cin,
                cout,
                num_classes: 2,
                hidden: 3,
                spectral: true,
                eps: 1e-5,
                momentum: 0.9,
            },
            &mut rng,
        );
        let labels = onehot(&mut rng, 2, 2, 4, 4);
        let proj = randn(&mut rng, vec![2, cout, 4, 4]);
        let x = randn(&mut rng, vec![2, cin, 4, 4]);
        let cancelled = params.iter().position(|(n, _)| n == "b.conv0.bias").unwrap();
        let mut inputs = vec![x.clone()];
        inputs.extend(params.values().iter().enumerate().filter(|&(i, _)| i != cancelled).map(|(_, t)| t.clone()));
        let report = check_gradients(&inputs, STEP, |tape, v| {
            let mut free = v[1..].iter();
            let vars = params
                .values()
                .iter()
                .enumerate()
                .map(|(i, t)| if i == cancelled { tape.constant(t.clone()) } else { *free.next().unwrap() })
                .collect();
            block_loss(&block, tape, v[0], &Bound::from_vars(vars), &labels, &bufs, &proj)
        });
        reports.push((format!("resblock {cin}->{cout}"), report));

        let tape = Tape::new();
        let p = params.bind(&tape, true);
        let loss = block_loss(&block, &tape, tape.constant(x), &p, &labels, &bufs, &proj);
        let grads = tape.backward(loss);
        cancelled_max = cancelled_max.max(grads.get(p.vars()[cancelled]).unwrap().max_abs());
    }
    (reports, cancelled_max)
}

fn block_loss<'t>(
    block: &ResBlock,
    tape: &'t Tape<f64>,
    x: Var<'t, f64>,
    p: &Bound<'t, f64>,
    labels: &Tensor<f64>,
    bufs: &Store<f64>,
    proj: &Tensor<f64>,
) -> Var<'t, f64> {
    let pyr = LabelPyramid::new(tape, labels.clone());
    let mut ctx = Ctx::new(Mode::Train);
    let out = block.forward(x, &pyr, p, bufs, &mut ctx).unwrap();
    project(tape, out, proj)
}

pub fn lsgan() -> Vec<(String, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        randn(&mut rng, vec![2, 1, 4, 4]),
        randn(&mut rng, vec![2, 1, 4, 4]),
        randn(&mut rng, vec![2, 1, 2, 2]),
        randn(&mut rng, vec![2, 1, 2, 2]),
    ];
    let single = check_gradients(&inputs, STEP, |_, v| lsgan_d_loss(v[0], v[1]) + lsgan_g_loss(v[1]));
    let multi = check_gradients(&inputs, STEP, |_, v| {
        multiscale_d_loss(&[v[0], v[2]], &[v[1], v[3]]) + multiscale_g_loss(&[v[1], v[3]])
    });
    vec![("lsgan".into(), single), ("lsgan multiscale".into(), multi)]
}

pub fn perceptual() -> Vec<(String, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let phi = FeatureExtractor::<f64>::default_random(9);
    let inputs = vec![randn(&mut rng, vec![1, 3, 6, 6]), randn(&mut rng, vec![1, 3, 6, 6])];
    let r = check_gradients(&inputs, STEP, |tape, v| {
        let p = phi.bind(tape);
        phi.loss(v[0], v[1], &p).unwrap()
    });
    vec![("perceptual".into(), r)]
}
