//! Acceptance harness: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Criterion 9 trains a desk-scale GAN and takes tens of
//! minutes on one CPU core.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use histosynth_autograd::{Tape, Tensor};
use histosynth_core::concordance::{cohen_kappa, fleiss_kappa, PairRatings, RatingTable};
use histosynth_core::data_model::{LabelMap, LatentVector};
use histosynth_core::latent::{apply, class_direction, interpolation_sequence, latent_stream, lerp, seed_latent, LatentSet};
use histosynth_core::networks::{spectral_normalize, Generator, GeneratorConfig, SpectralNormState};
use histosynth_core::seg_eval::{
    confusion, evaluate_model, iou, majority_baseline, pixel_accuracy, train_seg, SegConfig, SegModel,
};
use histosynth_core::stain_prep::{compose, deconvolve, median_filter3, Concentrations, Mask, OdImage, PatchPair, StainMatrix};
use histosynth_core::toy::{toy_dataset, toy_palette, TOY_CLASSES};
use histosynth_core::training::gan::synthesize_all;
use histosynth_core::training::{lr_at, train, GanConfig, GanState, LossRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn criterion(id: u32, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let outcome = match (outcome, budget) {
        (Ok(_), Some(b)) if elapsed > b => Err(format!("took {elapsed:.1?}, budget {b:?}")),
        (o, _) => o,
    };
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} criterion {id:>2} [{name}] ({elapsed:.1?}): {detail}");
    outcome.is_ok()
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for &k in &[2usize, 3, 10] {
        for _ in 0..200 {
            let truth = random_map(&mut rng, 32, 32, k);
            let pred = random_map(&mut rng, 32, 32, k);
            for c in 0..k as u8 {
                let b = brute_counts(&pred, &truth, c);
                let cc = confusion(&pred, &truth, c).map_err(|e| e.to_string())?;
                ensure!(
                    (cc.true_pos, cc.true_neg, cc.false_pos, cc.false_neg) == b,
                    "counts differ for K={k} class {c}"
                );
                worst = worst.max((pixel_accuracy(&cc).map_err(|e| e.to_string())? - brute_pa(b)).abs());
                match (iou(&cc), brute_iou(b)) {
                    (Some(a), Some(o)) => worst = worst.max((a - o).abs()),
                    (a, o) => ensure!(a == o, "IOU definedness differs: {a:?} vs {o:?}"),
                }
            }
            pairs += 1;
        }
    }
    ensure!(worst <= 1e-12, "max deviation {worst:e}");
    Ok(format!("{pairs} map pairs, max |PA/IOU - oracle| = {worst:e}"))
}

fn kappa_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut worst = 0.0f64;
    let mut tables = 0;
    while tables < 100 {
        let c = rng.random_range(2..6);
        let n = rng.random_range(5..60);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let b: Vec<usize> = a.iter().map(|&x| if rng.random_bool(0.6) { x } else { rng.random_range(0..c) }).collect();
        let Ok(k) = cohen_kappa(&PairRatings::new(c, a.clone(), b.clone()).map_err(|e| e.to_string())?) else {
            continue;
        };
        worst = worst.max((k.kappa - cohen_direct(&a, &b, c)).abs());
        let raters = rng.random_range(3..7);
        let items = rng.random_range(4..30);
        let rows: Vec<Vec<usize>> = (0..items).map(|_| (0..raters).map(|_| rng.random_range(0..c)).collect()).collect();
        let f = fleiss_kappa(&RatingTable::complete(c, rows.clone()).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        worst = worst.max((f.kappa - fleiss_direct(&rows, c)).abs());
        tables += 1;
    }
    ensure!(worst <= 1e-12, "max deviation {worst:e}");

    let same = vec![0, 1, 2, 1, 0, 2, 2, 1];
    let ck = cohen_kappa(&PairRatings::new(3, same.clone(), same.clone()).unwrap()).unwrap().kappa;
    let rows: Vec<Vec<usize>> = same.iter().map(|&x| vec![x; 5]).collect();
    let fk = fleiss_kappa(&RatingTable::complete(3, rows).unwrap()).unwrap().kappa;
    ensure!(ck == 1.0 && fk == 1.0, "perfect agreement gave {ck}, {fk}");

    let n = 100_000;
    let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let ci = cohen_kappa(&PairRatings::new(4, a, b).unwrap()).unwrap().kappa;
    let rows: Vec<Vec<usize>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(0..4)).collect()).collect();
    let fi = fleiss_kappa(&RatingTable::complete(4, rows).unwrap()).unwrap().kappa;
    ensure!(ci.abs() < 0.02 && fi.abs() < 0.02, "independent raters gave {ci}, {fi}");
    Ok(format!(
        "{tables} tables, max deviation {worst:e}; perfect = 1; independent Cohen {ci:.4}, Fleiss {fi:.4}"
    ))
}

fn deconvolution() -> Check {
    let m = StainMatrix::hematoxylin_eosin();
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let (w, h) = (64, 64);
    let data = realizable_concentrations(&mut rng, w * h, &m);
    let c = Concentrations {
        width: w,
        height: h,
        data: data.clone(),
    };
    let od = OdImage::new(w, h, compose(&c, &m)).map_err(|e| e.to_string())?;
    let back = deconvolve(&od, &m);
    let err = back.data.iter().zip(&data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(err < 1e-9, "round trip error {err:e}");
    let mut leak = 0.0f64;
    for stain in 0..2 {
        let mut px = [0.0; 3];
        px[stain] = 1.5;
        let c = Concentrations {
            width: 1,
            height: 1,
            data: px.to_vec(),
        };
        let back = deconvolve(&OdImage::new(1, 1, compose(&c, &m)).unwrap(), &m);
        for other in (0..3).filter(|&o| o != stain) {
            leak = leak.max(back.data[other].abs() / back.data[stain]);
        }
    }
    ensure!(leak < 0.01, "leakage {leak}");
    Ok(format!("round trip error {err:e}, max leakage {:.2e}%", leak * 100.0))
}

fn median_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    for i in 0..100 {
        let p = [0.1, 0.3, 0.5, 0.7, 0.9][i % 5];
        let data: Vec<u8> = (0..64 * 64).map(|_| rng.random_bool(p) as u8).collect();
        let mask = Mask::new(64, 64, data.clone()).map_err(|e| e.to_string())?;
        ensure!(median_filter3(&mask).data == median_sort(&data, 64, 64), "mask {i} differs");
    }
    Ok("100 masks identical to the sorting oracle".into())
}

fn spectral() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for _ in 0..50 {
        let rows = rng.random_range(4..48);
        let cin = rng.random_range(1..8);
        let w = Tensor::<f64>::from_fn(vec![rows, cin, 3, 3], |_| rng.sample::<f64, _>(StandardNormal));
        let mut st = SpectralNormState::init(&w, &mut rng);
        let out = spectral_normalize(&w, &mut st, 1000);
        let s = top_singular_value(out.weight.data(), rows, cin * 9);
        lo = lo.min(s);
        hi = hi.max(s);
    }
    ensure!(lo >= 0.999 && hi <= 1.001, "sigma range [{lo}, {hi}]");
    Ok(format!("50 matrices, 1000 power iterations, sigma in [{lo:.6}, {hi:.6}]"))
}

fn gradients() -> Check {
    let mut all = common::grad::spade_normalization();
    let (blocks, cancelled) = common::grad::spade_residual_block();
    all.extend(blocks);
    all.extend(common::grad::lsgan());
    all.extend(common::grad::perceptual());
    let mut parts = Vec::new();
    for (name, r) in &all {
        ensure!(r.max_rel_error < 1e-4, "{name}: max rel error {:e}", r.max_rel_error);
        parts.push(format!("{name} {:.1e}", r.max_rel_error));
    }
    ensure!(cancelled < 1e-10, "cancelled conv0 bias gradient {cancelled:e}");
    Ok(parts.join(", "))
}

fn architecture() -> Check {
    let mut out = Vec::new();
    for r in [16usize, 64, 256, 512] {
        let g = Generator::<f32>::build(GeneratorConfig::new(r, 3), &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| e.to_string())?;
        let trace = g.shape_trace().map_err(|e| e.to_string())?;
        let find = |l: &str| trace.iter().find(|e| e.label == l).map(|e| e.shape.clone());
        let ups = trace.iter().filter(|e| e.label.ends_with(".upsample")).count();
        let expect = (r / 4).trailing_zeros() as usize;
        ensure!(ups == expect, "R={r}: {ups} upsample stages, want {expect}");
        ensure!(find("dense") == Some(vec![1, 16_384]), "R={r}: dense {:?}", find("dense"));
        ensure!(find("reshape") == Some(vec![1, 1024, 4, 4]), "R={r}: reshape {:?}", find("reshape"));
        ensure!(find("output") == Some(vec![1, 3, r, r]), "R={r}: output {:?}", find("output"));
        let dense_w = g.params.iter().find(|(n, _)| *n == "dense.weight").map(|(_, t)| t.shape().to_vec());
        ensure!(dense_w == Some(vec![16_384, 256]), "R={r}: dense weight {dense_w:?}");
        if r <= 64 {
            let m = LabelMap::new(r, r, 3, (0..r * r).map(|i| (i % 3) as u8).collect()).unwrap();
            let z = LatentVector::new((0..256).map(|i| (i as f64 * 0.37).sin() * 4.0).collect()).unwrap();
            let img = g.generate(&m, &z).map_err(|e| e.to_string())?;
            ensure!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)), "R={r}: output outside [-1, 1]");
        }
        out.push(format!("R={r}: {ups} stages"));
    }
    let seg = SegModel::build(SegConfig::new(4), &mut ChaCha8Rng::seed_from_u64(1)).map_err(|e| e.to_string())?;
    let tape = Tape::new();
    let p = seg.params.bind(&tape, false);
    let y = seg
        .forward(tape.constant(Tensor::<f32>::zeros(vec![1, 3, 256, 256])), &p)
        .map_err(|e| e.to_string())?;
    ensure!(y.shape() == vec![1, 4, 256, 256], "segmentation output {:?}", y.shape());
    out.push("seg 3x256x256 -> 4x256x256".into());
    Ok(out.join(", "))
}

fn schedule() -> Check {
    let got = (lr_at(0), lr_at(999), lr_at(2000));
    ensure!(got == (2e-4, 2e-4, 1.805e-4), "lr_at(0, 999, 2000) = {got:?}");
    Ok(format!("lr_at(0)={:e}, lr_at(999)={:e}, lr_at(2000)={:e}", got.0, got.1, got.2))
}

fn desk_scale() -> Check {
    let all = toy_dataset(600, 64, 1);
    let (train_set, held_out) = all.split_at(500);
    let cfg = GanConfig::toy(TOY_CLASSES);
    let weights = cfg.train.loss_weights;
    let mut state = GanState::new(cfg, Some(toy_palette())).map_err(|e| e.to_string())?;
    let records = train(&mut state, train_set, 2000, |_, _| Ok(())).map_err(|e| e.to_string())?;
    ensure!(records.len() == 2000, "{} records", records.len());
    let total: Vec<f64> = records.iter().map(|r: &LossRecord| r.generator_total(&weights)).collect();
    let early = median(&total[..500]);
    let late = median(&total[1500..]);
    let a = late < early;

    // mean generated colour inside each true class region, normalised units
    let latents = latent_stream(2024, held_out.len());
    let mut sums = vec![[0.0f64; 3]; TOY_CLASSES];
    let mut counts = vec![0usize; TOY_CLASSES];
    for (p, z) in held_out.iter().zip(&latents) {
        let img = state.generator.generate(&p.label, z).map_err(|e| e.to_string())?;
        for (i, &c) in p.label.values().iter().enumerate() {
            for ch in 0..3 {
                sums[c as usize][ch] += img.data()[i * 3 + ch] as f64;
            }
            counts[c as usize] += 1;
        }
    }
    let means: Vec<[f64; 3]> = sums.iter().zip(&counts).map(|(s, &n)| s.map(|v| v / n as f64)).collect();
    let mut separation = f64::INFINITY;
    for i in 0..TOY_CLASSES {
        for j in i + 1..TOY_CLASSES {
            let d = (0..3).map(|c| (means[i][c] - means[j][c]).powi(2)).sum::<f64>().sqrt();
            separation = separation.min(d);
        }
    }
    let b = separation >= 0.2;

    // segmentation trained on synthesized pairs only, scored on real ones
    let maps: Vec<LabelMap> = train_set.iter().map(|p| p.label.clone()).collect();
    let synth_latents = latent_stream(7, maps.len());
    let synthetic: Vec<PatchPair> = synthesize_all(&state.generator, &maps, &synth_latents)
        .map_err(|e| e.to_string())?
        .iter()
        .zip(&maps)
        .map(|(img, m)| PatchPair::new(histosynth_core::data_model::denormalize(img), m.clone()))
        .collect::<histosynth_core::Result<_>>()
        .map_err(|e| e.to_string())?;
    let mut seg_cfg = SegConfig::new(TOY_CLASSES);
    seg_cfg.base_features = 8;
    seg_cfg.crop_size = 64;
    seg_cfg.batch_size = 4;
    seg_cfg.iterations = 2000;
    seg_cfg.seed = 3;
    let seg = train_seg(seg_cfg, &synthetic).map_err(|e| e.to_string())?;
    let metrics = evaluate_model(&seg.model, held_out).map_err(|e| e.to_string())?;
    let train_maps: Vec<&LabelMap> = maps.iter().collect();
    let truths: Vec<LabelMap> = held_out.iter().map(|p| p.label.clone()).collect();
    let baseline = majority_baseline(&train_maps, &truths, TOY_CLASSES).map_err(|e| e.to_string())?;
    let c = metrics.miou >= 0.5;

    let detail = format!(
        "(a) median G loss early {early:.4} -> late {late:.4} [{}]; (b) min class colour separation {separation:.3} [{}]; \
         (c) mIOU {:.3} vs majority baseline {:.3} [{}]",
        if a { "ok" } else { "FAIL" },
        if b { "ok" } else { "FAIL" },
        metrics.miou,
        baseline.miou,
        if c { "ok" } else { "FAIL" },
    );
    if a && b && c {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tiny_config() -> GanConfig {
    let mut cfg = GanConfig::new(16, 3);
    cfg.generator.base_channels = 8;
    cfg.generator.schedule = vec![8, 4];
    cfg.generator.spade_hidden = 4;
    cfg.discriminator.channels = vec![4, 8];
    cfg.train.batch_size = 2;
    cfg.train.seed = 31;
    cfg
}

fn determinism() -> Check {
    let data = toy_dataset(6, 16, 3);
    let run = |until: u64| {
        let mut s = GanState::new(tiny_config(), Some(toy_palette())).unwrap();
        let log = train(&mut s, &data, until, |_, _| Ok(())).unwrap();
        (s, log)
    };
    let (a, trace_a) = run(6);
    let (_, trace_b) = run(6);
    ensure!(trace_a == trace_b, "two fixed-seed runs diverged");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("mid.ckpt");
    let (mid, first) = run(3);
    mid.save(&ckpt).map_err(|e| e.to_string())?;
    let mut resumed = GanState::load(&ckpt).map_err(|e| e.to_string())?;
    let rest = train(&mut resumed, &data, 6, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let joined: Vec<LossRecord> = first.into_iter().chain(rest).collect();
    ensure!(joined == trace_a, "resumed trace differs from the uninterrupted one");

    let full = dir.path().join("full.ckpt");
    a.save(&full).map_err(|e| e.to_string())?;
    let loaded = GanState::load(&full).map_err(|e| e.to_string())?;
    for (i, p) in data.iter().enumerate() {
        let z = seed_latent(i as u64);
        ensure!(
            loaded.generator.generate(&p.label, &z).unwrap() == a.generator.generate(&p.label, &z).unwrap(),
            "image {i} differs after reload"
        );
    }
    Ok(format!("{} identical records; resume at 3 matches; reload images identical", trace_a.len()))
}

fn latent_ops() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1011);
    for i in 0..1000 {
        let z1 = histosynth_core::latent::sample_latent(&mut rng);
        let z2 = if i % 2 == 0 {
            histosynth_core::latent::sample_latent(&mut rng)
        } else {
            let v = histosynth_core::latent::sample_latent(&mut rng);
            LatentVector::new(v.as_slice().iter().map(|x| x.powi(5) * 1e2).collect()).unwrap()
        };
        ensure!(lerp(&z1, &z2, 0.0).unwrap() == z1 && lerp(&z1, &z2, 1.0).unwrap() == z2, "lerp endpoint {i}");
        let d = class_direction(
            &LatentSet::new("a", vec![z1.clone()]).unwrap(),
            &LatentSet::new("b", vec![z2.clone()]).unwrap(),
        );
        ensure!(apply(&z1, &d, 1.0).unwrap() == z2, "singleton direction {i} not exact");
    }
    let mut cfg = GeneratorConfig::new(16, 3);
    cfg.base_channels = 8;
    cfg.schedule = vec![8, 4];
    cfg.spade_hidden = 4;
    let g = Generator::<f32>::build(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let m = toy_dataset(1, 16, 8)[0].label.clone();
    let (z1, z2) = (seed_latent(1), seed_latent(2));
    let frames = interpolation_sequence(&g, &m, &z1, &z2, 5).map_err(|e| e.to_string())?;
    ensure!(frames[0] == g.generate(&m, &z1).unwrap(), "first frame differs");
    ensure!(frames[4] == g.generate(&m, &z2).unwrap(), "last frame differs");
    Ok("1000 pairs: exact lerp endpoints and singleton directions; interpolation endpoints exact".into())
}

fn main() {
    let secs = Duration::from_secs;
    let results = [
        criterion(1, "metric oracle", Some(secs(10)), metric_oracle),
        criterion(2, "kappa oracle", Some(secs(30)), kappa_oracle),
        criterion(3, "deconvolution", Some(secs(5)), deconvolution),
        criterion(4, "median filter", Some(secs(10)), median_oracle),
        criterion(5, "spectral norm", Some(secs(10)), spectral),
        criterion(6, "gradients", Some(secs(120)), gradients),
        criterion(7, "architecture", None, architecture),
        criterion(8, "schedule", None, schedule),
        criterion(9, "desk-scale end to end", Some(secs(6 * 3600)), desk_scale),
        criterion(10, "determinism and resume", None, determinism),
        criterion(11, "latent ops", None, latent_ops),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
