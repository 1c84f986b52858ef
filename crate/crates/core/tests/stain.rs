mod common;

use common::{median_sort, realizable_concentrations};
use histosynth_core::stain_prep::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn compose_then_deconvolve_is_identity() {
    let m = StainMatrix::hematoxylin_eosin();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (w, h) = (32, 32);
    let data = realizable_concentrations(&mut rng, w * h, &m);
    let c = Concentrations {
        width: w,
        height: h,
        data: data.clone(),
    };
    let od = OdImage::new(w, h, compose(&c, &m)).unwrap();
    let back = deconvolve(&od, &m);
    for (a, b) in back.data.iter().zip(&data) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn pure_stains_do_not_leak() {
    let m = StainMatrix::hematoxylin_eosin();
    for stain in 0..2 {
        let mut px = [0.0; 3];
        px[stain] = 1.5;
        let c = Concentrations {
            width: 1,
            height: 1,
            data: px.to_vec(),
        };
        let od = OdImage::new(1, 1, compose(&c, &m)).unwrap();
        let back = deconvolve(&od, &m);
        let own = back.data[stain];
        for other in (0..3).filter(|&o| o != stain) {
            assert!(back.data[other].abs() < 0.01 * own);
        }
    }
}

#[test]
fn od_reference_values() {
    let img = histosynth_core::data_model::ByteImage::new(2, 1, vec![255, 255, 255, 0, 0, 0]).unwrap();
    let od = rgb_to_od(&img);
    assert_eq!(&od.data[..3], &[0.0, 0.0, 0.0]);
    assert!((od.data[3] - 255f64.log10()).abs() < 1e-12);
}

#[test]
fn median_matches_sorting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..100 {
        let p = [0.1, 0.3, 0.5, 0.7, 0.9][i % 5];
        let data: Vec<u8> = (0..64 * 64).map(|_| rng.random_bool(p) as u8).collect();
        let mask = Mask::new(64, 64, data.clone()).unwrap();
        assert_eq!(median_filter3(&mask).data, median_sort(&data, 64, 64));
    }
}

#[test]
fn median_handles_tiny_masks() {
    for (w, h) in [(1, 1), (1, 5), (2, 3)] {
        let mut rng = ChaCha8Rng::seed_from_u64((w * 10 + h) as u64);
        let data: Vec<u8> = (0..w * h).map(|_| rng.random_bool(0.5) as u8).collect();
        let mask = Mask::new(w, h, data.clone()).unwrap();
        assert_eq!(median_filter3(&mask).data, median_sort(&data, w, h));
    }
}
