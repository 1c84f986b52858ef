//! Independent reference implementations shared by the integration tests
//! and the acceptance harness.
#![allow(dead_code)]

pub mod grad;

use histosynth_core::data_model::LabelMap;
use rand::Rng;

/// `(TP, TN, FP, FN)` for class `k`, counted pixel by pixel.
pub fn brute_counts(pred: &LabelMap, truth: &LabelMap, k: u8) -> (u64, u64, u64, u64) {
    let (mut tp, mut tn, mut fp, mut fneg) = (0, 0, 0, 0);
    for y in 0..truth.height() {
        for x in 0..truth.width() {
            let p = pred.get(x, y) == k;
            let t = truth.get(x, y) == k;
            if p && t {
                tp += 1;
            } else if !p && !t {
                tn += 1;
            } else if p {
                fp += 1;
            } else {
                fneg += 1;
            }
        }
    }
    (tp, tn, fp, fneg)
}

pub fn brute_pa(c: (u64, u64, u64, u64)) -> f64 {
    (c.0 + c.1) as f64 / (c.0 + c.1 + c.2 + c.3) as f64
}

pub fn brute_iou(c: (u64, u64, u64, u64)) -> Option<f64> {
    let d = c.0 + c.2 + c.3;
    if d == 0 {
        None
    } else {
        Some(c.0 as f64 / d as f64)
    }
}

pub fn random_map(rng: &mut impl Rng, w: usize, h: usize, k: usize) -> LabelMap {
    let values = (0..w * h).map(|_| rng.random_range(0..k) as u8).collect();
    LabelMap::new(w, h, k, values).unwrap()
}

/// Cohen's kappa straight from the definition, without a contingency table.
pub fn cohen_direct(a: &[usize], b: &[usize], categories: usize) -> f64 {
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64;
    let po = agree / n;
    let mut pe = 0.0;
    for c in 0..categories {
        let fa = a.iter().filter(|&&x| x == c).count() as f64 / n;
        let fb = b.iter().filter(|&&x| x == c).count() as f64 / n;
        pe += fa * fb;
    }
    (po - pe) / (1.0 - pe)
}

/// Fleiss' kappa from the textbook per-item agreement formula.
pub fn fleiss_direct(rows: &[Vec<usize>], categories: usize) -> f64 {
    let big_n = rows.len() as f64;
    let n = rows[0].len() as f64;
    let mut p_items = Vec::new();
    let mut pj = vec![0.0; categories];
    for r in rows {
        let mut s = 0.0;
        for (j, p) in pj.iter_mut().enumerate() {
            let nij = r.iter().filter(|&&c| c == j).count() as f64;
            s += nij * (nij - 1.0);
            *p += nij;
        }
        p_items.push(s / (n * (n - 1.0)));
    }
    let p_bar = p_items.iter().sum::<f64>() / big_n;
    let pe: f64 = pj.iter().map(|t| (t / (big_n * n)).powi(2)).sum();
    (p_bar - pe) / (1.0 - pe)
}

/// 3×3 median with replicated borders by sorting each window.
pub fn median_sort(data: &[u8], w: usize, h: usize) -> Vec<u8> {
    let mut out = vec![0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut win = Vec::with_capacity(9);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    win.push(data[yy * w + xx]);
                }
            }
            win.sort_unstable();
            out[y * w + x] = win[4];
        }
    }
    out
}

/// Largest singular value of a row-major `rows × cols` matrix.
pub fn top_singular_value(data: &[f64], rows: usize, cols: usize) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(rows, cols, data);
    m.singular_values().max()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// `n` random concentration triples in `[0, 3)³` whose composed optical
/// densities are non-negative under `m`, i.e. physically realisable pixels.
pub fn realizable_concentrations(
    rng: &mut impl Rng,
    n: usize,
    m: &histosynth_core::stain_prep::StainMatrix,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * 3);
    while out.len() < n * 3 {
        let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..3.0));
        let od: [f64; 3] = std::array::from_fn(|ch| (0..3).map(|s| c[s] * m.rows()[s][ch]).sum());
        if od.iter().all(|&v| v >= 0.0) {
            out.extend_from_slice(&c);
        }
    }
    out
}
