#![allow(dead_code)] // each test target compiles its own subset of these

//! Independent reference implementations (oracles) shared by the property
//! and acceptance suites. These deliberately use the slow, obvious
//! formulation of each quantity and never call the library path they check.

use pathshift::embedstore::ClassLabel;
use pathshift::metrics::ScoredPatch;
use pathshift::preprocess::{GrayHistogram, RGBPatch};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Pairwise AUC: wins count 1, ties 0.5, over all (tumor, normal) pairs.
pub fn brute_force_auc(items: &[ScoredPatch]) -> f64 {
    let positives: Vec<f64> = items
        .iter()
        .filter(|i| i.label == ClassLabel::Tumor)
        .map(|i| i.score)
        .collect();
    let negatives: Vec<f64> = items
        .iter()
        .filter(|i| i.label == ClassLabel::Normal)
        .map(|i| i.score)
        .collect();
    let mut total = 0.0;
    for &p in &positives {
        for &n in &negatives {
            if p > n {
                total += 1.0;
            } else if p == n {
                total += 0.5;
            }
        }
    }
    total / (positives.len() as f64 * negatives.len() as f64)
}

/// Exhaustive Otsu: recompute class weights and means from scratch for all
/// 256 candidate thresholds.
pub fn brute_force_otsu(h: &GrayHistogram) -> u8 {
    let mut best_t = 0u8;
    let mut best = f64::NEG_INFINITY;
    for t in 0..=255usize {
        let w0: u128 = h.bins()[..=t].iter().map(|&b| b as u128).sum();
        let w1: u128 = h.bins()[t + 1..].iter().map(|&b| b as u128).sum();
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let s0: u128 = h.bins()[..=t]
            .iter()
            .enumerate()
            .map(|(i, &b)| i as u128 * b as u128)
            .sum();
        let s1: u128 = h.bins()[t + 1..]
            .iter()
            .enumerate()
            .map(|(i, &b)| (i + t + 1) as u128 * b as u128)
            .sum();
        let mu0 = s0 as f64 / w0 as f64;
        let mu1 = s1 as f64 / w1 as f64;
        let variance = w0 as f64 * w1 as f64 * (mu0 - mu1) * (mu0 - mu1);
        if variance > best {
            best = variance;
            best_t = t as u8;
        }
    }
    best_t
}

/// Plain box-filter downscale: mean of the source box behind each output
/// pixel. A crude but unambiguous anti-aliasing reference.
pub fn box_filter_resize(p: &RGBPatch, out_w: usize, out_h: usize) -> Vec<[f64; 3]> {
    let sx = p.width() as f64 / out_w as f64;
    let sy = p.height() as f64 / out_h as f64;
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let x0 = (ox as f64 * sx).floor() as usize;
            let x1 = (((ox + 1) as f64 * sx).ceil() as usize).min(p.width());
            let y0 = (oy as f64 * sy).floor() as usize;
            let y1 = (((oy + 1) as f64 * sy).ceil() as usize).min(p.height());
            let mut acc = [0.0f64; 3];
            let mut count = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let px = p.pixel(x, y);
                    for c in 0..3 {
                        acc[c] += px[c] as f64;
                    }
                    count += 1.0;
                }
            }
            out.push([acc[0] / count, acc[1] / count, acc[2] / count]);
        }
    }
    out
}

pub fn unit3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

pub fn cosine3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| x * y).sum()
}

/// Renders a two-stain patch from known unit basis vectors with uniform
/// random concentrations in [0, 2).
pub fn synthetic_stain_patch(h: [f64; 3], e: [f64; 3], side: usize, seed: u64) -> RGBPatch {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(side * side * 3);
    for _ in 0..side * side {
        let ch: f64 = rng.random_range(0.0..2.0);
        let ce: f64 = rng.random_range(0.0..2.0);
        for k in 0..3 {
            let od = h[k] * ch + e[k] * ce;
            data.push((255.0 * 10f64.powf(-od)).round().clamp(0.0, 255.0) as u8);
        }
    }
    RGBPatch::new(side, side, data).unwrap()
}

/// A jittered H&E-like basis pair; hematoxylin keeps the larger blue
/// component so recovered column order matches the ground truth.
pub fn random_stain_basis(rng: &mut ChaCha12Rng) -> ([f64; 3], [f64; 3]) {
    let jitter = |rng: &mut ChaCha12Rng| rng.random_range(-0.05..0.05);
    let h = unit3([
        0.65 + jitter(rng),
        0.70 + jitter(rng),
        0.29 + jitter(rng),
    ]);
    let e = unit3([
        0.07 + jitter(rng).abs(),
        0.99 + jitter(rng),
        0.11 + jitter(rng),
    ]);
    (h, e)
}

/// Two Gaussian clusters split along the first coordinate: tumor at +offset,
/// normal at -offset, unit per-dimension noise.
pub fn gaussian_clusters(
    dims: usize,
    per_class: usize,
    offset: f64,
    seed: u64,
) -> (pathshift::embedstore::EmbeddingMatrix, Vec<ClassLabel>) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(2 * per_class);
    let mut labels = Vec::with_capacity(2 * per_class);
    for (class, sign) in [(ClassLabel::Tumor, 1.0), (ClassLabel::Normal, -1.0)] {
        for _ in 0..per_class {
            let mut row: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect();
            row[0] += sign * offset;
            rows.push(row);
            labels.push(class);
        }
    }
    (
        pathshift::embedstore::EmbeddingMatrix::from_rows(&rows).unwrap(),
        labels,
    )
}
