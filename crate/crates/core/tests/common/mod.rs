#![allow(dead_code)]

use fttn::{EmbeddedImage, ModelShape, Tensor, LOCAL_DIM};

/// Class scores by explicit enumeration of every bond configuration.
///
/// Sites are read with the uniform `[left, d, right, labels]` layout, which
/// the boundary and label-site shapes all reduce to.
pub fn brute_force_scores(shape: &ModelShape, sites: &[Tensor], image: &EmbeddedImage) -> Vec<f64> {
    let n = shape.n_sites;
    let chi = shape.bond_dim;
    let phys = image.sites();
    let bonds = n - 1;
    let configs = chi.pow(bonds as u32);
    let mut out = vec![0.0; shape.num_classes];
    for (l, out_l) in out.iter_mut().enumerate() {
        for c in 0..configs {
            let mut alpha = vec![0usize; bonds];
            let mut rest = c;
            for a in alpha.iter_mut() {
                *a = rest % chi;
                rest /= chi;
            }
            let mut prod = 1.0;
            for k in 0..n {
                let dims = shape.site_dims(k);
                let left = if k == 0 { 0 } else { alpha[k - 1] };
                let right = if k + 1 == n { 0 } else { alpha[k] };
                let lab = if k == shape.label_site { l } else { 0 };
                let mut s_sum = 0.0;
                for s in 0..LOCAL_DIM {
                    let idx = ((left * LOCAL_DIM + s) * dims.right_len() + right) * dims.label_len() + lab;
                    s_sum += sites[k].data()[idx] * phys[k][s];
                }
                prod *= s_sum;
            }
            *out_l += prod;
        }
    }
    out
}

/// Cross-entropy of `softmax(scores * scale)` at `label`.
pub fn cross_entropy(scores: &[f64], scale: f64, label: usize) -> f64 {
    let z: Vec<f64> = scores.iter().map(|v| v * scale).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[label]
}

/// Deterministic pseudo-random values in `[lo, hi)` without pulling in an RNG.
pub fn lcg_values(seed: u64, count: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..count)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            lo + (hi - lo) * u
        })
        .collect()
}

pub fn random_image(seed: u64, n: usize) -> Vec<f64> {
    lcg_values(seed ^ 0x5eed, n, 0.0, 1.0)
}

pub fn random_model(shape: ModelShape, seed: u64, lo: f64, hi: f64) -> fttn::MpsClassifier {
    let sites = (0..shape.n_sites)
        .map(|k| {
            let dims = shape.site_dims(k).weight_shape();
            let len = dims.iter().product();
            Tensor::new(dims, lcg_values(seed * 131 + k as u64, len, lo, hi)).unwrap()
        })
        .collect();
    fttn::MpsClassifier::from_sites(shape, sites).unwrap()
}

pub fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// `values` of two scaled vectors brought onto a common exponent.
pub fn aligned(a: &fttn::ScaledVector, b: &fttn::ScaledVector) -> (Vec<f64>, Vec<f64>) {
    let shift = (b.exponent() - a.exponent()) as i32;
    let factor = 2f64.powi(shift);
    (a.values.clone(), b.values.iter().map(|v| v * factor).collect())
}
