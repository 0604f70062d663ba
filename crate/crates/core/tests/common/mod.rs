//! Independent reference computations shared by the integration tests and
//! the acceptance runner. Nothing here calls into the loss or metric code
//! under test.
#![allow(dead_code)]

pub mod gradcheck;

use camadapt::backbone::VitConfig;
use camadapt::synthdata::{CameraProfile, GeneratorConfig, ImageTensor, LabelSet};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Depth-1, D=16, 16x16 model used by the gradient checks.
pub fn smallest_model() -> VitConfig {
    VitConfig {
        image_size: 16,
        patch_size: 8,
        embed_dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
    }
}

pub fn random_image(size: usize, rng: &mut impl Rng) -> ImageTensor {
    ImageTensor::new(Array3::from_shape_fn((size, size, 3), |_| rng.gen::<f32>())).unwrap()
}

pub fn random_labels(rng: &mut impl Rng) -> LabelSet {
    let mut reg = [0f32; 5];
    for v in &mut reg {
        *v = rng.gen_range(-2.0..2.0);
    }
    LabelSet::from_parts(reg, [rng.gen(), rng.gen(), rng.gen()]).unwrap()
}

pub fn small_generator() -> GeneratorConfig {
    GeneratorConfig {
        image_size: 32,
        ..GeneratorConfig::default()
    }
}

/// Strongly separated target camera: heavy blur, colour cast, dark gamma.
pub fn harsh_profile() -> CameraProfile {
    CameraProfile {
        color_matrix: [[0.6, 0.3, 0.1], [0.1, 0.5, 0.1], [0.2, 0.1, 0.9]],
        blur_sigma: 1.5,
        vignette_strength: 0.6,
        gamma: 1.8,
        noise_sigma: 0.02,
        seed_offset: 7,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Weighted squared errors plus weighted `-[y ln p + (1-y) ln(1-p)]`.
pub fn supervised(reg: &[f64; 5], logits: &[f64; 3], labels: &LabelSet, w_rgs: &[f64; 5], w_cls: &[f64; 3]) -> f64 {
    let y = labels.regression();
    let c = labels.classes();
    let mut total = 0.0;
    for k in 0..5 {
        total += w_rgs[k] * (reg[k] - y[k] as f64).powi(2);
    }
    for k in 0..3 {
        let p = sigmoid(logits[k]);
        let t = if c[k] { 1.0 } else { 0.0 };
        total += w_cls[k] * -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
    }
    total
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `relu(x W1 + b1) W2 + b2` with weights stored input-major.
pub fn mlp2(w1: &[Vec<f64>], b1: &[f64], w2: &[Vec<f64>], b2: &[f64], x: &[f64]) -> Vec<f64> {
    let hidden: Vec<f64> = (0..b1.len())
        .map(|j| (b1[j] + x.iter().enumerate().map(|(i, xi)| xi * w1[i][j]).sum::<f64>()).max(0.0))
        .collect();
    (0..b2.len())
        .map(|k| b2[k] + hidden.iter().enumerate().map(|(j, h)| h * w2[j][k]).sum::<f64>())
        .collect()
}

pub fn gaussian_mix(d2: f64, bandwidths: &[f64], weights: &[f64]) -> f64 {
    bandwidths
        .iter()
        .zip(weights)
        .map(|(s, w)| w * (-d2 / (2.0 * s * s)).exp())
        .sum()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Unbiased MMD² by explicit double loops over all index pairs.
pub fn mmd_u(x: &[Vec<f64>], y: &[Vec<f64>], bandwidths: &[f64], weights: &[f64]) -> f64 {
    let k = |a: &[f64], b: &[f64]| gaussian_mix(sq_dist(a, b), bandwidths, weights);
    let (n, m) = (x.len(), y.len());
    let mut kxx = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kxx += k(&x[i], &x[j]);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kyy += k(&y[i], &y[j]);
            }
        }
    }
    let mut kxy = 0.0;
    for a in x {
        for b in y {
            kxy += k(a, b);
        }
    }
    kxx / (n * (n - 1)) as f64 + kyy / (m * (m - 1)) as f64 - 2.0 * kxy / (n * m) as f64
}

/// Paired unbiased MMD² over rows `(x_i, y_i)`.
pub fn mmd_paired(x: &[Vec<f64>], y: &[Vec<f64>], bandwidths: &[f64], weights: &[f64]) -> f64 {
    let k = |a: &[f64], b: &[f64]| gaussian_mix(sq_dist(a, b), bandwidths, weights);
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += k(&x[i], &x[j]) + k(&y[i], &y[j]) - k(&x[i], &y[j]) - k(&x[j], &y[i]);
            }
        }
    }
    s / (n * (n - 1)) as f64
}

/// Median of all pairwise Euclidean distances of the rows.
pub fn median_distance(rows: &[Vec<f64>]) -> f64 {
    let mut d = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(&rows[i], &rows[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    }
}

pub fn random_rows(n: usize, d: usize, shift: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0) + shift).collect())
        .collect()
}

pub fn to_array(rows: &[Vec<f64>]) -> ndarray::Array2<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    ndarray::Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

/// Largest relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Per-tensor comparison of an analytic gradient with central differences
/// of `f`: `||g_fd - g|| / max(||g_fd||, ||g||, floor)` for every tensor.
pub fn finite_difference_errors<T, P>(params: &P, grad: &P, step: f64, floor: f64, f: impl Fn(&P) -> f64) -> Vec<(String, f64)>
where
    T: camadapt::nn::Real,
    P: camadapt::nn::Parameters<T> + Clone,
{
    let base = params.flatten();
    let analytic = grad.flatten();
    let mut spans = Vec::new();
    let mut offset = 0;
    params.visit("", &mut |name, _, v| {
        spans.push((name.to_string(), offset, v.len()));
        offset += v.len();
    });
    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut out = Vec::new();
    for (name, start, len) in spans {
        let (mut diff2, mut fd2, mut an2) = (0.0, 0.0, 0.0);
        for k in start..start + len {
            let x = base[k];
            flat[k] = x + T::lit(step);
            probe.assign_flat(&flat);
            let up = f(&probe);
            flat[k] = x - T::lit(step);
            probe.assign_flat(&flat);
            let down = f(&probe);
            flat[k] = x;
            // the realized step may differ from `step` after rounding
            let h = (x + T::lit(step)).as_f64() - (x - T::lit(step)).as_f64();
            let fd = (up - down) / h;
            let g = analytic[k].as_f64();
            diff2 += (fd - g).powi(2);
            fd2 += fd * fd;
            an2 += g * g;
        }
        let rel = diff2.sqrt() / fd2.sqrt().max(an2.sqrt()).max(floor);
        out.push((name, rel));
    }
    out
}

pub fn worst(errors: &[(String, f64)]) -> (String, f64) {
    errors
        .iter()
        .cloned()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or_default()
}
