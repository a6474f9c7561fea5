#![allow(dead_code)]

use fairdp::data::{GroupedDataset, Split};
use fairdp::nn::{Architecture, Model};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gaussian features, labels from a noisy linear rule, groups alternating
/// with a skew so that group 1 is smaller.
pub fn synthetic(n: usize, dim: usize, classes: usize, seed: u64) -> GroupedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let s: f64 =
            x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + rng.random_range(-0.3..0.3);
        let label = if classes == 2 {
            (s > 0.0) as u32
        } else {
            ((s.abs() * 3.0) as usize % classes) as u32
        };
        let group = (rng.random::<f64>() < 0.3) as u32;
        features.extend(x);
        labels.push(label);
        groups.push(group);
    }
    GroupedDataset::new(
        "synthetic",
        Split::Train,
        dim,
        features,
        labels,
        groups,
        classes,
    )
    .unwrap()
}

pub fn random_vec(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-300)
}

fn logistic_shape(model: &Model) -> (usize, usize) {
    match model.architecture() {
        Architecture::Logistic { inputs, outputs } => (*inputs, *outputs),
        _ => panic!("logistic model expected"),
    }
}

fn logistic_probabilities(model: &Model, x: &[f64]) -> Vec<f64> {
    let (d, k) = logistic_shape(model);
    let p = model.params();
    let z: Vec<f64> = (0..k)
        .map(|c| p[k * d + c] + dot(&p[c * d..(c + 1) * d], x))
        .collect();
    if k == 1 {
        vec![1.0 / (1.0 + (-z[0]).exp())]
    } else {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }
}

/// Position of weight `feat` of output `class`; `feat == d` is the bias.
fn logistic_index(d: usize, k: usize, class: usize, feat: usize) -> usize {
    if feat < d {
        class * d + feat
    } else {
        k * d + class
    }
}

/// Per-sample cross-entropy gradient of a logistic model from the textbook
/// formula `(p - y) [x; 1]`.
pub fn logistic_gradient_oracle(model: &Model, data: &GroupedDataset, i: usize) -> Vec<f64> {
    let (d, k) = logistic_shape(model);
    let x = data.row(i);
    let pr = logistic_probabilities(model, x);
    let y = data.label(i) as usize;
    let mut g = vec![0.0; model.num_params()];
    for c in 0..k {
        let target = if k == 1 {
            y as f64
        } else {
            (c == y) as u8 as f64
        };
        let r = pr[c] - target;
        for f in 0..=d {
            let xf = if f < d { x[f] } else { 1.0 };
            g[logistic_index(d, k, c, f)] += r * xf;
        }
    }
    g
}

/// Dense Hessian of the mean cross-entropy of a logistic model over `rows`,
/// assembled from the textbook formula with its own softmax.
pub fn logistic_hessian_rows(model: &Model, data: &GroupedDataset, rows: &[usize]) -> DMatrix<f64> {
    let (d, k) = logistic_shape(model);
    let dim = model.num_params();
    let mut h = DMatrix::zeros(dim, dim);
    for &i in rows {
        let x = data.row(i);
        let mut phi = x.to_vec();
        phi.push(1.0);
        let pr = logistic_probabilities(model, x);
        let curv: Vec<Vec<f64>> = if k == 1 {
            vec![vec![pr[0] * (1.0 - pr[0])]]
        } else {
            (0..k)
                .map(|a| {
                    (0..k)
                        .map(|b| if a == b { pr[a] } else { 0.0 } - pr[a] * pr[b])
                        .collect()
                })
                .collect()
        };
        for a in 0..k {
            for b in 0..k {
                for (fa, xa) in phi.iter().enumerate() {
                    for (fb, xb) in phi.iter().enumerate() {
                        h[(logistic_index(d, k, a, fa), logistic_index(d, k, b, fb))] +=
                            curv[a][b] * xa * xb;
                    }
                }
            }
        }
    }
    h / rows.len() as f64
}

pub fn logistic_hessian_oracle(model: &Model, data: &GroupedDataset) -> DMatrix<f64> {
    let rows: Vec<usize> = (0..data.len()).collect();
    logistic_hessian_rows(model, data, &rows)
}
