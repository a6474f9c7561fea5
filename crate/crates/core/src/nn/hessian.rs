//! Hessian-vector products, Hutchinson trace estimation and power iteration.
//!
//! Everything here works on a [`GradientField`]: something that can report a
//! gradient at an arbitrary parameter point. Logistic models additionally
//! expose their exact Hessian, which is materialized once when small enough.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{axpy, dot, norm, Architecture, Model, ModelView, ParamVector};
use crate::data::GroupedDataset;
use crate::error::{Error, Result};

/// Largest parameter count for which a logistic Hessian is stored densely.
const DENSE_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvpMethod {
    Analytic,
    CentralFiniteDifference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HvpResult {
    pub vector: ParamVector,
    pub method: HvpMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub mean: f64,
    /// Sample standard deviation of the probe values divided by `sqrt(n)`.
    pub std_error: f64,
    pub probes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenEstimate {
    pub value: f64,
    /// Rayleigh quotient after each iteration.
    pub history: Vec<f64>,
}

/// A smooth objective seen through its gradient.
pub trait GradientField: Sync {
    fn dim(&self) -> usize;

    /// Point at which curvature is evaluated.
    fn point(&self) -> &[f64];

    fn gradient_at(&self, theta: &[f64]) -> Vec<f64>;

    /// Exact Hessian-vector product when one is available.
    fn exact_hvp(&self, _v: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// `H v` at the field's point. Uses the exact product when the field offers
/// one and a central difference of gradients otherwise.
pub fn hvp<F: GradientField + ?Sized>(field: &F, v: &[f64]) -> Result<HvpResult> {
    if v.len() != field.dim() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            actual: v.len(),
        });
    }
    let v_norm = norm(v);
    if v_norm == 0.0 || !v_norm.is_finite() {
        return Err(Error::DegenerateDirection(
            "hvp direction must be nonzero and finite",
        ));
    }
    if let Some(h) = field.exact_hvp(v) {
        return Ok(HvpResult {
            vector: h.into(),
            method: HvpMethod::Analytic,
        });
    }
    let theta = field.point();
    let eps = f64::EPSILON.sqrt() * (1.0 + norm(theta)) / v_norm;
    let mut plus = theta.to_vec();
    let mut minus = theta.to_vec();
    axpy(&mut plus, eps, v);
    axpy(&mut minus, -eps, v);
    let gp = field.gradient_at(&plus);
    let gm = field.gradient_at(&minus);
    let inv = 1.0 / (2.0 * eps);
    let vector: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) * inv).collect();
    Ok(HvpResult {
        vector: vector.into(),
        method: HvpMethod::CentralFiniteDifference,
    })
}

/// `v^T H v`; zero for the zero vector.
pub fn quadratic_form<F: GradientField + ?Sized>(field: &F, v: &[f64]) -> Result<f64> {
    if norm(v) == 0.0 {
        return Ok(0.0);
    }
    Ok(dot(v, &hvp(field, v)?.vector))
}

/// Hutchinson estimate of `Tr(H)` from Rademacher probes.
pub fn hutchinson_trace<F: GradientField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    n_probes: usize,
    rng: &mut R,
) -> Result<TraceEstimate> {
    if n_probes == 0 {
        return Err(Error::config("hutchinson_trace needs at least one probe"));
    }
    let d = field.dim();
    let mut samples = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let z: Vec<f64> = (0..d)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        samples.push(dot(&z, &hvp(field, &z)?.vector));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std_error = if samples.len() > 1 {
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        f64::NAN
    };
    Ok(TraceEstimate {
        mean,
        std_error,
        probes: n_probes,
    })
}

/// Power iteration for the largest-magnitude Hessian eigenvalue.
pub fn max_eigenvalue<F: GradientField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    iters: usize,
    rng: &mut R,
) -> Result<EigenEstimate> {
    if iters == 0 {
        return Err(Error::config("max_eigenvalue needs at least one iteration"));
    }
    let d = field.dim();
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut history = Vec::with_capacity(iters);
    for _ in 0..iters {
        let w = hvp(field, &v)?.vector;
        history.push(dot(&v, &w));
        let nw = norm(&w);
        if nw == 0.0 {
            break;
        }
        v = w.iter().map(|x| x / nw).collect();
    }
    let value = *history.last().expect("at least one iteration");
    Ok(EigenEstimate { value, history })
}

/// `0.5 * theta^T A theta`, mainly as a test fixture with known curvature.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    dim: usize,
    /// Row-major `dim x dim`.
    a: Vec<f64>,
    point: Vec<f64>,
}

impl QuadraticObjective {
    pub fn new(dim: usize, a: Vec<f64>, point: Vec<f64>) -> Result<Self> {
        if a.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                actual: a.len(),
            });
        }
        if point.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: point.len(),
            });
        }
        Ok(QuadraticObjective { dim, a, point })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let d = diag.len();
        let mut a = vec![0.0; d * d];
        for (i, &v) in diag.iter().enumerate() {
            a[i * d + i] = v;
        }
        QuadraticObjective {
            dim: d,
            a,
            point: vec![0.0; d],
        }
    }
}

impl GradientField for QuadraticObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn point(&self) -> &[f64] {
        &self.point
    }

    fn gradient_at(&self, theta: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| 0.5 * (self.a[i * d + j] + self.a[j * d + i]) * theta[j])
                    .sum()
            })
            .collect()
    }
}

/// Mean per-sample loss of a model over a fixed subset of rows.
pub struct ModelObjective<'a> {
    model: &'a Model,
    data: &'a GroupedDataset,
    indices: Vec<usize>,
    dense: OnceLock<Option<Vec<f64>>>,
}

impl<'a> ModelObjective<'a> {
    pub fn new(model: &'a Model, data: &'a GroupedDataset, indices: Vec<usize>) -> Result<Self> {
        model.check_input(data)?;
        if indices.is_empty() {
            return Err(Error::config("curvature of an empty subset"));
        }
        Ok(ModelObjective {
            model,
            data,
            indices,
            dense: OnceLock::new(),
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Row-major exact Hessian for logistic models up to the dense size limit.
    pub fn analytic_hessian(&self) -> Option<&[f64]> {
        self.dense.get_or_init(|| self.build_dense()).as_deref()
    }

    fn logistic_shape(&self) -> Option<(usize, usize)> {
        match self.model.architecture() {
            Architecture::Logistic { inputs, outputs } => Some((*inputs, *outputs)),
            _ => None,
        }
    }

    /// Output-space curvature weights for one row: `W[k][l]` so that the
    /// sample Hessian is `sum_kl W[k][l] * (e_k e_l^T kron phi phi^T)`.
    fn logistic_curvature(&self, i: usize, d: usize, k_out: usize) -> Vec<f64> {
        let x = self.data.row(i);
        let p = self.model.params();
        let logits: Vec<f64> = (0..k_out)
            .map(|k| p[k_out * d + k] + dot(&p[k * d..(k + 1) * d], x))
            .collect();
        let mut w = vec![0.0; k_out * k_out];
        if k_out == 1 {
            let s = super::sigmoid(logits[0]);
            w[0] = s * (1.0 - s);
        } else {
            let pr = super::softmax(&logits);
            for k in 0..k_out {
                for l in 0..k_out {
                    w[k * k_out + l] = if k == l { pr[k] } else { 0.0 } - pr[k] * pr[l];
                }
            }
        }
        w
    }

    fn build_dense(&self) -> Option<Vec<f64>> {
        let (d, k_out) = self.logistic_shape()?;
        let dim = self.model.num_params();
        if dim > DENSE_LIMIT {
            return None;
        }
        let n = self.indices.len();
        let f = d + 1;
        // phi rows (features with a trailing 1) and per-row curvature weights
        let mut phi = vec![0.0; n * f];
        let mut weights = Vec::with_capacity(n);
        for (r, &i) in self.indices.iter().enumerate() {
            phi[r * f..r * f + d].copy_from_slice(self.data.row(i));
            phi[r * f + d] = 1.0;
            weights.push(self.logistic_curvature(i, d, k_out));
        }
        let index = |k: usize, j: usize| if j < d { k * d + j } else { k_out * d + k };
        let mut h = vec![0.0; dim * dim];
        let mut scaled = vec![0.0; n * f];
        let mut gram = vec![0.0; f * f];
        for k in 0..k_out {
            for l in k..k_out {
                for r in 0..n {
                    let w = weights[r][k * k_out + l];
                    for c in 0..f {
                        scaled[r * f + c] = w * phi[r * f + c];
                    }
                }
                // gram (f x f) = phi^T (f x n) * scaled (n x f)
                // SAFETY: phi and scaled are n x f row-major, gram is f x f.
                unsafe {
                    matrixmultiply::dgemm(
                        f,
                        n,
                        f,
                        1.0 / n as f64,
                        phi.as_ptr(),
                        1,
                        f as isize,
                        scaled.as_ptr(),
                        f as isize,
                        1,
                        0.0,
                        gram.as_mut_ptr(),
                        f as isize,
                        1,
                    );
                }
                for a in 0..f {
                    for b in 0..f {
                        let v = gram[a * f + b];
                        h[index(k, a) * dim + index(l, b)] = v;
                        h[index(l, b) * dim + index(k, a)] = v;
                    }
                }
            }
        }
        Some(h)
    }

    fn streaming_logistic_hvp(&self, v: &[f64], d: usize, k_out: usize) -> Vec<f64> {
        let dim = v.len();
        let index = |k: usize, j: usize| if j < d { k * d + j } else { k_out * d + k };
        let partial: Vec<Vec<f64>> = self
            .indices
            .par_chunks(64)
            .map(|chunk| {
                let mut acc = vec![0.0; dim];
                for &i in chunk {
                    let x = self.data.row(i);
                    let w = self.logistic_curvature(i, d, k_out);
                    let u: Vec<f64> = (0..k_out)
                        .map(|k| dot(&v[k * d..(k + 1) * d], x) + v[index(k, d)])
                        .collect();
                    for k in 0..k_out {
                        let s: f64 = (0..k_out).map(|l| w[k * k_out + l] * u[l]).sum();
                        axpy(&mut acc[k * d..(k + 1) * d], s, x);
                        acc[index(k, d)] += s;
                    }
                }
                acc
            })
            .collect();
        let mut out = vec![0.0; dim];
        for p in &partial {
            axpy(&mut out, 1.0, p);
        }
        let inv = 1.0 / self.indices.len() as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        out
    }
}

impl GradientField for ModelObjective<'_> {
    fn dim(&self) -> usize {
        self.model.num_params()
    }

    fn point(&self) -> &[f64] {
        self.model.params()
    }

    fn gradient_at(&self, theta: &[f64]) -> Vec<f64> {
        ModelView::new(self.model.architecture(), theta)
            .mean_gradient(self.data, &self.indices)
            .into_vec()
    }

    fn exact_hvp(&self, v: &[f64]) -> Option<Vec<f64>> {
        let (d, k_out) = self.logistic_shape()?;
        if let Some(h) = self.analytic_hessian() {
            let dim = v.len();
            return Some(
                (0..dim)
                    .map(|r| dot(&h[r * dim..(r + 1) * dim], v))
                    .collect(),
            );
        }
        Some(self.streaming_logistic_hvp(v, d, k_out))
    }
}
