//! Excessive-risk diagnostics for clipped private training.
//!
//! At an evaluation point the clipping term of the second-order risk expansion
//! is computed two ways: directly from the clipped and unclipped batch
//! gradients, and as the sum of a magnitude part and a direction part obtained
//! through the alignment operator `M_B`. The two routes share batch statistics
//! but no intermediate results, so their agreement is a real check.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::GroupedDataset;
use crate::error::{Error, Result};
use crate::mechanisms::BatchRecord;
use crate::nn::hessian::quadratic_form;
use crate::nn::{
    dot, hutchinson_trace, max_eigenvalue, norm, GradientField, Model, ModelObjective, ParamVector,
    SubsetEval,
};

/// Below this distance between unit vectors the rotation is the identity.
const COLINEAR_TOL: f64 = 1e-14;

/// Orthogonal operator acting in a 2-plane, stored as two Householder normals.
#[derive(Debug, Clone, PartialEq)]
pub enum Rotation {
    Identity,
    Reflections { n1: Vec<f64>, n2: Vec<f64> },
}

fn reflect(n: &[f64], v: &mut [f64]) {
    let c = 2.0 * dot(n, v);
    for (x, ni) in v.iter_mut().zip(n) {
        *x -= c * ni;
    }
}

impl Rotation {
    pub fn apply(&self, v: &[f64]) -> ParamVector {
        let mut out = v.to_vec();
        if let Rotation::Reflections { n1, n2 } = self {
            reflect(n1, &mut out);
            reflect(n2, &mut out);
        }
        out.into()
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Rotation::Identity)
    }
}

/// `g_clipped = scale * M g` with `M` the minimal rotation taking the direction
/// of `g` onto the direction of `g_clipped`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentDecomposition {
    pub scale: f64,
    pub rotation: Rotation,
}

impl AlignmentDecomposition {
    /// `M v`
    pub fn rotate(&self, v: &[f64]) -> ParamVector {
        self.rotation.apply(v)
    }

    /// `scale * M v`
    pub fn reconstruct(&self, v: &[f64]) -> ParamVector {
        let mut out = self.rotation.apply(v);
        out.scale_in_place(self.scale);
        out
    }
}

pub fn decompose(g_b: &[f64], g_b_clipped: &[f64]) -> Result<AlignmentDecomposition> {
    if g_b.len() != g_b_clipped.len() {
        return Err(Error::DimensionMismatch {
            expected: g_b.len(),
            actual: g_b_clipped.len(),
        });
    }
    let ng = norm(g_b);
    if ng == 0.0 {
        return Err(Error::DegenerateDirection("batch gradient is zero"));
    }
    let nc = norm(g_b_clipped);
    if nc == 0.0 {
        return Ok(AlignmentDecomposition {
            scale: 0.0,
            rotation: Rotation::Identity,
        });
    }
    let scale = nc / ng;
    let u: Vec<f64> = g_b.iter().map(|v| v / ng).collect();
    let w: Vec<f64> = g_b_clipped.iter().map(|v| v / nc).collect();
    let c = dot(&u, &w);
    let unit = |v: Vec<f64>| -> Option<Vec<f64>> {
        let n = norm(&v);
        (n > 0.0).then(|| v.into_iter().map(|x| x / n).collect())
    };
    let rotation = if c >= 0.0 {
        let diff: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a - b).collect();
        if norm(&diff) < COLINEAR_TOL {
            Rotation::Identity
        } else {
            // first reflection sends u to -w, the second sends -w to w
            let n1 = unit(u.iter().zip(&w).map(|(a, b)| a + b).collect())
                .ok_or(Error::DegenerateDirection("sum of unit vectors vanished"))?;
            Rotation::Reflections { n1, n2: w }
        }
    } else {
        // first reflection sends u to w, the second fixes w
        let n1 = unit(u.iter().zip(&w).map(|(a, b)| a - b).collect()).ok_or(
            Error::DegenerateDirection("difference of unit vectors vanished"),
        )?;
        let mut perp: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a - c * b).collect();
        // second pass: near antiparallel the first loses orthogonality to w
        let c2 = dot(&perp, &w);
        for (p, b) in perp.iter_mut().zip(&w) {
            *p -= c2 * b;
        }
        let m = if norm(&perp) > 1e-12 {
            unit(perp).expect("nonzero")
        } else {
            orthogonal_to(&w)?
        };
        Rotation::Reflections { n1, n2: m }
    };
    Ok(AlignmentDecomposition { scale, rotation })
}

/// A unit vector orthogonal to the unit vector `w`.
fn orthogonal_to(w: &[f64]) -> Result<Vec<f64>> {
    if w.len() < 2 {
        return Err(Error::DegenerateDirection(
            "antiparallel vectors in one dimension admit no rotation",
        ));
    }
    let j = (0..w.len())
        .min_by(|&a, &b| w[a].abs().partial_cmp(&w[b].abs()).expect("finite"))
        .expect("nonempty");
    let mut v: Vec<f64> = w.iter().map(|x| -w[j] * x).collect();
    v[j] += 1.0;
    let n = norm(&v);
    Ok(v.into_iter().map(|x| x / n).collect())
}

/// Per-batch quantities entering the risk terms for one group.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RecordTerms {
    pub scale: f64,
    pub g_norm: f64,
    pub g_clipped_norm: f64,
    pub cos_theta: f64,
    pub cos_theta_clipped: f64,
    /// `<g_Da, g - g_clipped>`
    pub ip_clip: f64,
    /// `<g_Da, (1 - s) g>`
    pub ip_mag: f64,
    /// `<g_Da, s (g - M g)>`
    pub ip_dir: f64,
    /// `g^T H g`
    pub q_g: f64,
    /// `g_clipped^T H g_clipped`
    pub q_clipped: f64,
    /// `(M g)^T H (M g)`
    pub q_rotated: f64,
}

pub fn record_terms<F: GradientField + ?Sized>(
    field: &F,
    g_da: &[f64],
    record: &BatchRecord,
) -> Result<RecordTerms> {
    let g = &record.g_b;
    let gc = &record.g_b_clipped;
    let g_norm = norm(g);
    if g_norm == 0.0 {
        return Ok(RecordTerms::default());
    }
    let dec = decompose(g, gc)?;
    let s = dec.scale;
    let mg = dec.rotate(g);
    let diff: Vec<f64> = g.iter().zip(gc.iter()).map(|(a, b)| a - b).collect();
    let rot_err: Vec<f64> = g.iter().zip(mg.iter()).map(|(a, b)| s * (a - b)).collect();
    Ok(RecordTerms {
        scale: s,
        g_norm,
        g_clipped_norm: norm(gc),
        cos_theta: crate::nn::cosine(g_da, g),
        cos_theta_clipped: crate::nn::cosine(g_da, gc),
        ip_clip: dot(g_da, &diff),
        ip_mag: (1.0 - s) * dot(g_da, g),
        ip_dir: dot(g_da, &rot_err),
        q_g: quadratic_form(field, g)?,
        q_clipped: quadratic_form(field, gc)?,
        q_rotated: if dec.rotation.is_identity() {
            quadratic_form(field, g)?
        } else {
            quadratic_form(field, &mg)?
        },
    })
}

fn mean_of(terms: &[RecordTerms], f: impl Fn(&RecordTerms) -> f64) -> f64 {
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().map(f).sum::<f64>() / terms.len() as f64
    }
}

/// `(R_clip, R_noise)` from precomputed record terms.
pub fn clip_terms_from(
    terms: &[RecordTerms],
    eta: f64,
    c0: f64,
    sigma: f64,
    trace_h: f64,
) -> (f64, f64) {
    let first = eta * mean_of(terms, |t| t.ip_clip);
    let second = 0.5 * eta * eta * mean_of(terms, |t| t.q_clipped - t.q_g);
    let noise = 0.5 * eta * eta * trace_h * c0 * c0 * sigma * sigma;
    (first + second, noise)
}

/// `(R_mag, R_dir)` from precomputed record terms.
pub fn mag_dir_from(terms: &[RecordTerms], eta: f64) -> (f64, f64) {
    let r_mag = eta * mean_of(terms, |t| t.ip_mag)
        + 0.5 * eta * eta * mean_of(terms, |t| (t.scale * t.scale - 1.0) * t.q_g);
    let r_dir = eta * mean_of(terms, |t| t.ip_dir)
        + 0.5 * eta * eta * mean_of(terms, |t| t.scale * t.scale * (t.q_rotated - t.q_g));
    (r_mag, r_dir)
}

/// Clipping and noise terms of the second-order excess risk of one group.
/// `trace_h` is the trace of that group's loss Hessian.
pub fn risk_clip_terms<F: GradientField + ?Sized>(
    field: &F,
    g_da: &[f64],
    records: &[BatchRecord],
    eta: f64,
    c0: f64,
    sigma: f64,
    trace_h: f64,
) -> Result<(f64, f64)> {
    let mut first = 0.0;
    let mut second = 0.0;
    for r in records {
        let diff: Vec<f64> = r
            .g_b
            .iter()
            .zip(r.g_b_clipped.iter())
            .map(|(a, b)| a - b)
            .collect();
        first += dot(g_da, &diff);
        second += quadratic_form(field, &r.g_b_clipped)? - quadratic_form(field, &r.g_b)?;
    }
    let n = records.len().max(1) as f64;
    Ok((
        eta * first / n + 0.5 * eta * eta * second / n,
        0.5 * eta * eta * trace_h * c0 * c0 * sigma * sigma,
    ))
}

/// Magnitude and direction parts of the clipping term of one group.
pub fn risk_mag_dir<F: GradientField + ?Sized>(
    field: &F,
    g_da: &[f64],
    records: &[BatchRecord],
    eta: f64,
) -> Result<(f64, f64)> {
    let terms = records
        .iter()
        .map(|r| record_terms(field, g_da, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(mag_dir_from(&terms, eta))
}

/// Relative disagreement between `R_mag + R_dir` and `R_clip`.
pub fn identity_residual(r_mag: f64, r_dir: f64, r_clip: f64) -> f64 {
    let scale = r_mag.abs().max(r_dir.abs()).max(r_clip.abs());
    if scale == 0.0 {
        0.0
    } else {
        (r_mag + r_dir - r_clip).abs() / scale
    }
}

/// Batch statistics of one group entering the lower bound on the direction gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundStats {
    /// `||g_Da||`
    pub g_norm: f64,
    /// `E[||g_clipped|| (cos theta - cos theta_clipped)]`
    pub misalignment: f64,
    /// `E[||g_clipped||^2]`
    pub clipped_sq: f64,
}

impl BoundStats {
    pub fn from_terms(g_da_norm: f64, terms: &[RecordTerms]) -> Self {
        BoundStats {
            g_norm: g_da_norm,
            misalignment: mean_of(terms, |t| {
                t.g_clipped_norm * (t.cos_theta - t.cos_theta_clipped)
            }),
            clipped_sq: mean_of(terms, |t| t.g_clipped_norm * t.g_clipped_norm),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisparityBound {
    pub lhs: f64,
    pub rhs: f64,
    /// Whether the direction error is predicted to hurt group a more than b.
    pub predicted: bool,
    /// Implied lower bound on `R_dir_a - R_dir_b`.
    pub lower_bound: f64,
}

/// `None` when group a's full gradient vanishes.
pub fn disparity_bound(a: &BoundStats, b: &BoundStats, eta: f64) -> Option<DisparityBound> {
    if a.g_norm == 0.0 {
        return None;
    }
    let lhs = a.misalignment;
    let rhs = (b.g_norm / a.g_norm) * b.misalignment + a.clipped_sq / a.g_norm;
    Some(DisparityBound {
        lhs,
        rhs,
        predicted: lhs > rhs,
        lower_bound: eta * (a.g_norm * lhs - a.g_norm * rhs),
    })
}

/// Knobs of the evaluation-point diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSettings {
    pub eta: f64,
    pub c0: f64,
    pub sigma: f64,
    pub hutchinson_probes: usize,
    pub power_iters: usize,
    /// Cap on rows per group used for curvature; `None` uses the whole group.
    pub hessian_rows: Option<usize>,
    /// Groups to diagnose; `None` means all.
    pub groups: Option<Vec<u32>>,
    pub seed: u64,
}

/// Diagnostics of one group at one evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRisk {
    pub group: u32,
    pub batches: usize,
    pub g_da_norm: f64,
    pub mean_g_b_norm: f64,
    pub mean_g_b_clipped_norm: f64,
    /// Mean angle between `g_Da` and `g_B`, radians.
    pub theta: f64,
    /// Mean angle between `g_Da` and the clipped batch gradient, radians.
    pub theta_clipped: f64,
    pub r_clip: f64,
    pub r_noise: f64,
    pub r_mag: f64,
    pub r_dir: f64,
    pub identity_residual: f64,
    pub trace: f64,
    pub trace_std_error: f64,
    pub lambda_max: f64,
    /// `eta * lambda_max <= 1`
    pub eigen_condition: bool,
    #[serde(skip)]
    pub bound_stats: Option<BoundStats>,
}

/// Lower-bound evaluation for one ordered pair of groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBound {
    pub group_a: u32,
    pub group_b: u32,
    pub lhs: f64,
    pub rhs: f64,
    pub predicted: bool,
    pub lower_bound: f64,
    /// Measured `R_dir_a - R_dir_b`.
    pub measured_gap: f64,
    pub eigen_condition: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub step: usize,
    pub groups: Vec<GroupRisk>,
    pub pairs: Vec<PairBound>,
}

/// Full diagnostics at the current parameters from the batches realized since
/// the previous evaluation point.
pub fn diagnose(
    model: &Model,
    data: &GroupedDataset,
    records: &[BatchRecord],
    step: usize,
    settings: &DiagnosticSettings,
) -> Result<RiskReport> {
    let groups = match &settings.groups {
        Some(g) => g.clone(),
        None => data.group_ids(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(
        settings.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let mut out = Vec::with_capacity(groups.len());
    for &g in &groups {
        let rows = data.group_indices(g);
        if rows.is_empty() {
            return Err(Error::EmptyGroup(g));
        }
        let g_da = model.mean_gradient(data, &rows)?;
        let mut curv_rows = rows;
        if let Some(cap) = settings.hessian_rows {
            if curv_rows.len() > cap {
                curv_rows.shuffle(&mut rng);
                curv_rows.truncate(cap);
                curv_rows.sort_unstable();
            }
        }
        let field = ModelObjective::new(model, data, curv_rows)?;
        let terms = records
            .iter()
            .map(|r| record_terms(&field, &g_da, r))
            .collect::<Result<Vec<_>>>()?;
        let trace = hutchinson_trace(&field, settings.hutchinson_probes, &mut rng)?;
        let eig = max_eigenvalue(&field, settings.power_iters, &mut rng)?;
        let (r_clip, r_noise) = clip_terms_from(
            &terms,
            settings.eta,
            settings.c0,
            settings.sigma,
            trace.mean,
        );
        let (r_mag, r_dir) = mag_dir_from(&terms, settings.eta);
        let live: Vec<&RecordTerms> = terms.iter().filter(|t| t.g_norm > 0.0).collect();
        let avg = |f: &dyn Fn(&RecordTerms) -> f64| {
            if live.is_empty() {
                0.0
            } else {
                live.iter().map(|t| f(t)).sum::<f64>() / live.len() as f64
            }
        };
        out.push(GroupRisk {
            group: g,
            batches: records.len(),
            g_da_norm: g_da.norm(),
            mean_g_b_norm: avg(&|t| t.g_norm),
            mean_g_b_clipped_norm: avg(&|t| t.g_clipped_norm),
            theta: avg(&|t| t.cos_theta.acos()),
            theta_clipped: avg(&|t| t.cos_theta_clipped.acos()),
            r_clip,
            r_noise,
            r_mag,
            r_dir,
            identity_residual: identity_residual(r_mag, r_dir, r_clip),
            trace: trace.mean,
            trace_std_error: trace.std_error,
            lambda_max: eig.value,
            eigen_condition: settings.eta * eig.value <= 1.0,
            bound_stats: Some(BoundStats::from_terms(g_da.norm(), &terms)),
        });
    }
    let mut pairs = Vec::new();
    for a in &out {
        for b in &out {
            if a.group == b.group {
                continue;
            }
            let (sa, sb) = (a.bound_stats.expect("set"), b.bound_stats.expect("set"));
            if let Some(p) = disparity_bound(&sa, &sb, settings.eta) {
                pairs.push(PairBound {
                    group_a: a.group,
                    group_b: b.group,
                    lhs: p.lhs,
                    rhs: p.rhs,
                    predicted: p.predicted,
                    lower_bound: p.lower_bound,
                    measured_gap: a.r_dir - b.r_dir,
                    eigen_condition: a.eigen_condition && b.eigen_condition,
                });
            }
        }
    }
    Ok(RiskReport {
        step,
        groups: out,
        pairs,
    })
}

/// Mean and standard error over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> MeanSe {
        let n = values.len();
        if n == 0 {
            return MeanSe {
                mean: f64::NAN,
                se: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        MeanSe { mean, se }
    }
}

/// Test-set evaluation of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub groups: BTreeMap<u32, SubsetEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: u32,
    /// Percent.
    pub accuracy: MeanSe,
    pub loss: MeanSe,
    /// Accuracy drop against the mean nonprivate accuracy, percentage points.
    pub privacy_cost: MeanSe,
    /// Loss increase against the mean nonprivate loss.
    pub excessive_risk: MeanSe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapMetrics {
    pub group_a: u32,
    pub group_b: u32,
    pub privacy_cost_gap: MeanSe,
    pub risk_gap: MeanSe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessMetrics {
    pub groups: Vec<GroupMetrics>,
    pub gaps: Vec<GapMetrics>,
}

impl FairnessMetrics {
    pub fn group(&self, g: u32) -> Option<&GroupMetrics> {
        self.groups.iter().find(|m| m.group == g)
    }

    pub fn gap(&self, a: u32, b: u32) -> Option<&GapMetrics> {
        self.gaps
            .iter()
            .find(|m| (m.group_a, m.group_b) == (a, b) || (m.group_a, m.group_b) == (b, a))
    }
}

/// Per-group privacy cost and excessive risk against the mean nonprivate run,
/// aggregated over seeds, plus all pairwise gaps.
pub fn final_metrics(private: &[SeedResult], baseline: &[SeedResult]) -> Result<FairnessMetrics> {
    if baseline.is_empty() {
        return Err(Error::MissingBaseline("no nonprivate runs".into()));
    }
    if private.is_empty() {
        return Err(Error::config("no private runs to summarize"));
    }
    let groups: Vec<u32> = private[0].groups.keys().copied().collect();
    for r in private.iter().chain(baseline) {
        if r.groups.keys().copied().collect::<Vec<_>>() != groups {
            return Err(Error::config(format!(
                "seed {} has a different group set",
                r.seed
            )));
        }
    }
    let base_acc: BTreeMap<u32, f64> = groups
        .iter()
        .map(|&g| {
            (
                g,
                MeanSe::of(
                    &baseline
                        .iter()
                        .map(|r| 100.0 * r.groups[&g].accuracy)
                        .collect::<Vec<_>>(),
                )
                .mean,
            )
        })
        .collect();
    let base_loss: BTreeMap<u32, f64> = groups
        .iter()
        .map(|&g| {
            (
                g,
                MeanSe::of(
                    &baseline
                        .iter()
                        .map(|r| r.groups[&g].loss)
                        .collect::<Vec<_>>(),
                )
                .mean,
            )
        })
        .collect();
    let pi = |r: &SeedResult, g: u32| base_acc[&g] - 100.0 * r.groups[&g].accuracy;
    let risk = |r: &SeedResult, g: u32| r.groups[&g].loss - base_loss[&g];
    let per_seed =
        |f: &dyn Fn(&SeedResult) -> f64| MeanSe::of(&private.iter().map(f).collect::<Vec<_>>());

    let group_metrics = groups
        .iter()
        .map(|&g| GroupMetrics {
            group: g,
            accuracy: per_seed(&|r| 100.0 * r.groups[&g].accuracy),
            loss: per_seed(&|r| r.groups[&g].loss),
            privacy_cost: per_seed(&|r| pi(r, g)),
            excessive_risk: per_seed(&|r| risk(r, g)),
        })
        .collect();
    let mut gaps = Vec::new();
    for (i, &a) in groups.iter().enumerate() {
        for &b in &groups[i + 1..] {
            let pg = per_seed(&|r| pi(r, a) - pi(r, b));
            let rg = per_seed(&|r| risk(r, a) - risk(r, b));
            gaps.push(GapMetrics {
                group_a: a,
                group_b: b,
                privacy_cost_gap: MeanSe {
                    mean: pg.mean.abs(),
                    se: pg.se,
                },
                risk_gap: MeanSe {
                    mean: rg.mean.abs(),
                    se: rg.se,
                },
            });
        }
    }
    Ok(FairnessMetrics {
        groups: group_metrics,
        gaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colinear_pair_gives_identity() {
        let g = [1.0, -2.0, 3.0];
        let d = decompose(&g, &[0.5, -1.0, 1.5]).unwrap();
        assert!(d.rotation.is_identity());
        assert!((d.scale - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_clipped_gradient() {
        let d = decompose(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(d.scale, 0.0);
        assert!(d.rotation.is_identity());
        assert!(decompose(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn antiparallel_in_one_dimension_fails() {
        assert!(decompose(&[1.0], &[-2.0]).is_err());
        let d = decompose(&[1.0, 0.0], &[-2.0, 0.0]).unwrap();
        let r = d.reconstruct(&[1.0, 0.0]);
        assert!((r[0] + 2.0).abs() < 1e-12 && r[1].abs() < 1e-12);
    }

    #[test]
    fn residual_of_zeros_is_zero() {
        assert_eq!(identity_residual(0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn mean_se_single_value() {
        let m = MeanSe::of(&[3.0]);
        assert_eq!((m.mean, m.se), (3.0, 0.0));
    }
}
