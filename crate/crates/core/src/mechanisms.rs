//! Poisson sampling, per-sample clipping and scaling rules, Gaussian noising
//! and the training state that ties them together.
//!
//! Every private mechanism here except DPSGD-F bounds each sample's
//! contribution to the summed gradient by `C0`, so a single sampled Gaussian
//! event with noise multiplier `sigma1` describes the gradient release.
//! DPSGD-F clips group `k` at its noisy `C_k`, which can exceed `C0`, while
//! its gradient noise stays at `sigma1 * C0`. The adaptive-Z counter
//! and the DPSGD-F group counts are separate unit-sensitivity releases.

use std::collections::BTreeMap;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::accountant::AccountantState;
use crate::data::GroupedDataset;
use crate::diagnostics::decompose;
use crate::error::{Error, Result};
use crate::nn::{norm, Model, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    Nonprivate,
    Dpsgd,
    DpsgdF,
    Fairlens,
    Global,
    GlobalAdapt,
    AblationMagnitude,
    AblationDirection,
}

impl MechanismKind {
    pub const ALL: [MechanismKind; 8] = [
        MechanismKind::Nonprivate,
        MechanismKind::Dpsgd,
        MechanismKind::DpsgdF,
        MechanismKind::Fairlens,
        MechanismKind::Global,
        MechanismKind::GlobalAdapt,
        MechanismKind::AblationMagnitude,
        MechanismKind::AblationDirection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::Nonprivate => "nonprivate",
            MechanismKind::Dpsgd => "dpsgd",
            MechanismKind::DpsgdF => "dpsgd_f",
            MechanismKind::Fairlens => "fairlens",
            MechanismKind::Global => "global",
            MechanismKind::GlobalAdapt => "global_adapt",
            MechanismKind::AblationMagnitude => "ablation_magnitude",
            MechanismKind::AblationDirection => "ablation_direction",
        }
    }

    /// Accepts `-` in place of `_`.
    pub fn parse(s: &str) -> Result<Self> {
        let name = s.replace('-', "_");
        MechanismKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::config(format!("unknown mechanism `{s}`")))
    }

    /// Whether the mechanism releases anything under differential privacy.
    pub fn is_private(self) -> bool {
        !matches!(
            self,
            MechanismKind::Nonprivate
                | MechanismKind::AblationMagnitude
                | MechanismKind::AblationDirection
        )
    }
}

impl std::fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Hyperparameters of one privatization mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismConfig {
    pub kind: MechanismKind,
    /// Clipping bound.
    pub c0: f64,
    /// Strict bound for the global variants; initial value for the adaptive one.
    pub z: f64,
    /// Gradient noise multiplier.
    pub sigma1: f64,
    /// Standard deviation of the count noise (adaptive-Z counter, DPSGD-F counts).
    pub sigma2: f64,
    /// Constant learning rate.
    pub eta: f64,
    pub eta_z: f64,
    pub tau: f64,
    /// Poisson sampling rate.
    pub q: f64,
    /// Number of iterations.
    pub steps: usize,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl MechanismConfig {
    pub fn new(kind: MechanismKind) -> Self {
        MechanismConfig {
            kind,
            c0: 1.0,
            z: 1.0,
            sigma1: 1.0,
            sigma2: 10.0,
            eta: 0.01,
            eta_z: 0.1,
            tau: 1.0,
            q: 0.01,
            steps: 1,
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("{}: {m}", self.kind)));
        if !(self.q > 0.0 && self.q <= 1.0) {
            return bad("sampling rate q must lie in (0, 1]");
        }
        if !(self.c0 > 0.0 && self.c0.is_finite()) {
            return bad("C0 must be positive and finite");
        }
        if !(self.sigma1 >= 0.0 && self.sigma2 >= 0.0) {
            return bad("noise scales must be nonnegative");
        }
        if !(self.tau >= 0.0) {
            return bad("tau must be nonnegative");
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad("learning rate must be nonnegative and finite");
        }
        if matches!(
            self.kind,
            MechanismKind::Global | MechanismKind::GlobalAdapt
        ) && self.z < self.c0
        {
            return bad("strict bound Z must be at least C0");
        }
        if self.kind == MechanismKind::GlobalAdapt && !(self.eta_z >= 0.0) {
            return bad("eta_Z must be nonnegative");
        }
        Ok(())
    }

    /// Sampled Gaussian releases made by one iteration, as `(q, noise multiplier)`.
    pub fn step_events(&self) -> Vec<(f64, f64)> {
        match self.kind {
            MechanismKind::Nonprivate
            | MechanismKind::AblationMagnitude
            | MechanismKind::AblationDirection => vec![],
            MechanismKind::Dpsgd | MechanismKind::Fairlens | MechanismKind::Global => {
                vec![(self.q, self.sigma1)]
            }
            MechanismKind::GlobalAdapt | MechanismKind::DpsgdF => {
                vec![(self.q, self.sigma1), (self.q, self.sigma2)]
            }
        }
    }
}

/// Independently seeded random streams.
#[derive(Debug, Clone)]
pub struct RngStreams {
    pub sampling: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub init: ChaCha8Rng,
}

impl RngStreams {
    pub fn from_seed(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        RngStreams {
            sampling: stream(1),
            noise: stream(2),
            init: stream(3),
        }
    }
}

/// Include each row independently with probability `q`.
pub fn poisson_sample<R: Rng + ?Sized>(n: usize, q: f64, rng: &mut R) -> Vec<usize> {
    if q >= 1.0 {
        return (0..n).collect();
    }
    (0..n).filter(|_| rng.random::<f64>() < q).collect()
}

/// `min(1, C0 / norm)`; one for a zero vector.
pub fn clip_factor(norm: f64, c0: f64) -> f64 {
    if norm > c0 {
        c0 / norm
    } else {
        1.0
    }
}

pub fn clip_per_sample(g: &[f64], c0: f64) -> ParamVector {
    let f = clip_factor(norm(g), c0);
    ParamVector::from_vec(g.iter().map(|v| v * f).collect())
}

/// Scale factor of the global rules for a gradient of norm `norm`.
pub fn global_factor(norm: f64, c0: f64, z: f64, adapt: bool) -> f64 {
    debug_assert!(z > 0.0 && c0 > 0.0);
    if norm <= z {
        c0 / z
    } else if adapt {
        c0 / norm
    } else {
        0.0
    }
}

pub fn scale_global(g: &[f64], c0: f64, z: f64, adapt: bool) -> ParamVector {
    let f = global_factor(norm(g), c0, z, adapt);
    ParamVector::from_vec(g.iter().map(|v| v * f).collect())
}

/// Geometric update of the strict bound from the noisy fraction of norms
/// above `tau * z`. An empty batch still consumes a noise draw and moves `z`
/// by `exp(-eta_z)`.
pub fn adapt_z<R: Rng + ?Sized>(
    z: f64,
    norms: &[f64],
    tau: f64,
    eta_z: f64,
    sigma2: f64,
    rng: &mut R,
) -> f64 {
    let noise = gaussian(rng, sigma2);
    let b_tilde = if norms.is_empty() {
        0.0
    } else {
        let b = norms.iter().filter(|&&n| n > tau * z).count() as f64;
        (b + noise) / norms.len() as f64
    };
    let next = z * (-eta_z + b_tilde).exp();
    if next > 0.0 && next.is_finite() {
        next
    } else if next == 0.0 {
        f64::MIN_POSITIVE
    } else {
        f64::MAX
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).expect("finite std").sample(rng)
}

/// Noisy per-group clipping bounds of DPSGD-F.
///
/// `groups` lists every group id of the dataset so that the number of noise
/// draws does not depend on the batch.
pub fn dpsgd_f_thresholds<R: Rng + ?Sized>(
    norms: &[f64],
    sample_groups: &[u32],
    groups: &[u32],
    c0: f64,
    sigma_counts: f64,
    rng: &mut R,
) -> Result<BTreeMap<u32, f64>> {
    if norms.len() != sample_groups.len() {
        return Err(Error::DimensionMismatch {
            expected: norms.len(),
            actual: sample_groups.len(),
        });
    }
    if norms.is_empty() {
        return Err(Error::config("DPSGD-F thresholds need a nonempty batch"));
    }
    let mut above: BTreeMap<u32, f64> = groups.iter().map(|&g| (g, 0.0)).collect();
    let mut below = above.clone();
    for (&n, &g) in norms.iter().zip(sample_groups) {
        let slot = if n > c0 { &mut above } else { &mut below };
        *slot.get_mut(&g).ok_or_else(|| {
            Error::config(format!("sample group {g} not among dataset groups"))
        })? += 1.0;
    }
    let mut noisy = BTreeMap::new();
    for &g in groups {
        let m = (above[&g] + gaussian(rng, sigma_counts)).floor().max(0.0);
        let o = (below[&g] + gaussian(rng, sigma_counts)).floor().max(0.0);
        noisy.insert(g, (m, m + o));
    }
    let m_total: f64 = noisy.values().map(|(m, _)| m).sum();
    let batch = norms.len() as f64;
    Ok(noisy
        .into_iter()
        .map(|(g, (m, b))| {
            let c = if m_total == 0.0 {
                c0
            } else {
                let ratio = if b == 0.0 { 0.0 } else { m / b };
                c0 * (1.0 + ratio / (m_total / batch))
            };
            (g, c)
        })
        .collect())
}

/// Clipped per-sample gradients of the FairLens regularized loss.
#[derive(Debug, Clone)]
pub struct FairlensGradients {
    pub clipped: Vec<ParamVector>,
    /// Gradient-gap regularizer, reported but held constant.
    pub r1: f64,
    /// Prediction-variance regularizer.
    pub r2: f64,
    /// True when a group was missing and plain clipping was used.
    pub fallback: bool,
}

/// `grads[i]` must be the loss gradient of row `batch[i]`. The model must be a
/// binary classifier on a dataset with exactly two groups.
pub fn fairlens_regularized_gradients(
    model: &Model,
    data: &GroupedDataset,
    batch: &[usize],
    grads: &[ParamVector],
    c0: f64,
    lambda1: f64,
    lambda2: f64,
) -> Result<FairlensGradients> {
    let ids = data.group_ids();
    if ids.len() != 2 {
        return Err(Error::config("FairLens needs exactly two protected groups"));
    }
    let ga = ids[0];
    let in_a: Vec<bool> = batch.iter().map(|&i| data.group(i) == ga).collect();
    let n_a = in_a.iter().filter(|&&a| a).count();
    let n_b = batch.len() - n_a;
    if n_a == 0 || n_b == 0 {
        debug!(
            "FairLens: group missing from batch of {}, plain clipping",
            batch.len()
        );
        return Ok(FairlensGradients {
            clipped: grads.iter().map(|g| clip_per_sample(g, c0)).collect(),
            r1: 0.0,
            r2: 0.0,
            fallback: true,
        });
    }
    let d = model.num_params();
    let mut sum_a = ParamVector::zeros(d);
    let mut sum_b = ParamVector::zeros(d);
    let mut sum_clip = ParamVector::zeros(d);
    for (g, &a) in grads.iter().zip(&in_a) {
        if a {
            sum_a.axpy(1.0, g);
        } else {
            sum_b.axpy(1.0, g);
        }
        sum_clip.axpy(1.0, &clip_per_sample(g, c0));
    }
    let nb = batch.len() as f64;
    let g_batch: Vec<f64> = sum_a
        .iter()
        .zip(sum_b.iter())
        .map(|(a, b)| (a + b) / nb)
        .collect();
    let gap: Vec<f64> = sum_a
        .iter()
        .zip(sum_b.iter())
        .map(|(a, b)| a / n_a as f64 - b / n_b as f64)
        .collect();
    let clip_err: Vec<f64> = sum_clip
        .iter()
        .zip(&g_batch)
        .map(|(c, g)| c / nb - g)
        .collect();
    let r1 = crate::nn::dot(&gap, &clip_err).abs();

    let probs = model.positive_probability_gradients(data, batch)?;
    let f_a = probs
        .iter()
        .zip(&in_a)
        .filter(|(_, &a)| a)
        .map(|(p, _)| p.0)
        .sum::<f64>()
        / n_a as f64;
    let f_b = probs
        .iter()
        .zip(&in_a)
        .filter(|(_, &a)| !a)
        .map(|(p, _)| p.0)
        .sum::<f64>()
        / n_b as f64;
    let r2 = 0.5 * (f_a * (1.0 - f_a) + f_b * (1.0 - f_b));

    let clipped = grads
        .iter()
        .zip(&probs)
        .zip(&in_a)
        .map(|((g, (_, dp)), &a)| {
            let (f, n) = if a { (f_a, n_a) } else { (f_b, n_b) };
            let w = lambda2 * 0.5 * (1.0 - 2.0 * f) / n as f64;
            let mut reg = g.clone();
            reg.axpy(w, dp);
            clip_per_sample(&reg, c0)
        })
        .collect();
    Ok(FairlensGradients {
        clipped,
        r1: lambda1 * r1,
        r2: lambda2 * r2,
        fallback: false,
    })
}

/// `(1/|B|) (sum of clipped + N(0, (noise_multiplier * c0)^2 I))`.
pub fn noisy_mean<R: Rng + ?Sized>(
    clipped: &[ParamVector],
    dim: usize,
    noise_multiplier: f64,
    c0: f64,
    rng: &mut R,
) -> Result<ParamVector> {
    if clipped.is_empty() {
        return Err(Error::config("noisy mean of an empty batch"));
    }
    let mut sum = ParamVector::zeros(dim);
    for g in clipped {
        sum.axpy(1.0, g);
    }
    let std = noise_multiplier * c0;
    if std > 0.0 {
        let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        for v in sum.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    sum.scale_in_place(1.0 / clipped.len() as f64);
    Ok(sum)
}

/// Noisy mean of the clipped gradients followed by `theta -= eta * mean`.
pub fn noise_and_step<R: Rng + ?Sized>(
    model: &mut Model,
    clipped: &[ParamVector],
    noise_multiplier: f64,
    c0: f64,
    eta: f64,
    rng: &mut R,
) -> Result<ParamVector> {
    let g = noisy_mean(clipped, model.num_params(), noise_multiplier, c0, rng)?;
    model.step(-eta, &g);
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Magnitude,
    Direction,
}

/// Update direction of the noiseless ablation: the true batch gradient with
/// only the clipping magnitude error, or rotated with only the direction error.
pub fn ablation_direction(
    g_b: &[f64],
    g_b_clipped: &[f64],
    mode: AblationMode,
) -> Result<ParamVector> {
    let ng = norm(g_b);
    if ng == 0.0 {
        return Ok(ParamVector::zeros(g_b.len()));
    }
    Ok(match mode {
        AblationMode::Magnitude => {
            let r = norm(g_b_clipped) / ng;
            ParamVector::from_vec(g_b.iter().map(|v| v * r).collect())
        }
        AblationMode::Direction => decompose(g_b, g_b_clipped)?.rotate(g_b),
    })
}

pub fn ablation_step(
    model: &mut Model,
    g_b: &[f64],
    g_b_clipped: &[f64],
    mode: AblationMode,
    eta: f64,
) -> Result<ParamVector> {
    let step = ablation_direction(g_b, g_b_clipped, mode)?;
    model.step(-eta, &step);
    Ok(step)
}

/// Batch statistics retained for the risk diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub step: usize,
    /// Mean of the raw per-sample gradients.
    pub g_b: ParamVector,
    /// Mean of the clipped or scaled per-sample gradients, before noise.
    pub g_b_clipped: ParamVector,
}

/// Summary of one training iteration.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub step: usize,
    pub batch_size: usize,
    /// Sum of per-sample losses in the batch.
    pub loss_sum: f64,
    /// Per group: (count, sum of per-sample losses, norm of the group's batch-mean gradient).
    pub group_stats: BTreeMap<u32, (usize, f64, f64)>,
    pub z: f64,
    pub record: Option<BatchRecord>,
}

/// Mutable state of one training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub z_current: f64,
    pub step: usize,
    pub accountant: AccountantState,
    pub rngs: RngStreams,
    pub fairlens_fallbacks: usize,
}

impl TrainState {
    pub fn new(model: Model, cfg: &MechanismConfig, rngs: RngStreams) -> Result<Self> {
        cfg.validate()?;
        Ok(TrainState {
            model,
            z_current: cfg.z,
            step: 0,
            accountant: AccountantState::new(),
            rngs,
            fairlens_fallbacks: 0,
        })
    }

    /// One iteration: sample, compute per-sample gradients, privatize, update.
    pub fn step(&mut self, data: &GroupedDataset, cfg: &MechanismConfig) -> Result<StepOutcome> {
        if self.step >= cfg.steps {
            return Err(Error::config(format!(
                "iteration budget of {} steps exhausted",
                cfg.steps
            )));
        }
        let batch = poisson_sample(data.len(), cfg.q, &mut self.rngs.sampling);
        self.step += 1;
        for (q, sigma) in cfg.step_events() {
            self.accountant.compose(q, sigma, 1);
        }
        if batch.is_empty() {
            debug!("step {}: empty batch, update skipped", self.step);
            if cfg.kind == MechanismKind::GlobalAdapt {
                self.z_current = adapt_z(
                    self.z_current,
                    &[],
                    cfg.tau,
                    cfg.eta_z,
                    cfg.sigma2,
                    &mut self.rngs.noise,
                );
            }
            return Ok(StepOutcome {
                step: self.step,
                batch_size: 0,
                loss_sum: 0.0,
                group_stats: BTreeMap::new(),
                z: self.z_current,
                record: None,
            });
        }

        let (losses, grads): (Vec<f64>, Vec<ParamVector>) = self
            .model
            .per_sample_losses_and_gradients(data, &batch)?
            .into_iter()
            .unzip();
        let norms: Vec<f64> = grads.iter().map(|g| g.norm()).collect();
        let d = self.model.num_params();
        let nb = batch.len() as f64;

        let mut g_b = ParamVector::zeros(d);
        let mut group_sums: BTreeMap<u32, (usize, ParamVector)> = BTreeMap::new();
        for (g, &i) in grads.iter().zip(&batch) {
            g_b.axpy(1.0 / nb, g);
            let e = group_sums
                .entry(data.group(i))
                .or_insert_with(|| (0, ParamVector::zeros(d)));
            e.0 += 1;
            e.1.axpy(1.0, g);
        }

        let clipped: Vec<ParamVector> = match cfg.kind {
            MechanismKind::Nonprivate => grads.clone(),
            MechanismKind::Dpsgd
            | MechanismKind::AblationMagnitude
            | MechanismKind::AblationDirection => {
                grads.iter().map(|g| clip_per_sample(g, cfg.c0)).collect()
            }
            MechanismKind::Global | MechanismKind::GlobalAdapt => {
                let adapt = cfg.kind == MechanismKind::GlobalAdapt;
                grads
                    .iter()
                    .zip(&norms)
                    .map(|(g, &n)| g.scaled(global_factor(n, cfg.c0, self.z_current, adapt)))
                    .collect()
            }
            MechanismKind::DpsgdF => {
                let sample_groups: Vec<u32> = batch.iter().map(|&i| data.group(i)).collect();
                let bounds = dpsgd_f_thresholds(
                    &norms,
                    &sample_groups,
                    &data.group_ids(),
                    cfg.c0,
                    cfg.sigma2,
                    &mut self.rngs.noise,
                )?;
                grads
                    .iter()
                    .zip(&sample_groups)
                    .map(|(g, k)| clip_per_sample(g, bounds[k]))
                    .collect()
            }
            MechanismKind::Fairlens => {
                let out = fairlens_regularized_gradients(
                    &self.model,
                    data,
                    &batch,
                    &grads,
                    cfg.c0,
                    cfg.lambda1,
                    cfg.lambda2,
                )?;
                if out.fallback {
                    self.fairlens_fallbacks += 1;
                }
                out.clipped
            }
        };
        let mut g_b_clipped = ParamVector::zeros(d);
        for c in &clipped {
            g_b_clipped.axpy(1.0 / nb, c);
        }

        match cfg.kind {
            MechanismKind::Nonprivate => self.model.step(-cfg.eta, &g_b),
            MechanismKind::AblationMagnitude => {
                ablation_step(
                    &mut self.model,
                    &g_b,
                    &g_b_clipped,
                    AblationMode::Magnitude,
                    cfg.eta,
                )?;
            }
            MechanismKind::AblationDirection => {
                ablation_step(
                    &mut self.model,
                    &g_b,
                    &g_b_clipped,
                    AblationMode::Direction,
                    cfg.eta,
                )?;
            }
            _ => {
                noise_and_step(
                    &mut self.model,
                    &clipped,
                    cfg.sigma1,
                    cfg.c0,
                    cfg.eta,
                    &mut self.rngs.noise,
                )?;
            }
        }
        if cfg.kind == MechanismKind::GlobalAdapt {
            self.z_current = adapt_z(
                self.z_current,
                &norms,
                cfg.tau,
                cfg.eta_z,
                cfg.sigma2,
                &mut self.rngs.noise,
            );
        }

        let mut group_stats = BTreeMap::new();
        for (g, (count, sum)) in group_sums {
            let loss: f64 = batch
                .iter()
                .zip(&losses)
                .filter(|(&i, _)| data.group(i) == g)
                .map(|(_, l)| l)
                .sum();
            group_stats.insert(g, (count, loss, sum.norm() / count as f64));
        }
        Ok(StepOutcome {
            step: self.step,
            batch_size: batch.len(),
            loss_sum: losses.iter().sum(),
            group_stats,
            z: self.z_current,
            record: Some(BatchRecord {
                step: self.step,
                g_b,
                g_b_clipped,
            }),
        })
    }
}
