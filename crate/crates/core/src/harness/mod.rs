//! Experiment configuration, multi-seed training runs and report emission.
//!
//! A run directory holds `manifest.json`, `epoch_metrics.csv`,
//! `risk_report.csv`, `bound_report.csv`, `test_metrics.csv` and
//! `final_metrics.csv`. Private runs also get a `baseline/` directory with the
//! matching nonprivate runs unless an existing baseline is supplied.

pub mod report;

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::accountant::AccountantState;
use crate::data::{
    load_adult, load_dutch, load_mnist_unbalanced, read_cache, write_cache, AdultOptions,
    DutchOptions, GroupedDataset, MnistOptions,
};
use crate::diagnostics::{
    diagnose, final_metrics, DiagnosticSettings, FairnessMetrics, RiskReport, SeedResult,
};
use crate::error::{Error, Result};
use crate::mechanisms::{AblationMode, MechanismConfig, MechanismKind, RngStreams, TrainState};
use crate::nn::{Architecture, Evaluation, Model};

pub use report::{compare, format_table, read_test_metrics, CompareRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Adult,
    Dutch,
    Mnist,
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adult" => Ok(DatasetId::Adult),
            "dutch" => Ok(DatasetId::Dutch),
            "mnist" => Ok(DatasetId::Mnist),
            other => Err(Error::config(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    Quick,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Preset::Full),
            "quick" => Ok(Preset::Quick),
            other => Err(Error::config(format!("unknown preset `{other}`"))),
        }
    }
}

/// Curvature-estimation knobs used at evaluation points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsConfig {
    pub hutchinson_probes: usize,
    pub power_iters: usize,
    /// Rows per group used for Hessian quantities; `None` uses the whole group.
    pub hessian_rows: Option<usize>,
    /// Groups to diagnose; `None` means every group.
    pub groups: Option<Vec<u32>>,
    /// Most recent batches kept between evaluation points; `None` keeps all.
    pub max_records: Option<usize>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            hutchinson_probes: 100,
            power_iters: 100,
            hessian_rows: None,
            groups: None,
            max_records: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetId,
    pub data_dir: PathBuf,
    /// Seed of preprocessing randomness (balancing, splits, undersampling).
    pub data_seed: u64,
    /// Fraction of training rows kept, by independent coin flips.
    pub train_subsample: f64,
    /// Directory for processed-dataset caches; `None` disables caching.
    pub cache_dir: Option<PathBuf>,
    /// Defaults to the dataset's standard model when absent.
    pub architecture: Option<Architecture>,
    /// `q` and `steps` are derived from the batch size and epochs.
    pub mechanism: MechanismConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Iterations between diagnostic evaluations; 0 disables them.
    pub eval_stride: usize,
    pub delta: f64,
    pub out_dir: PathBuf,
    pub diagnostics: DiagnosticsConfig,
    /// Existing nonprivate run to measure privacy cost against.
    pub baseline_dir: Option<PathBuf>,
    /// Learning rate of an automatically trained nonprivate baseline.
    pub baseline_eta: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::preset(DatasetId::Dutch, MechanismKind::Dpsgd, Preset::Full)
    }
}

/// Directory holding `adult/`, `dutch/` and `mnist/` raw data: `FAIRDP_DATA`
/// when set, `data/raw` otherwise.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os("FAIRDP_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/raw"))
}

impl ExperimentConfig {
    /// Default hyperparameters for a dataset and mechanism. The quick preset
    /// shortens training and subsamples the digit data.
    pub fn preset(dataset: DatasetId, kind: MechanismKind, preset: Preset) -> Self {
        let mut m = MechanismConfig::new(kind);
        let (c0, sigma, eta, global, adapt, epochs, stride) = match dataset {
            DatasetId::Adult => (0.5, 1.0, 0.01, (1.0, 50.0), (0.2, 1.0), 20, 50),
            DatasetId::Dutch => (0.1, 1.0, 0.8, (2.0, 1.0), (1.0, 1.0), 20, 100),
            DatasetId::Mnist => (1.0, 0.8, 0.01, (0.2, 100.0), (0.1, 0.7), 60, 200),
        };
        m.c0 = c0;
        m.sigma1 = sigma;
        m.eta = eta;
        m.lambda1 = 1.0;
        m.lambda2 = 1.0;
        match kind {
            MechanismKind::Global => {
                m.eta = global.0;
                m.z = global.1;
            }
            MechanismKind::GlobalAdapt => {
                m.eta = adapt.0;
                m.tau = adapt.1;
                m.z = 50.0;
                m.sigma2 = 10.0;
                m.eta_z = 0.1;
            }
            MechanismKind::DpsgdF => m.sigma2 = 10.0 * sigma,
            MechanismKind::Nonprivate
            | MechanismKind::AblationMagnitude
            | MechanismKind::AblationDirection => {
                m.sigma1 = 0.0;
            }
            MechanismKind::Dpsgd | MechanismKind::Fairlens => {}
        }
        let mut cfg = ExperimentConfig {
            dataset,
            data_dir: default_data_dir(),
            data_seed: 0,
            train_subsample: 1.0,
            cache_dir: None,
            architecture: None,
            mechanism: m,
            epochs,
            batch_size: 256,
            seeds: vec![0, 1, 2, 3, 4],
            eval_stride: stride,
            delta: 1e-6,
            out_dir: PathBuf::from(format!("runs/{}-{}", dataset_name(dataset), kind)),
            diagnostics: DiagnosticsConfig::default(),
            baseline_dir: None,
            baseline_eta: Some(eta),
        };
        if dataset == DatasetId::Mnist {
            cfg.diagnostics = DiagnosticsConfig {
                hutchinson_probes: 10,
                power_iters: 10,
                hessian_rows: Some(256),
                groups: Some(vec![2, 8]),
                max_records: Some(10),
            };
        }
        if dataset == DatasetId::Adult {
            cfg.diagnostics = DiagnosticsConfig {
                hutchinson_probes: 10,
                power_iters: 10,
                hessian_rows: Some(256),
                groups: None,
                max_records: Some(10),
            };
        }
        if preset == Preset::Quick {
            match dataset {
                DatasetId::Mnist => {
                    cfg.epochs = 10;
                    cfg.train_subsample = 0.2;
                }
                DatasetId::Dutch | DatasetId::Adult => cfg.epochs = 5,
            }
        }
        cfg
    }

    /// Replace the mechanism, keeping the dataset's default settings for it.
    pub fn with_mechanism(&self, kind: MechanismKind) -> Self {
        let p = ExperimentConfig::preset(self.dataset, kind, Preset::Full);
        let mut cfg = self.clone();
        cfg.mechanism = p.mechanism;
        cfg.baseline_eta = p.baseline_eta;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch size and epochs must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta must lie in (0, 1)"));
        }
        if !(self.train_subsample > 0.0 && self.train_subsample <= 1.0) {
            return Err(Error::config("train_subsample must lie in (0, 1]"));
        }
        if self.diagnostics.hutchinson_probes == 0 || self.diagnostics.power_iters == 0 {
            return Err(Error::config(
                "diagnostics need at least one probe and one iteration",
            ));
        }
        let mut m = self.mechanism.clone();
        m.q = 0.5;
        m.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn dataset_name(d: DatasetId) -> &'static str {
    match d {
        DatasetId::Adult => "adult",
        DatasetId::Dutch => "dutch",
        DatasetId::Mnist => "mnist",
    }
}

/// First `.arff` or `.csv` file in `dir`, sorted by name.
fn find_table(dir: &Path) -> Result<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|x| x.to_str()),
                Some("arff") | Some("csv")
            )
        })
        .collect();
    found.sort();
    found
        .into_iter()
        .next()
        .ok_or_else(|| Error::io(dir.join("*.arff"), std::io::ErrorKind::NotFound.into()))
}

/// Train and test splits after preprocessing and optional subsampling.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(GroupedDataset, GroupedDataset)> {
    let tag = format!(
        "{}-s{}-f{}",
        dataset_name(cfg.dataset),
        cfg.data_seed,
        cfg.train_subsample
    );
    if let Some(dir) = &cfg.cache_dir {
        let (tr, te) = (
            dir.join(format!("{tag}-train.bin")),
            dir.join(format!("{tag}-test.bin")),
        );
        if tr.exists() && te.exists() {
            return Ok((read_cache(&tr)?, read_cache(&te)?));
        }
    }
    let root = &cfg.data_dir;
    let (mut train, test) = match cfg.dataset {
        DatasetId::Adult => load_adult(
            root.join("adult"),
            &AdultOptions {
                seed: cfg.data_seed,
                ..AdultOptions::default()
            },
        )?,
        DatasetId::Dutch => load_dutch(
            find_table(&root.join("dutch"))?,
            &DutchOptions {
                seed: cfg.data_seed,
                ..DutchOptions::default()
            },
        )?,
        DatasetId::Mnist => load_mnist_unbalanced(
            root.join("mnist"),
            &MnistOptions {
                seed: cfg.data_seed,
                ..MnistOptions::default()
            },
        )?,
    };
    if cfg.train_subsample < 1.0 {
        train = train.bernoulli_subsample(cfg.train_subsample, cfg.data_seed.wrapping_add(7));
    }
    if let Some(dir) = &cfg.cache_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_cache(dir.join(format!("{tag}-train.bin")), &train)?;
        write_cache(dir.join(format!("{tag}-test.bin")), &test)?;
    }
    Ok((train, test))
}

pub fn default_architecture(dataset: DatasetId, input_dim: usize, classes: usize) -> Architecture {
    match dataset {
        DatasetId::Adult => Architecture::Mlp {
            inputs: input_dim,
            hidden: vec![256, 256],
            outputs: classes,
        },
        DatasetId::Dutch => Architecture::Logistic {
            inputs: input_dim,
            outputs: classes,
        },
        DatasetId::Mnist => Architecture::mnist_cnn(),
    }
}

pub fn steps_per_epoch(n_train: usize, batch_size: usize) -> usize {
    n_train.div_ceil(batch_size)
}

/// Sampling rate and iteration count implied by a training-set size.
pub fn derive_schedule(n_train: usize, batch_size: usize, epochs: usize) -> (f64, usize) {
    (
        (batch_size as f64 / n_train as f64).min(1.0),
        epochs * steps_per_epoch(n_train, batch_size),
    )
}

/// Epsilon of `steps` iterations of a mechanism from a fresh accountant;
/// `None` for mechanisms that release nothing privately.
pub fn replay_epsilon(m: &MechanismConfig, delta: f64) -> Result<Option<(f64, f64)>> {
    let events = m.step_events();
    if events.is_empty() {
        return Ok(None);
    }
    let mut acc = AccountantState::new();
    for (q, s) in events {
        acc.compose(q, s, m.steps);
    }
    acc.to_epsilon(delta).map(Some)
}

/// Per-epoch, per-group training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub seed: u64,
    pub epoch: usize,
    pub group: u32,
    /// Mean per-sample training loss over the epoch's batches.
    pub loss: f64,
    /// Norm of the group's batch-mean gradient, averaged over batches.
    pub grad_norm: f64,
    /// Strict bound at the end of the epoch.
    pub z: f64,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub epochs: Vec<EpochRow>,
    pub risk: Vec<RiskReport>,
    pub test: Evaluation,
    pub accountant: AccountantState,
    pub final_z: f64,
    pub empty_batches: usize,
    pub fairlens_fallbacks: usize,
    pub model: Model,
}

impl SeedRun {
    pub fn seed_result(&self) -> SeedResult {
        SeedResult {
            seed: self.seed,
            groups: self.test.groups.clone(),
        }
    }
}

/// Train one seed. `cfg.mechanism.q` and `steps` must already be resolved.
pub fn train_seed(
    cfg: &ExperimentConfig,
    arch: &Architecture,
    train: &GroupedDataset,
    test: &GroupedDataset,
    seed: u64,
) -> Result<SeedRun> {
    let mech = &cfg.mechanism;
    let mut rngs = RngStreams::from_seed(seed);
    let model = Model::init_with(arch.clone(), &mut rngs.init)?;
    model.check_input(train)?;
    let mut st = TrainState::new(model, mech, rngs)?;
    let spe = steps_per_epoch(train.len(), cfg.batch_size);
    let settings = DiagnosticSettings {
        eta: mech.eta,
        c0: mech.c0,
        sigma: mech.sigma1,
        hutchinson_probes: cfg.diagnostics.hutchinson_probes,
        power_iters: cfg.diagnostics.power_iters,
        hessian_rows: cfg.diagnostics.hessian_rows,
        groups: cfg.diagnostics.groups.clone(),
        seed: seed ^ 0xD1A6,
    };
    let groups = train.group_ids();
    let mut records = VecDeque::new();
    let mut epochs = Vec::new();
    let mut risk = Vec::new();
    let mut empty = 0;
    for epoch in 0..cfg.epochs {
        let mut acc: BTreeMap<u32, (usize, f64, f64, usize)> = BTreeMap::new();
        for _ in 0..spe {
            if st.step >= mech.steps {
                break;
            }
            let out = st.step(train, mech)?;
            if out.batch_size == 0 {
                empty += 1;
            }
            for (g, (count, loss, norm)) in &out.group_stats {
                let e = acc.entry(*g).or_insert((0, 0.0, 0.0, 0));
                e.0 += count;
                e.1 += loss;
                e.2 += norm;
                e.3 += 1;
            }
            if let Some(r) = out.record {
                records.push_back(r);
                if let Some(cap) = cfg.diagnostics.max_records {
                    while records.len() > cap {
                        records.pop_front();
                    }
                }
            }
            if cfg.eval_stride > 0 && st.step % cfg.eval_stride == 0 {
                let rep = diagnose(
                    &st.model,
                    train,
                    records.make_contiguous(),
                    st.step,
                    &settings,
                )?;
                records.clear();
                risk.push(rep);
            }
        }
        for &g in &groups {
            let (n, loss, norm, batches) = acc.get(&g).copied().unwrap_or((0, 0.0, 0.0, 0));
            epochs.push(EpochRow {
                seed,
                epoch: epoch + 1,
                group: g,
                loss: if n == 0 { f64::NAN } else { loss / n as f64 },
                grad_norm: if batches == 0 {
                    f64::NAN
                } else {
                    norm / batches as f64
                },
                z: st.z_current,
            });
        }
        info!("seed {seed} epoch {} done at step {}", epoch + 1, st.step);
    }
    let test_eval = st.model.evaluate(test)?;
    Ok(SeedRun {
        seed,
        epochs,
        risk,
        test: test_eval,
        accountant: st.accountant.clone(),
        final_z: st.z_current,
        empty_batches: empty,
        fairlens_fallbacks: st.fairlens_fallbacks,
        model: st.model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: DatasetId,
    pub mechanism: MechanismConfig,
    pub architecture: Architecture,
    pub param_count: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub q: f64,
    pub steps: usize,
    pub delta: f64,
    /// `None` for runs without a private release.
    pub epsilon: Option<f64>,
    pub best_order: Option<f64>,
    pub seeds: Vec<u64>,
    pub final_z: Vec<f64>,
    pub empty_batches: Vec<usize>,
    pub fairlens_fallbacks: Vec<usize>,
    pub eval_stride: usize,
    pub diagnostics: DiagnosticsConfig,
    pub baseline_dir: Option<PathBuf>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub seeds: Vec<SeedRun>,
    pub baseline: Vec<SeedResult>,
    pub metrics: FairnessMetrics,
}

/// Load data then train every seed, write reports, and compute fairness
/// metrics against the nonprivate baseline.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    run_with_data(cfg, &train, &test)
}

pub fn run_with_data(
    cfg: &ExperimentConfig,
    train: &GroupedDataset,
    test: &GroupedDataset,
) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let mut cfg = cfg.clone();
    let (q, steps) = derive_schedule(train.len(), cfg.batch_size, cfg.epochs);
    cfg.mechanism.q = q;
    cfg.mechanism.steps = steps;
    cfg.mechanism.validate()?;
    let arch = cfg
        .architecture
        .clone()
        .unwrap_or_else(|| default_architecture(cfg.dataset, train.dim(), train.num_classes()));
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    info!(
        "{} on {}: n={} q={q:.6} T={steps}",
        cfg.mechanism.kind,
        dataset_name(cfg.dataset),
        train.len()
    );

    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &s in &cfg.seeds {
        seeds.push(train_seed(&cfg, &arch, train, test, s)?);
    }
    let own: Vec<SeedResult> = seeds.iter().map(SeedRun::seed_result).collect();

    let baseline = if cfg.mechanism.kind == MechanismKind::Nonprivate {
        own.clone()
    } else if let Some(dir) = &cfg.baseline_dir {
        read_test_metrics(dir)?
    } else {
        let mut b = cfg.with_mechanism(MechanismKind::Nonprivate);
        b.mechanism.eta = cfg.baseline_eta.unwrap_or(b.mechanism.eta);
        b.out_dir = cfg.out_dir.join("baseline");
        b.eval_stride = 0;
        b.baseline_dir = None;
        b.architecture = Some(arch.clone());
        run_with_data(&b, train, test)?
            .seeds
            .iter()
            .map(SeedRun::seed_result)
            .collect()
    };
    let metrics = final_metrics(&own, &baseline)?;

    let eps = replay_epsilon(&cfg.mechanism, cfg.delta)?;
    let manifest = Manifest {
        dataset: cfg.dataset,
        mechanism: cfg.mechanism.clone(),
        architecture: arch.clone(),
        param_count: arch.num_params(),
        n_train: train.len(),
        n_test: test.len(),
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        steps_per_epoch: steps_per_epoch(train.len(), cfg.batch_size),
        q,
        steps,
        delta: cfg.delta,
        epsilon: eps.map(|e| e.0),
        best_order: eps.map(|e| e.1),
        seeds: cfg.seeds.clone(),
        final_z: seeds.iter().map(|s| s.final_z).collect(),
        empty_batches: seeds.iter().map(|s| s.empty_batches).collect(),
        fairlens_fallbacks: seeds.iter().map(|s| s.fairlens_fallbacks).collect(),
        eval_stride: cfg.eval_stride,
        diagnostics: cfg.diagnostics.clone(),
        baseline_dir: cfg.baseline_dir.clone(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    report::write_run(&cfg.out_dir, &manifest, &seeds, &metrics)?;
    Ok(RunOutput {
        dir: cfg.out_dir.clone(),
        manifest,
        seeds,
        baseline,
        metrics,
    })
}

/// Noiseless run that keeps only the magnitude or only the direction part of
/// the clipping error.
pub fn ablation(cfg: &ExperimentConfig, mode: AblationMode) -> Result<RunOutput> {
    let mut c = cfg.clone();
    let eta = c.mechanism.eta;
    c.mechanism.kind = match mode {
        AblationMode::Magnitude => MechanismKind::AblationMagnitude,
        AblationMode::Direction => MechanismKind::AblationDirection,
    };
    c.mechanism.sigma1 = 0.0;
    c.mechanism.eta = eta;
    run(&c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_uses_ceiling() {
        assert_eq!(steps_per_epoch(48_336, 256), 189);
        let (q, t) = derive_schedule(48_336, 256, 20);
        assert_eq!(t, 3780);
        assert!((q - 256.0 / 48_336.0).abs() < 1e-15);
    }

    #[test]
    fn presets_validate() {
        for d in [DatasetId::Adult, DatasetId::Dutch, DatasetId::Mnist] {
            for k in MechanismKind::ALL {
                for p in [Preset::Full, Preset::Quick] {
                    ExperimentConfig::preset(d, k, p).validate().unwrap();
                }
            }
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let c =
            ExperimentConfig::preset(DatasetId::Mnist, MechanismKind::GlobalAdapt, Preset::Quick);
        let s = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn duplicate_seeds_rejected() {
        let mut c = ExperimentConfig::default();
        c.seeds = vec![1, 1];
        assert!(c.validate().is_err());
    }
}
