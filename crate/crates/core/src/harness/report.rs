//! CSV and JSON writers for run directories, and cross-run comparison.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRow, Manifest, SeedRun};
use crate::diagnostics::{final_metrics, FairnessMetrics, MeanSe, SeedResult};
use crate::error::{Error, Result};
use crate::nn::SubsetEval;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub seed: u64,
    pub step: usize,
    pub group: u32,
    pub batches: usize,
    pub g_da_norm: f64,
    pub mean_g_b_norm: f64,
    pub mean_g_b_clipped_norm: f64,
    pub theta: f64,
    pub theta_clipped: f64,
    pub r_clip: f64,
    pub r_noise: f64,
    pub r_mag: f64,
    pub r_dir: f64,
    pub identity_residual: f64,
    pub trace: f64,
    pub trace_std_error: f64,
    pub lambda_max: f64,
    pub eigen_condition: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub seed: u64,
    pub step: usize,
    pub group_a: u32,
    pub group_b: u32,
    pub lhs: f64,
    pub rhs: f64,
    pub predicted: bool,
    pub lower_bound: f64,
    pub measured_gap: f64,
    pub eigen_condition: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRow {
    pub seed: u64,
    pub group: u32,
    pub count: usize,
    /// Fraction in [0, 1].
    pub accuracy: f64,
    pub loss: f64,
}

/// One aggregated quantity; `group` is `"a"` for a group or `"a-b"` for a gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub group: String,
    pub metric: String,
    pub mean: f64,
    pub se: f64,
}

fn metric_rows(m: &FairnessMetrics) -> Vec<MetricRow> {
    let row = |group: String, metric: &str, v: MeanSe| MetricRow {
        group,
        metric: metric.to_string(),
        mean: v.mean,
        se: v.se,
    };
    let mut out = Vec::new();
    for g in &m.groups {
        out.push(row(g.group.to_string(), "accuracy", g.accuracy));
        out.push(row(g.group.to_string(), "loss", g.loss));
        out.push(row(g.group.to_string(), "privacy_cost", g.privacy_cost));
        out.push(row(g.group.to_string(), "excessive_risk", g.excessive_risk));
    }
    for gap in &m.gaps {
        let key = format!("{}-{}", gap.group_a, gap.group_b);
        out.push(row(key.clone(), "privacy_cost_gap", gap.privacy_cost_gap));
        out.push(row(key, "risk_gap", gap.risk_gap));
    }
    out
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Write every report file of a finished run into `dir`.
pub fn write_run(
    dir: &Path,
    manifest: &Manifest,
    seeds: &[SeedRun],
    metrics: &FairnessMetrics,
) -> Result<()> {
    let epochs: Vec<EpochRow> = seeds
        .iter()
        .flat_map(|s| s.epochs.iter().cloned())
        .collect();
    write_csv(&dir.join("epoch_metrics.csv"), &epochs)?;

    let mut risk = Vec::new();
    let mut bounds = Vec::new();
    for s in seeds {
        for rep in &s.risk {
            risk.extend(rep.groups.iter().map(|g| RiskRow {
                seed: s.seed,
                step: rep.step,
                group: g.group,
                batches: g.batches,
                g_da_norm: g.g_da_norm,
                mean_g_b_norm: g.mean_g_b_norm,
                mean_g_b_clipped_norm: g.mean_g_b_clipped_norm,
                theta: g.theta,
                theta_clipped: g.theta_clipped,
                r_clip: g.r_clip,
                r_noise: g.r_noise,
                r_mag: g.r_mag,
                r_dir: g.r_dir,
                identity_residual: g.identity_residual,
                trace: g.trace,
                trace_std_error: g.trace_std_error,
                lambda_max: g.lambda_max,
                eigen_condition: g.eigen_condition,
            }));
            bounds.extend(rep.pairs.iter().map(|p| BoundRow {
                seed: s.seed,
                step: rep.step,
                group_a: p.group_a,
                group_b: p.group_b,
                lhs: p.lhs,
                rhs: p.rhs,
                predicted: p.predicted,
                lower_bound: p.lower_bound,
                measured_gap: p.measured_gap,
                eigen_condition: p.eigen_condition,
            }));
        }
    }
    write_csv(&dir.join("risk_report.csv"), &risk)?;
    write_csv(&dir.join("bound_report.csv"), &bounds)?;

    let test: Vec<TestRow> = seeds
        .iter()
        .flat_map(|s| {
            s.test.groups.iter().map(move |(&g, e)| TestRow {
                seed: s.seed,
                group: g,
                count: e.count,
                accuracy: e.accuracy,
                loss: e.loss,
            })
        })
        .collect();
    write_csv(&dir.join("test_metrics.csv"), &test)?;
    write_csv(&dir.join("final_metrics.csv"), &metric_rows(metrics))?;

    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Per-seed test results stored in a run directory.
pub fn read_test_metrics(dir: &Path) -> Result<Vec<SeedResult>> {
    let path = dir.join("test_metrics.csv");
    if !path.exists() {
        return Err(Error::MissingBaseline(format!(
            "{} not found",
            path.display()
        )));
    }
    let rows: Vec<TestRow> = read_csv(&path)?;
    let mut by_seed: BTreeMap<u64, BTreeMap<u32, SubsetEval>> = BTreeMap::new();
    for r in rows {
        by_seed.entry(r.seed).or_default().insert(
            r.group,
            SubsetEval {
                count: r.count,
                accuracy: r.accuracy,
                loss: r.loss,
            },
        );
    }
    Ok(by_seed
        .into_iter()
        .map(|(seed, groups)| SeedResult { seed, groups })
        .collect())
}

/// Metrics of one run against a shared baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub epsilon: Option<f64>,
    pub group: String,
    pub metric: String,
    pub mean: f64,
    pub se: f64,
}

/// Fairness metrics of every run directory against `baseline`, written to
/// `out` as CSV when given.
pub fn compare(
    run_dirs: &[impl AsRef<Path>],
    baseline: &Path,
    out: Option<&Path>,
) -> Result<Vec<CompareRow>> {
    let base = read_test_metrics(baseline)?;
    let mut rows = Vec::new();
    for dir in run_dirs {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        let metrics = final_metrics(&read_test_metrics(dir)?, &base)?;
        rows.extend(metric_rows(&metrics).into_iter().map(|m| CompareRow {
            method: manifest.mechanism.kind.to_string(),
            epsilon: manifest.epsilon,
            group: m.group,
            metric: m.metric,
            mean: m.mean,
            se: m.se,
        }));
    }
    if let Some(out) = out {
        write_csv(out, &rows)?;
    }
    Ok(rows)
}

/// Text table with one line per method: accuracy and privacy cost with one
/// decimal, losses and risks with `loss_decimals`.
pub fn format_table(rows: &[CompareRow], loss_decimals: usize) -> String {
    let mut methods: Vec<&str> = Vec::new();
    let mut columns: Vec<(String, String)> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        let key = (r.group.clone(), r.metric.clone());
        if !columns.contains(&key) {
            columns.push(key);
        }
    }
    let cell = |m: &str, key: &(String, String)| {
        rows.iter()
            .find(|r| r.method == m && r.group == key.0 && r.metric == key.1)
            .map(|r| {
                let d = if matches!(
                    r.metric.as_str(),
                    "accuracy" | "privacy_cost" | "privacy_cost_gap"
                ) {
                    1
                } else {
                    loss_decimals
                };
                format!("{:.d$} ± {:.d$}", r.mean, r.se, d = d)
            })
            .unwrap_or_else(|| "-".into())
    };
    let header: Vec<String> = std::iter::once("method".to_string())
        .chain(columns.iter().map(|(g, m)| format!("{m}[{g}]")))
        .collect();
    let body: Vec<Vec<String>> = methods
        .iter()
        .map(|m| {
            std::iter::once(m.to_string())
                .chain(columns.iter().map(|k| cell(m, k)))
                .collect()
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            body.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(&header);
    out.push('\n');
    for r in &body {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}
