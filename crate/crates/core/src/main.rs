use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fairdp::accountant::{AccountantState, Conversion};
use fairdp::harness::{self, compare, format_table, DatasetId, ExperimentConfig, Preset};
use fairdp::mechanisms::{AblationMode, MechanismKind};

#[derive(Parser)]
#[command(
    name = "fairdp",
    version,
    about = "Group-level risk analysis of clipped, noised SGD"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON experiment configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "dutch")]
    dataset: DatasetId,
    #[arg(long, default_value = "dpsgd")]
    mechanism: String,
    #[arg(long, default_value = "full")]
    preset: Preset,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eval_stride: Option<usize>,
    /// Learning rate override.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train all seeds of one mechanism and write its reports.
    Run(RunArgs),
    /// Noiseless magnitude-only or direction-only clipping.
    Ablation {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = ["magnitude", "direction"])]
        mode: String,
    },
    /// Privacy budget of a Poisson-subsampled Gaussian mechanism.
    Accountant {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-6)]
        delta: f64,
        /// Use the plain RDP-to-DP conversion.
        #[arg(long)]
        classic: bool,
    },
    /// Tabulate several runs against one nonprivate baseline.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        loss_decimals: usize,
        runs: Vec<PathBuf>,
    },
}

fn build_config(a: &RunArgs, kind: MechanismKind) -> fairdp::Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::preset(a.dataset, kind, a.preset),
    };
    if let Some(s) = &a.seed {
        cfg.seeds = s.clone();
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(e) = a.eta {
        cfg.mechanism.eta = e;
    }
    if let Some(s) = a.eval_stride {
        cfg.eval_stride = s;
    }
    if let Some(d) = &a.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(b) = &a.baseline {
        cfg.baseline_dir = Some(b.clone());
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn summarize(out: &harness::RunOutput) {
    let eps = out
        .manifest
        .epsilon
        .map_or_else(|| "inf".to_string(), |e| format!("{e:.3}"));
    println!(
        "{} on {:?}: eps={eps} steps={} wall={:.1}s -> {}",
        out.manifest.mechanism.kind,
        out.manifest.dataset,
        out.manifest.steps,
        out.manifest.wall_seconds,
        out.dir.display()
    );
    for g in &out.metrics.groups {
        println!(
            "  group {}: acc {:.1}±{:.1}  loss {:.4}  pi {:.2}  R {:.4}",
            g.group,
            g.accuracy.mean,
            g.accuracy.se,
            g.loss.mean,
            g.privacy_cost.mean,
            g.excessive_risk.mean
        );
    }
}

fn execute(cli: Cli) -> fairdp::Result<()> {
    match cli.command {
        Command::Run(a) => {
            let kind = MechanismKind::parse(&a.mechanism)?;
            let cfg = build_config(&a, kind)?;
            summarize(&harness::run(&cfg)?);
        }
        Command::Ablation { run, mode } => {
            let mode = if mode == "magnitude" {
                AblationMode::Magnitude
            } else {
                AblationMode::Direction
            };
            let cfg = build_config(&run, MechanismKind::Nonprivate)?;
            summarize(&harness::ablation(&cfg, mode)?);
        }
        Command::Accountant {
            n,
            batch_size,
            sigma,
            epochs,
            delta,
            classic,
        } => {
            let (q, steps) = harness::derive_schedule(n, batch_size, epochs);
            let mut acc = AccountantState::new();
            acc.compose(q, sigma, steps);
            let conv = if classic {
                Conversion::Classic
            } else {
                Conversion::Improved
            };
            let (eps, order) = acc.to_epsilon_with(delta, conv)?;
            println!("q={q:.6} T={steps} eps={eps:.4} order={order}");
        }
        Command::Compare {
            baseline,
            out,
            loss_decimals,
            runs,
        } => {
            let rows = compare(&runs, &baseline, out.as_deref())?;
            print!("{}", format_table(&rows, loss_decimals));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
