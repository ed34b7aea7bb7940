//! Command-line interface: `toy`, `train`, `grid`, `measure`, `correlate`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use sharpness_core::analysis::{generalization_bound_penalty, BoundInputs, MetricKind};
use sharpness_core::normops::{PNorm, PerturbationConfig, Scheme};
use sharpness_core::vecops::l2_norm;

use crate::config::{CliOverrides, OptimizerKind, RunConfig};
use crate::correlate::{directional_report, run_correlate};
use crate::csvio::fmt_f64;
use crate::error::{LabError, Result};
use crate::grid::{effective_workers, run_grid};
use crate::measure::{run_measure, MeasureRow};
use crate::toy::{run_toy, ToyConfig};
use crate::train::run_train;

#[derive(Parser, Debug)]
#[command(
    name = "sharpness-lab",
    version,
    about = "SAM/ASAM training, sharpness measurement and correlation studies"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Full-gradient descent on the two-parameter toy problem.
    Toy(ToyArgs),
    /// Train a model per a config file.
    Train(TrainArgs),
    /// Run a hyperparameter grid of trainings plus measurements.
    Grid(GridArgs),
    /// Measure sharpness of a saved checkpoint.
    #[command(visible_alias = "sharpness")]
    Measure(MeasureArgs),
    /// Correlate grid measures against generalization gaps.
    Correlate(CorrelateArgs),
}

#[derive(Args, Debug)]
struct ToyArgs {
    /// sgd, adam, sam or asam
    #[arg(long, default_value = "sam")]
    optimizer: String,
    /// Perturbation radius; defaults to 0.05 for SAM, 0.5 for ASAM.
    #[arg(long)]
    rho: Option<f64>,
    /// 2 or inf
    #[arg(long, default_value = "2")]
    p: String,
    /// none, elementwise or filterwise
    #[arg(long, default_value = "elementwise")]
    norm: String,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    /// Initial point as `w1,w2`.
    #[arg(long, default_value = "0.2,0.05")]
    init: String,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Overrides shared by the config-driven subcommands.
#[derive(Args, Debug, Default)]
struct OverrideArgs {
    /// sgd, adam, sam or asam
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    rho: Option<f64>,
    /// 2 or inf
    #[arg(long)]
    p: Option<String>,
    /// none, elementwise or filterwise
    #[arg(long)]
    norm: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    /// on or off
    #[arg(long = "bias-norm")]
    bias_norm: Option<String>,
    /// m-sharpness chunk size for training (0 = full batch).
    #[arg(long)]
    m: Option<usize>,
    /// Symmetric label-noise rate on the training split.
    #[arg(long = "noise-rate")]
    noise_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (capped by SHARPNESS_LAB_WORKERS).
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args, Debug)]
struct MeasureArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    /// 2, inf or both
    #[arg(long, default_value = "both")]
    p: String,
    /// none, elementwise, filterwise or all (= none + elementwise)
    #[arg(long, default_value = "all")]
    norm: String,
    /// on or off
    #[arg(long = "bias-norm")]
    bias_norm: Option<String>,
    /// m-sharpness chunk size (0 = full data).
    #[arg(long)]
    m: Option<usize>,
    /// Ascent steps per estimate (1 = closed form).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also print the generalization-bound penalty for this delta.
    #[arg(long = "bound-delta")]
    bound_delta: Option<f64>,
    /// Constant standing in for the bound's O(1) term.
    #[arg(long = "bound-constant", default_value_t = 0.0)]
    bound_constant: f64,
}

#[derive(Args, Debug)]
struct CorrelateArgs {
    #[arg(long)]
    records: PathBuf,
    /// loss or acc
    #[arg(long, default_value = "loss")]
    gap: String,
    #[arg(long = "min-train-acc", default_value_t = 0.99)]
    min_train_acc: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_bias_norm(s: Option<&str>) -> Result<Option<bool>> {
    match s {
        None => Ok(None),
        Some("on") => Ok(Some(true)),
        Some("off") => Ok(Some(false)),
        Some(other) => Err(LabError::invalid(format!("--bias-norm wants on/off, got `{other}`"))),
    }
}

fn overrides_from(args: &OverrideArgs) -> Result<CliOverrides> {
    Ok(CliOverrides {
        optimizer: args.optimizer.as_deref().map(str::parse).transpose()?,
        rho: args.rho,
        p: args.p.as_deref().map(str::parse).transpose().map_err(LabError::from)?,
        scheme: args.norm.as_deref().map(str::parse).transpose().map_err(LabError::from)?,
        eta: args.eta,
        bias_norm: parse_bias_norm(args.bias_norm.as_deref())?,
        m: args.m,
        noise_rate: args.noise_rate,
        seed: args.seed,
        out: Some(args.out.clone()),
    })
}

fn parse_init(s: &str) -> Result<(f64, f64)> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| LabError::invalid(format!("--init wants `w1,w2`, got `{s}`")))?;
    let w1: f64 = a.trim().parse().map_err(|_| LabError::invalid(format!("bad init w1 `{a}`")))?;
    let w2: f64 = b.trim().parse().map_err(|_| LabError::invalid(format!("bad init w2 `{b}`")))?;
    if !w1.is_finite() || !w2.is_finite() {
        return Err(LabError::invalid("init must be finite"));
    }
    Ok((w1, w2))
}

fn print_measure_rows(rows: &[MeasureRow]) {
    for r in rows {
        println!(
            "scheme={} p={} rho={} eta={} m={} steps={}: base={} perturbed={} sharpness={}",
            r.scheme,
            r.p,
            fmt_f64(r.rho),
            fmt_f64(r.eta),
            r.m.map_or_else(|| "full".to_string(), |m| m.to_string()),
            r.steps,
            fmt_f64(r.base_loss),
            fmt_f64(r.perturbed_loss),
            fmt_f64(r.sharpness),
        );
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Toy(args) => {
            let optimizer: OptimizerKind = args.optimizer.parse()?;
            let cfg = ToyConfig {
                optimizer,
                rho: args.rho.unwrap_or(match optimizer {
                    OptimizerKind::Asam => 0.5,
                    _ => 0.05,
                }),
                p: args.p.parse::<PNorm>()?,
                scheme: args.norm.parse::<Scheme>()?,
                eta: args.eta,
                init: parse_init(&args.init)?,
                lr: args.lr,
                steps: args.steps,
                out: args.out,
            };
            let summary = run_toy(&cfg)?;
            println!(
                "toy {}: final w = ({}, {}), loss = {}, valley distance = {}",
                optimizer,
                fmt_f64(summary.final_w.0),
                fmt_f64(summary.final_w.1),
                fmt_f64(summary.final_loss),
                fmt_f64(summary.valley_distance),
            );
            println!("trajectory: {}", summary.trajectory_path.display());
            println!("summary: {}", summary.summary_path.display());
            if summary.diverged {
                return Err(LabError::Divergence(format!(
                    "toy run diverged after {} steps; summary recorded",
                    summary.steps_run
                )));
            }
            Ok(())
        }
        Command::Train(args) => {
            let overrides = overrides_from(&args.overrides)?;
            let (rc, _) = RunConfig::load(&args.config, &overrides)?;
            let out = run_train(&rc)?;
            println!(
                "train: {} steps, train loss {} acc {}, test loss {} acc {}",
                out.steps,
                fmt_f64(out.final_train_loss),
                fmt_f64(out.final_train_acc),
                fmt_f64(out.final_test_loss),
                fmt_f64(out.final_test_acc),
            );
            println!("checkpoint: {}", out.checkpoint_path.display());
            println!("metrics: {}", out.metrics_path.display());
            Ok(())
        }
        Command::Grid(args) => {
            let overrides = overrides_from(&args.overrides)?;
            let (rc, axes) = RunConfig::load(&args.config, &overrides)?;
            let runs: usize = axes.axes.iter().map(|(_, v)| v.len()).product();
            let workers = effective_workers(args.workers.or(axes.workers), runs.max(1));
            let out = run_grid(&rc, &axes, workers, &rc.out)?;
            println!(
                "grid: {} runs, {} ok, {} failed ({} workers)",
                out.runs, out.n_ok, out.n_failed, workers
            );
            println!("records: {}", out.records_path.display());
            if let Some(f) = &out.failures_path {
                println!("failures: {}", f.display());
            }
            if out.n_ok == 0 {
                return Err(LabError::invalid("every grid run failed"));
            }
            Ok(())
        }
        Command::Measure(args) => {
            let overrides = CliOverrides {
                seed: args.seed,
                out: Some(args.out.clone()),
                ..CliOverrides::default()
            };
            let (mut rc, _) = RunConfig::load(&args.config, &overrides)?;
            if let Some(rho) = args.rho {
                rc.measure.rho = rho;
            }
            if let Some(eta) = args.eta {
                rc.measure.eta = eta;
            }
            if let Some(b) = parse_bias_norm(args.bias_norm.as_deref())? {
                rc.measure.bias_norm = b;
            }
            if let Some(m) = args.m {
                rc.measure.m = if m == 0 { None } else { Some(m) };
            }
            if let Some(s) = args.steps {
                rc.measure.steps = s;
            }
            let ps: Vec<PNorm> = match args.p.as_str() {
                "both" => vec![PNorm::Two, PNorm::Inf],
                other => vec![other.parse()?],
            };
            let schemes: Vec<Scheme> = match args.norm.as_str() {
                "all" => vec![Scheme::Identity, Scheme::Elementwise],
                other => vec![other.parse()?],
            };
            let mut cfgs = Vec::new();
            for &p in &ps {
                for &scheme in &schemes {
                    let eta = match scheme {
                        Scheme::Identity => 0.0,
                        _ => rc.measure.eta,
                    };
                    cfgs.push(PerturbationConfig::new(rc.measure.rho, p, scheme, eta, rc.measure.bias_norm)?);
                }
            }
            let (rows, path) =
                run_measure(&rc, &args.checkpoint, &cfgs, rc.measure.m, rc.measure.steps, &rc.out)?;
            print_measure_rows(&rows);
            println!("rows appended to {}", path.display());
            if let Some(delta) = args.bound_delta {
                let ckpt = crate::checkpoint::load_checkpoint(&args.checkpoint)?;
                let data = crate::measure::training_split(&rc, &ckpt.spec)?;
                let inputs = BoundInputs {
                    param_count: ckpt.params.k(),
                    sample_count: data.len() as f64,
                    delta,
                    rho: rc.measure.rho,
                    eta: rc.measure.eta,
                    weight_norm: l2_norm(ckpt.params.values()),
                    constant: args.bound_constant,
                };
                let penalty = generalization_bound_penalty(&inputs)?;
                println!(
                    "bound penalty (k={}, n={}, delta={}): {}",
                    inputs.param_count,
                    data.len(),
                    fmt_f64(delta),
                    fmt_f64(penalty)
                );
            }
            Ok(())
        }
        Command::Correlate(args) => {
            let gap = match args.gap.as_str() {
                "loss" => MetricKind::Loss,
                "acc" => MetricKind::Accuracy,
                other => return Err(LabError::invalid(format!("--gap wants loss/acc, got `{other}`"))),
            };
            let out = run_correlate(&args.records, gap, args.min_train_acc, &args.out)?;
            println!(
                "correlate: {} of {} records pass the train-accuracy filter",
                out.n_used, out.n_total
            );
            for row in &out.rows {
                let psi: Vec<String> = row
                    .psi
                    .iter()
                    .map(|(name, v)| format!("psi[{name}]={}", fmt_f64(*v)))
                    .collect();
                println!(
                    "{}: tau={} {} Psi={} (skipped slices: {})",
                    row.measure,
                    fmt_f64(row.tau),
                    psi.join(" "),
                    fmt_f64(row.psi_average),
                    row.skipped_slices
                );
            }
            for line in directional_report(&out.rows) {
                println!("{line}");
            }
            println!("written: {}", out.output_path.display());
            Ok(())
        }
    }
}
