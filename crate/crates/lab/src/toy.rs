//! The two-parameter toy problem: full-gradient descent on
//! `L(w) = |w1·relu(w2) − 0.04|` with plain, SAM or ASAM updates.
//!
//! The minimizers form the valley `{w1·w2 = 0.04, w2 > 0}`. SAM's fixed
//! spherical ball makes its behavior depend on where on the valley the run
//! starts; ASAM's normalized ball does not.

use std::path::PathBuf;
use std::sync::Arc;

use sharpness_core::graph::Graph;
use sharpness_core::models::{ParameterLayout, ParameterVector};
use sharpness_core::normops::{PNorm, PerturbationConfig, Scheme};
use sharpness_core::optim::{base_update, two_step_update, BaseOptimizer, LrSchedule, Objective, OptimizerState};
use sharpness_core::tensor::Tensor;
use sharpness_core::{Error as CoreError, ParameterVector64, Result as CoreResult};

use crate::config::OptimizerKind;
use crate::csvio::{fmt_f64, write_csv};
use crate::error::{LabError, Result};

pub const TOY_TARGET: f64 = 0.04;

/// `|w1·relu(w2) − 0.04|` evaluated through the autodiff tape.
pub struct ToyLoss;

impl Objective<f64> for ToyLoss {
    fn loss(&self, w: &ParameterVector<f64>) -> CoreResult<f64> {
        let (w1, w2) = (w.values()[0], w.values()[1]);
        let v = w1 * w2.max(0.0) - TOY_TARGET;
        if !v.is_finite() {
            return Err(CoreError::NonFinite { op: "toy_loss" });
        }
        Ok(v.abs())
    }

    fn loss_and_grad(&self, w: &ParameterVector<f64>) -> CoreResult<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let w1 = g.leaf(Tensor::scalar(w.values()[0])?);
        let w2 = g.leaf(Tensor::scalar(w.values()[1])?);
        let r = g.relu(w2)?;
        let prod = g.mul(w1, r)?;
        let c = g.input(Tensor::scalar(-TOY_TARGET)?);
        let shifted = g.add(prod, c)?;
        let loss = g.abs(shifted)?;
        let grads = g.backward(loss)?;
        Ok((
            g.value(loss).item()?,
            vec![
                grads.wrt(w1).expect("leaf").item()?,
                grads.wrt(w2).expect("leaf").item()?,
            ],
        ))
    }
}

/// Parameter vector over the trivial two-coordinate layout.
pub fn toy_parameters(w1: f64, w2: f64) -> ParameterVector64 {
    let layout = Arc::new(ParameterLayout {
        k: 2,
        filter_groups: vec![],
        bias_mask: vec![false, false],
        node_map: vec![],
    });
    ParameterVector64::new(vec![w1, w2], layout).expect("finite toy parameters")
}

/// Euclidean distance from a point to the valley `{w1·w2 = 0.04, w2 > 0}`,
/// by log-spaced scan plus local refinement over the parametrization
/// `t ↦ (0.04/t, t)`.
pub fn valley_distance(w1: f64, w2: f64) -> f64 {
    let d2 = |t: f64| -> f64 {
        let dx = w1 - TOY_TARGET / t;
        let dy = w2 - t;
        dx * dx + dy * dy
    };
    let mut best_t = 1e-4;
    let mut best = d2(best_t);
    let steps = 4000;
    for i in 0..=steps {
        let t = 1e-4 * 10f64.powf(8.0 * i as f64 / steps as f64); // 1e-4 .. 1e4
        let v = d2(t);
        if v < best {
            best = v;
            best_t = t;
        }
    }
    let (mut lo, mut hi) = (best_t / 1.05, best_t * 1.05);
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if d2(m1) < d2(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    d2(0.5 * (lo + hi)).sqrt().min(best.sqrt())
}

#[derive(Clone, Debug)]
pub struct ToyConfig {
    pub optimizer: OptimizerKind,
    pub rho: f64,
    pub p: PNorm,
    pub scheme: Scheme,
    pub eta: f64,
    pub init: (f64, f64),
    pub lr: f64,
    pub steps: usize,
    pub out: PathBuf,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            optimizer: OptimizerKind::Sam,
            rho: 0.05,
            p: PNorm::Two,
            scheme: Scheme::Elementwise,
            eta: 0.0,
            init: (0.2, 0.05),
            lr: 0.01,
            steps: 1000,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToySummary {
    pub final_w: (f64, f64),
    pub final_loss: f64,
    pub valley_distance: f64,
    pub steps_run: usize,
    pub diverged: bool,
    pub trajectory_path: PathBuf,
    pub summary_path: PathBuf,
}

/// Runs the toy descent, writing one trajectory row per step plus a
/// one-row summary. Divergence is recorded in the summary rather than
/// aborting the write.
pub fn run_toy(cfg: &ToyConfig) -> Result<ToySummary> {
    if cfg.steps < 1 {
        return Err(LabError::invalid("toy needs steps >= 1"));
    }
    if cfg.lr <= 0.0 || !cfg.lr.is_finite() {
        return Err(LabError::invalid("toy needs a positive learning rate"));
    }
    std::fs::create_dir_all(&cfg.out).map_err(|e| LabError::io(&cfg.out, e))?;

    let mut w = toy_parameters(cfg.init.0, cfg.init.1);
    let base = match cfg.optimizer {
        OptimizerKind::Adam => BaseOptimizer::adam(),
        _ => BaseOptimizer::sgd(0.0),
    };
    let mut state = OptimizerState::new(2, base, LrSchedule::Constant(cfg.lr), 0.0);
    let pert = PerturbationConfig::new(
        cfg.rho,
        cfg.p,
        match cfg.optimizer {
            OptimizerKind::Asam => cfg.scheme,
            _ => Scheme::Identity,
        },
        cfg.eta,
        false,
    )?;

    let mut rows: Vec<Vec<String>> = Vec::with_capacity(cfg.steps + 1);
    let mut diverged = false;
    let mut steps_run = 0usize;
    let record = |rows: &mut Vec<Vec<String>>, step: usize, w: &ParameterVector64, loss: f64| {
        rows.push(vec![
            step.to_string(),
            fmt_f64(w.values()[0]),
            fmt_f64(w.values()[1]),
            fmt_f64(loss),
        ]);
    };
    record(&mut rows, 0, &w, ToyLoss.loss(&w)?);
    for step in 1..=cfg.steps {
        let outcome = match cfg.optimizer {
            OptimizerKind::Sgd | OptimizerKind::Adam => base_update(&mut w, &mut state, &ToyLoss),
            OptimizerKind::Sam => two_step_update(&mut w, &mut state, &ToyLoss, &pert, false),
            OptimizerKind::Asam => two_step_update(&mut w, &mut state, &ToyLoss, &pert, true),
        };
        match outcome {
            Ok(_) => {
                steps_run = step;
                match ToyLoss.loss(&w) {
                    Ok(loss) => record(&mut rows, step, &w, loss),
                    Err(_) => {
                        diverged = true;
                        break;
                    }
                }
            }
            Err(CoreError::Divergence { .. }) | Err(CoreError::NonFinite { .. }) => {
                diverged = true;
                steps_run = step - 1;
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }

    let trajectory_path = cfg.out.join("trajectory.csv");
    write_csv(&trajectory_path, &["step", "w1", "w2", "loss"], &rows)?;

    let (f1, f2) = (w.values()[0], w.values()[1]);
    let final_loss = ToyLoss.loss(&w).unwrap_or(f64::NAN);
    let dist = valley_distance(f1, f2);
    let summary_path = cfg.out.join("summary.csv");
    write_csv(
        &summary_path,
        &[
            "optimizer",
            "rho",
            "p",
            "norm",
            "eta",
            "init_w1",
            "init_w2",
            "lr",
            "steps",
            "final_w1",
            "final_w2",
            "final_loss",
            "valley_distance",
            "diverged",
        ],
        &[vec![
            cfg.optimizer.to_string(),
            fmt_f64(cfg.rho),
            cfg.p.to_string(),
            pert.scheme.to_string(),
            fmt_f64(cfg.eta),
            fmt_f64(cfg.init.0),
            fmt_f64(cfg.init.1),
            fmt_f64(cfg.lr),
            steps_run.to_string(),
            fmt_f64(f1),
            fmt_f64(f2),
            fmt_f64(final_loss),
            fmt_f64(dist),
            diverged.to_string(),
        ]],
    )?;

    Ok(ToySummary {
        final_w: (f1, f2),
        final_loss,
        valley_distance: dist,
        steps_run,
        diverged,
        trajectory_path,
        summary_path,
    })
}
