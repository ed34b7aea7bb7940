//! Sharpness measurement of trained checkpoints.

use std::path::{Path, PathBuf};

use sharpness_core::models::{corrupt_labels, BatchObjective, ModelSpec};
use sharpness_core::normops::{PNorm, PerturbationConfig, Scheme};
use sharpness_core::sharpness::{estimate_sharpness, m_sharpness_estimate};
use sharpness_core::{Dataset64, ParameterVector64};

use crate::checkpoint::load_checkpoint;
use crate::config::{MeasureConfig, RunConfig};
use crate::csvio::{append_csv, fmt_f64};
use crate::error::{LabError, Result};

pub const MEASURE_HEADER: &[&str] = &[
    "scheme",
    "p",
    "rho",
    "eta",
    "bias_norm",
    "m",
    "steps",
    "base_loss",
    "perturbed_loss",
    "sharpness",
];

#[derive(Clone, Debug)]
pub struct MeasureRow {
    pub scheme: Scheme,
    pub p: PNorm,
    pub rho: f64,
    pub eta: f64,
    pub bias_norm: bool,
    pub m: Option<usize>,
    pub steps: usize,
    pub base_loss: f64,
    pub perturbed_loss: f64,
    pub sharpness: f64,
}

impl MeasureRow {
    pub fn to_csv_row(&self) -> Vec<String> {
        vec![
            self.scheme.to_string(),
            self.p.to_string(),
            fmt_f64(self.rho),
            fmt_f64(self.eta),
            if self.bias_norm { "on".into() } else { "off".into() },
            self.m.map_or_else(|| "full".to_string(), |m| m.to_string()),
            self.steps.to_string(),
            fmt_f64(self.base_loss),
            fmt_f64(self.perturbed_loss),
            fmt_f64(self.sharpness),
        ]
    }
}

/// Short label for a measure configuration, used as a records column name:
/// plain sharpness is the identity scheme, "adaptive" anything normalized.
pub fn measure_label(scheme: Scheme, p: PNorm) -> String {
    let kind = match scheme {
        Scheme::Identity => "sharpness",
        _ => "adaptive",
    };
    let p = match p {
        PNorm::Two => "p2",
        PNorm::Inf => "pinf",
    };
    format!("{kind}_{p}")
}

/// The four standard measurement setups: plain and element-wise adaptive
/// sharpness, each at p = 2 and p = inf.
pub fn standard_configs(mc: &MeasureConfig) -> Result<Vec<PerturbationConfig<f64>>> {
    let mut out = Vec::with_capacity(4);
    for p in [PNorm::Two, PNorm::Inf] {
        out.push(PerturbationConfig::new(mc.rho, p, Scheme::Identity, 0.0, false)?);
        out.push(PerturbationConfig::new(mc.rho, p, Scheme::Elementwise, mc.eta, mc.bias_norm)?);
    }
    Ok(out)
}

/// Measures every requested configuration on the given data.
pub fn measure_params(
    w: &ParameterVector64,
    spec: &ModelSpec,
    data: &Dataset64,
    cfgs: &[PerturbationConfig<f64>],
    m: Option<usize>,
    steps: usize,
) -> Result<Vec<MeasureRow>> {
    let obj = BatchObjective::from_dataset(spec, data)?;
    let mut rows = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        let report = match m {
            Some(m) => m_sharpness_estimate(w, &obj, cfg, m, steps)?,
            None => estimate_sharpness(w, &obj, cfg, steps)?,
        };
        rows.push(MeasureRow {
            scheme: cfg.scheme,
            p: cfg.p,
            rho: cfg.rho,
            eta: cfg.eta,
            bias_norm: cfg.bias_normalized,
            m,
            steps,
            base_loss: report.base_loss,
            perturbed_loss: report.perturbed_loss,
            sharpness: report.sharpness,
        });
    }
    Ok(rows)
}

/// Rebuilds the training split exactly as `run_train` saw it (same seed
/// streams, same label noise) so measurements refer to the trained loss.
pub fn training_split(rc: &RunConfig, spec: &ModelSpec) -> Result<Dataset64> {
    let (clean_train, _) = crate::dataset::load_datasets(&rc.dataset, &spec.input, rc.seed)?;
    if rc.noise_rate > 0.0 {
        Ok(corrupt_labels(&clean_train, rc.noise_rate, rc.seed.wrapping_add(2))?)
    } else {
        Ok(clean_train)
    }
}

/// Loads a checkpoint, measures the requested configurations on the run's
/// training split, and appends the rows to `sharpness.csv` in the output
/// directory.
pub fn run_measure(
    rc: &RunConfig,
    checkpoint: &Path,
    cfgs: &[PerturbationConfig<f64>],
    m: Option<usize>,
    steps: usize,
    out: &Path,
) -> Result<(Vec<MeasureRow>, PathBuf)> {
    if steps < 1 {
        return Err(LabError::invalid("measure needs steps >= 1"));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let data = training_split(rc, &ckpt.spec)?;
    let rows = measure_params(&ckpt.params, &ckpt.spec, &data, cfgs, m, steps)?;
    std::fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    let path = out.join("sharpness.csv");
    let csv_rows: Vec<Vec<String>> = rows.iter().map(MeasureRow::to_csv_row).collect();
    append_csv(&path, MEASURE_HEADER, &csv_rows)?;
    Ok((rows, path))
}
