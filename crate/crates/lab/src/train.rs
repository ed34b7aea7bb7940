//! Training runs: datasets, optimizer loop, per-epoch metrics, checkpoint.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sharpness_core::models::{build_model, corrupt_labels, evaluate, BatchObjective};
use sharpness_core::normops::PerturbationConfig;
use sharpness_core::optim::{
    base_update, m_sharpness_grad, two_step_update, BaseOptimizer, LrSchedule, OptimizerState,
};
use sharpness_core::vecops::l2_norm;
use sharpness_core::{Dataset64, Error as CoreError, ParameterVector64};

use crate::config::{BaseKind, OptimizerKind, RunConfig, ScheduleKind};
use crate::checkpoint::{save_checkpoint, TrainMeta};
use crate::csvio::{fmt_f64, write_csv};
use crate::dataset::load_datasets;
use crate::error::{LabError, Result};

/// Sub-seed offsets carving independent streams out of the run seed.
const SEED_SHUFFLE: u64 = 1;
const SEED_NOISE: u64 = 2;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub w: ParameterVector64,
    pub train: Dataset64,
    pub test: Dataset64,
    pub final_train_loss: f64,
    pub final_train_acc: f64,
    pub final_test_loss: f64,
    pub final_test_acc: f64,
    pub steps: u64,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

pub fn build_perturbation(rc: &RunConfig) -> Result<PerturbationConfig<f64>> {
    let o = &rc.optimizer;
    let scheme = match o.kind {
        OptimizerKind::Asam => o.scheme,
        _ => sharpness_core::normops::Scheme::Identity,
    };
    Ok(PerturbationConfig::new(o.rho, o.p, scheme, o.eta, o.bias_norm)?)
}

fn fisher_yates(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Trains per the configuration and writes `metrics.csv` plus `model.ckpt`
/// into its output directory. Deterministic given the seed.
pub fn run_train(rc: &RunConfig) -> Result<TrainOutcome> {
    std::fs::create_dir_all(&rc.out).map_err(|e| LabError::io(&rc.out, e))?;
    let (clean_train, test) = load_datasets(&rc.dataset, &rc.model.input, rc.seed)?;
    let train = if rc.noise_rate > 0.0 {
        corrupt_labels(&clean_train, rc.noise_rate, rc.seed.wrapping_add(SEED_NOISE))?
    } else {
        clean_train
    };

    let mut w = build_model(&rc.model, rc.seed)?;
    let n = train.len();
    let batches_per_epoch = n.div_ceil(rc.batch_size);
    let total_steps = (rc.epochs * batches_per_epoch) as u64;
    let schedule = match rc.optimizer.schedule {
        ScheduleKind::Constant => LrSchedule::Constant(rc.optimizer.lr),
        ScheduleKind::Cosine => LrSchedule::Cosine { initial: rc.optimizer.lr, total_steps },
    };
    let base = match rc.optimizer.base {
        BaseKind::Sgd => BaseOptimizer::sgd(rc.optimizer.momentum),
        BaseKind::Adam => BaseOptimizer::adam(),
    };
    let mut state = OptimizerState::new(w.k(), base, schedule, rc.optimizer.weight_decay);
    let pert = build_perturbation(rc)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(rc.seed.wrapping_add(SEED_SHUFFLE));
    let mut metric_rows: Vec<Vec<String>> = Vec::with_capacity(rc.epochs);
    let mut finals = (f64::NAN, f64::NAN, f64::NAN, f64::NAN);

    for epoch in 0..rc.epochs {
        let order = fisher_yates(&mut shuffle_rng, n);
        for chunk in order.chunks(rc.batch_size) {
            let (feats, labels) = train.gather(chunk)?;
            let obj = BatchObjective::new(&rc.model, feats, labels)?;
            let step = state.step_count();
            let outcome = match (rc.optimizer.kind, rc.optimizer.m) {
                (OptimizerKind::Sgd | OptimizerKind::Adam, _) => base_update(&mut w, &mut state, &obj).map(|_| ()),
                (kind, Some(m)) if m < chunk.len() => {
                    // m-sharpness: per-chunk perturbations, averaged gradient,
                    // then one base step with weight decay folded in.
                    m_step(&mut w, &mut state, &obj, m, &pert, kind == OptimizerKind::Asam)
                }
                (kind, _) => {
                    two_step_update(&mut w, &mut state, &obj, &pert, kind == OptimizerKind::Asam).map(|_| ())
                }
            };
            outcome.map_err(|e| match e {
                CoreError::Divergence { .. } | CoreError::NonFinite { .. } => {
                    LabError::Divergence(format!("epoch {epoch}, step {step}"))
                }
                other => other.into(),
            })?;
        }
        let (train_loss, train_acc) = evaluate(&w, &rc.model, &train)?;
        let (test_loss, test_acc) = evaluate(&w, &rc.model, &test)?;
        if !train_loss.is_finite() || !test_loss.is_finite() {
            return Err(LabError::Divergence(format!("epoch {epoch} evaluation")));
        }
        finals = (train_loss, train_acc, test_loss, test_acc);
        metric_rows.push(vec![
            epoch.to_string(),
            fmt_f64(train_loss),
            fmt_f64(train_acc),
            fmt_f64(test_loss),
            fmt_f64(test_acc),
        ]);
    }

    let metrics_path = rc.out.join("metrics.csv");
    write_csv(
        &metrics_path,
        &["epoch", "train_loss", "train_acc", "test_loss", "test_acc"],
        &metric_rows,
    )?;
    let checkpoint_path = rc.out.join("model.ckpt");
    let meta = TrainMeta {
        seed: rc.seed,
        steps: state.step_count(),
        final_train_loss: finals.0,
        final_test_loss: finals.2,
    };
    save_checkpoint(&checkpoint_path, &rc.model, &w, &meta)?;

    Ok(TrainOutcome {
        w,
        train,
        test,
        final_train_loss: finals.0,
        final_train_acc: finals.1,
        final_test_loss: finals.2,
        final_test_acc: finals.3,
        steps: state.step_count(),
        checkpoint_path,
        metrics_path,
    })
}

/// One m-sharpness training step: averaged per-chunk perturbed gradient fed
/// to the base optimizer together with the weight-decay term.
fn m_step(
    w: &mut ParameterVector64,
    state: &mut OptimizerState<f64>,
    obj: &BatchObjective<'_, f64>,
    m: usize,
    pert: &PerturbationConfig<f64>,
    use_asam: bool,
) -> std::result::Result<(), CoreError> {
    let grad = m_sharpness_grad(w, obj, m, pert, use_asam)?;
    if !l2_norm(&grad).is_finite() {
        return Err(CoreError::Divergence { step: state.step_count() });
    }
    state.apply_with_weight_decay(w, &grad);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{CliOverrides, KvConfig};
    use std::path::Path;

    fn blob_config(extra: &str, out: &Path) -> RunConfig {
        let text = format!(
            "\
model = input=dim:2;layers=dense:8,dense:2
dataset.kind = blobs
dataset.classes = 2
dataset.dim = 2
dataset.train_count = 80
dataset.test_count = 80
dataset.separation = 6.0
train.epochs = 20
train.batch_size = 16
optimizer.lr = 0.1
seed = 5
{extra}"
        );
        let cfg = KvConfig::parse(&text).unwrap();
        let ov = CliOverrides { out: Some(out.to_path_buf()), ..CliOverrides::default() };
        RunConfig::resolve(&cfg, &ov, Path::new(".")).unwrap().0
    }

    #[test]
    fn sgd_learns_separable_blobs() {
        let dir = tempfile::tempdir().unwrap();
        let rc = blob_config("optimizer.kind = sgd\n", dir.path());
        // Oracle: the blobs really are separable before asking the net.
        let (train, _) = load_datasets(&rc.dataset, &rc.model.input, rc.seed).unwrap();
        assert!(crate::dataset::linear_probe_accuracy(&train) > 0.99);
        let out = run_train(&rc).unwrap();
        assert!(out.final_train_acc > 0.9, "train acc {}", out.final_train_acc);
        assert!(out.checkpoint_path.exists() && out.metrics_path.exists());
    }

    #[test]
    fn same_seed_gives_identical_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let rc1 = blob_config("optimizer.kind = asam\n", &dir.path().join("a"));
        let rc2 = blob_config("optimizer.kind = asam\n", &dir.path().join("b"));
        let a = run_train(&rc1).unwrap();
        let b = run_train(&rc2).unwrap();
        let ma = std::fs::read(&a.metrics_path).unwrap();
        let mb = std::fs::read(&b.metrics_path).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn rho_zero_asam_matches_plain_sgd() {
        let dir = tempfile::tempdir().unwrap();
        let rc_plain = blob_config("optimizer.kind = sgd\n", &dir.path().join("plain"));
        let rc_asam = blob_config("optimizer.kind = asam\noptimizer.rho = 0\n", &dir.path().join("asam"));
        let a = run_train(&rc_plain).unwrap();
        let b = run_train(&rc_asam).unwrap();
        for (x, y) in a.w.values().iter().zip(b.w.values()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn m_sharpness_training_runs() {
        let dir = tempfile::tempdir().unwrap();
        let rc = blob_config("optimizer.kind = asam\noptimizer.m = 4\n", dir.path());
        let out = run_train(&rc).unwrap();
        assert!(out.final_train_acc > 0.8);
    }
}
