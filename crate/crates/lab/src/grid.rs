//! Hyperparameter grid runs: one training plus measurement per tuple,
//! executed by a worker pool, merged into a single records file.
//!
//! Per-run seeds derive from the base seed plus the tuple index, never from
//! scheduling order, so results do not depend on the worker count.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sharpness_core::analysis::{generalization_gap, MetricKind};

use crate::config::{GridAxes, RunConfig};
use crate::csvio::{fmt_f64, write_csv};
use crate::error::{LabError, Result};
use crate::measure::{measure_label, measure_params, standard_configs, training_split};
use crate::train::run_train;

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub records_path: PathBuf,
    pub failures_path: Option<PathBuf>,
    pub runs: usize,
    pub n_ok: usize,
    pub n_failed: usize,
}

struct RunRecord {
    values: Vec<f64>,
    seed: u64,
    train_loss: f64,
    train_acc: f64,
    test_loss: f64,
    test_acc: f64,
    measures: Vec<(String, f64)>,
}

/// Worker count after applying the `SHARPNESS_LAB_WORKERS` cap.
pub fn effective_workers(requested: Option<usize>, runs: usize) -> usize {
    let default = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut workers = requested.unwrap_or(default);
    if let Ok(cap) = std::env::var("SHARPNESS_LAB_WORKERS") {
        if let Ok(cap) = cap.trim().parse::<usize>() {
            if cap >= 1 {
                workers = workers.min(cap);
            }
        }
    }
    workers.clamp(1, runs.max(1))
}

fn tuple_for(index: usize, axes: &GridAxes) -> Vec<usize> {
    let mut rem = index;
    let mut idx = Vec::with_capacity(axes.axes.len());
    for (_, values) in &axes.axes {
        idx.push(rem % values.len());
        rem /= values.len();
    }
    idx
}

fn execute_cell(base: &RunConfig, axes: &GridAxes, index: usize, out: &Path) -> Result<RunRecord> {
    let tuple = tuple_for(index, axes);
    let mut rc = base.clone();
    let mut values = Vec::with_capacity(tuple.len());
    for (pos, (name, axis_values)) in axes.axes.iter().enumerate() {
        let v = axis_values[tuple[pos]];
        rc = rc.with_axis(name, v)?;
        values.push(v);
    }
    rc.seed = base.seed.wrapping_add(index as u64);
    rc.out = out.join("runs").join(format!("run_{index:04}"));

    let outcome = run_train(&rc)?;
    let cfgs = standard_configs(&rc.measure)?;
    let data = training_split(&rc, &rc.model)?;
    let rows = measure_params(&outcome.w, &rc.model, &data, &cfgs, rc.measure.m, rc.measure.steps)?;
    let measures = rows
        .iter()
        .map(|r| (measure_label(r.scheme, r.p), r.sharpness))
        .collect();
    Ok(RunRecord {
        values,
        seed: rc.seed,
        train_loss: outcome.final_train_loss,
        train_acc: outcome.final_train_acc,
        test_loss: outcome.final_test_loss,
        test_acc: outcome.final_test_acc,
        measures,
    })
}

/// Runs the full Cartesian grid. Individual run failures are recorded in
/// `failures.csv` and the grid continues.
pub fn run_grid(base: &RunConfig, axes: &GridAxes, workers: usize, out: &Path) -> Result<GridOutcome> {
    if axes.axes.is_empty() {
        return Err(LabError::invalid("grid needs at least one axis (grid.axis.<name> = v1,v2,...)"));
    }
    let runs: usize = axes.axes.iter().map(|(_, v)| v.len()).product();
    std::fs::create_dir_all(out.join("runs")).map_err(|e| LabError::io(out, e))?;

    let workers = effective_workers(Some(workers), runs);
    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<std::result::Result<RunRecord, String>>>> =
        (0..runs).map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= runs {
                    break;
                }
                let result = execute_cell(base, axes, index, out).map_err(|e| e.to_string());
                *results[index].lock().expect("result slot") = Some(result);
            });
        }
    });

    let mut header: Vec<String> = vec!["run".to_string()];
    for (name, _) in &axes.axes {
        header.push(format!("hp.{name}"));
    }
    header.extend(
        ["seed", "train_loss", "train_acc", "test_loss", "test_acc", "gap_loss", "gap_acc"]
            .map(str::to_string),
    );
    let mut measure_names: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut failures: Vec<Vec<String>> = Vec::new();
    for (index, slot) in results.iter().enumerate() {
        let result = slot.lock().expect("result slot").take().expect("every cell ran");
        match result {
            Ok(rec) => {
                if measure_names.is_empty() {
                    measure_names = rec.measures.iter().map(|(n, _)| format!("m.{n}")).collect();
                    header.extend(measure_names.iter().cloned());
                }
                let mut row = vec![index.to_string()];
                row.extend(rec.values.iter().map(|&v| fmt_f64(v)));
                row.push(rec.seed.to_string());
                row.push(fmt_f64(rec.train_loss));
                row.push(fmt_f64(rec.train_acc));
                row.push(fmt_f64(rec.test_loss));
                row.push(fmt_f64(rec.test_acc));
                row.push(fmt_f64(generalization_gap(rec.train_loss, rec.test_loss, MetricKind::Loss)));
                row.push(fmt_f64(generalization_gap(rec.train_acc, rec.test_acc, MetricKind::Accuracy)));
                row.extend(rec.measures.iter().map(|(_, v)| fmt_f64(*v)));
                rows.push(row);
            }
            Err(msg) => {
                let tuple = tuple_for(index, axes);
                let values: Vec<String> = axes
                    .axes
                    .iter()
                    .zip(&tuple)
                    .map(|((_, vs), &i)| fmt_f64(vs[i]))
                    .collect();
                let mut row = vec![index.to_string()];
                row.extend(values);
                row.push(msg.replace(',', ";").replace('\n', " "));
                failures.push(row);
            }
        }
    }

    let records_path = out.join("records.csv");
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&records_path, &header_refs, &rows)?;

    let failures_path = if failures.is_empty() {
        None
    } else {
        let mut fh: Vec<String> = vec!["run".into()];
        fh.extend(axes.axes.iter().map(|(n, _)| format!("hp.{n}")));
        fh.push("error".into());
        let fh_refs: Vec<&str> = fh.iter().map(String::as_str).collect();
        let p = out.join("failures.csv");
        write_csv(&p, &fh_refs, &failures)?;
        Some(p)
    };

    Ok(GridOutcome {
        records_path,
        failures_path,
        runs,
        n_ok: rows.len(),
        n_failed: failures.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{CliOverrides, KvConfig};

    fn base_config(out: &Path) -> (RunConfig, GridAxes) {
        let text = "\
model = input=dim:2;layers=dense:6,dense:2
dataset.kind = blobs
dataset.classes = 2
dataset.dim = 2
dataset.train_count = 40
dataset.test_count = 40
train.epochs = 3
train.batch_size = 8
optimizer.kind = sgd
seed = 3
grid.axis.batch_size = 8,16
grid.axis.weight_decay = 5e-4,5e-3
";
        let cfg = KvConfig::parse(text).unwrap();
        let ov = CliOverrides { out: Some(out.to_path_buf()), ..CliOverrides::default() };
        RunConfig::resolve(&cfg, &ov, Path::new(".")).unwrap()
    }

    #[test]
    fn grid_produces_one_record_per_tuple() {
        let dir = tempfile::tempdir().unwrap();
        let (rc, axes) = base_config(dir.path());
        let out = run_grid(&rc, &axes, 2, dir.path()).unwrap();
        assert_eq!(out.runs, 4);
        assert_eq!(out.n_ok, 4);
        assert_eq!(out.n_failed, 0);
        let (header, rows) = crate::csvio::read_csv(&out.records_path).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(header.contains(&"hp.batch_size".to_string()));
        assert!(header.contains(&"m.adaptive_p2".to_string()));
        // Tuples are distinct.
        let mut tuples: Vec<(String, String)> =
            rows.iter().map(|r| (r[1].clone(), r[2].clone())).collect();
        tuples.sort();
        tuples.dedup();
        assert_eq!(tuples.len(), 4);
    }

    #[test]
    fn one_by_one_grid_reduces_to_train_plus_measure() {
        let dir = tempfile::tempdir().unwrap();
        let text = "\
model = input=dim:2;layers=dense:6,dense:2
dataset.kind = blobs
dataset.classes = 2
dataset.dim = 2
dataset.train_count = 40
dataset.test_count = 40
train.epochs = 3
train.batch_size = 8
optimizer.kind = sgd
seed = 3
grid.axis.batch_size = 8
";
        let cfg = KvConfig::parse(text).unwrap();
        let ov = CliOverrides { out: Some(dir.path().to_path_buf()), ..CliOverrides::default() };
        let (rc, axes) = RunConfig::resolve(&cfg, &ov, Path::new(".")).unwrap();
        let out = run_grid(&rc, &axes, 1, dir.path()).unwrap();
        assert_eq!(out.runs, 1);
        let (header, rows) = crate::csvio::read_csv(&out.records_path).unwrap();
        assert_eq!(rows.len(), 1);

        // The same training run executed directly, with the grid's derived
        // seed and output location, produces the same metrics and measures.
        let mut direct = rc.clone();
        direct.seed = rc.seed; // tuple index 0 adds nothing
        direct.out = dir.path().join("direct");
        let t = run_train(&direct).unwrap();
        let col = |name: &str| header.iter().position(|h| h == name).unwrap();
        assert_eq!(rows[0][col("train_loss")], fmt_f64(t.final_train_loss));
        assert_eq!(rows[0][col("test_acc")], fmt_f64(t.final_test_acc));
        let cfgs = standard_configs(&direct.measure).unwrap();
        let data = training_split(&direct, &direct.model).unwrap();
        let measures = measure_params(&t.w, &direct.model, &data, &cfgs, None, 1).unwrap();
        for m in &measures {
            let name = format!("m.{}", measure_label(m.scheme, m.p));
            assert_eq!(rows[0][col(&name)], fmt_f64(m.sharpness));
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let dir = tempfile::tempdir().unwrap();
        let (rc, axes) = base_config(dir.path());
        let out1 = run_grid(&rc, &axes, 1, &dir.path().join("w1")).unwrap();
        let out4 = run_grid(&rc, &axes, 4, &dir.path().join("w4")).unwrap();
        let a = std::fs::read(&out1.records_path).unwrap();
        let b = std::fs::read(&out4.records_path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn failed_runs_are_recorded_and_the_grid_continues() {
        let dir = tempfile::tempdir().unwrap();
        let text = "\
model = input=dim:2;layers=dense:6,dense:2
dataset.kind = blobs
dataset.classes = 2
dataset.dim = 2
dataset.train_count = 40
dataset.test_count = 40
train.epochs = 3
train.batch_size = 8
optimizer.kind = sgd
seed = 3
grid.axis.learning_rate = 0.1,1e300
";
        let cfg = KvConfig::parse(text).unwrap();
        let ov = CliOverrides { out: Some(dir.path().to_path_buf()), ..CliOverrides::default() };
        let (rc, axes) = RunConfig::resolve(&cfg, &ov, Path::new(".")).unwrap();
        let out = run_grid(&rc, &axes, 1, dir.path()).unwrap();
        assert_eq!(out.runs, 2);
        assert_eq!(out.n_ok, 1);
        assert_eq!(out.n_failed, 1);
        let failures = out.failures_path.expect("failures file");
        let (_, rows) = crate::csvio::read_csv(&failures).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].last().unwrap().contains("divergence"), "{rows:?}");
    }

    #[test]
    fn env_cap_limits_workers() {
        // Modifies the process environment; no other test reads this var.
        std::env::set_var("SHARPNESS_LAB_WORKERS", "2");
        assert_eq!(effective_workers(Some(8), 100), 2);
        std::env::remove_var("SHARPNESS_LAB_WORKERS");
        assert_eq!(effective_workers(Some(8), 100), 8);
        assert_eq!(effective_workers(Some(8), 3), 3);
    }
}
