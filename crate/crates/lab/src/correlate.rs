//! Correlation analysis over grid records: Kendall tau per measure, plus
//! granulated per-axis coefficients and their average.

use std::path::{Path, PathBuf};

use sharpness_core::analysis::{
    granulated_coefficients, kendall_tau, HyperGrid, MeasureGapPair, MetricKind,
};

use crate::csvio::{column, fmt_f64, parse_f64, read_csv, write_csv};
use crate::error::{LabError, Result};

#[derive(Clone, Debug)]
pub struct MeasureCorrelation {
    pub measure: String,
    pub n_used: usize,
    pub tau: f64,
    /// `(axis, psi)` in records order.
    pub psi: Vec<(String, f64)>,
    pub psi_average: f64,
    pub skipped_slices: usize,
}

#[derive(Clone, Debug)]
pub struct CorrelateOutcome {
    pub rows: Vec<MeasureCorrelation>,
    pub output_path: PathBuf,
    pub n_total: usize,
    pub n_used: usize,
}

/// Reads a grid records file, applies the training-accuracy filter, and
/// correlates every measure column against the chosen generalization gap.
pub fn run_correlate(
    records: &Path,
    gap_kind: MetricKind,
    min_train_acc: f64,
    out: &Path,
) -> Result<CorrelateOutcome> {
    let (header, rows) = read_csv(records)?;
    let axis_cols: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("hp."))
        .map(|(i, h)| (i, h["hp.".len()..].to_string()))
        .collect();
    let measure_cols: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("m."))
        .map(|(i, h)| (i, h["m.".len()..].to_string()))
        .collect();
    if axis_cols.is_empty() {
        return Err(LabError::invalid(format!(
            "{}: no hp.* axis columns found",
            records.display()
        )));
    }
    if measure_cols.is_empty() {
        return Err(LabError::invalid(format!(
            "{}: no m.* measure columns found",
            records.display()
        )));
    }
    let acc_col = column(records, &header, "train_acc")?;
    let gap_col = match gap_kind {
        MetricKind::Loss => column(records, &header, "gap_loss")?,
        MetricKind::Accuracy => column(records, &header, "gap_acc")?,
    };

    // Axis values come from the full record set so filtered-out runs leave
    // visible holes instead of silently shrinking the grid.
    let mut axes: Vec<(String, Vec<f64>)> = Vec::with_capacity(axis_cols.len());
    for (col, name) in &axis_cols {
        let mut values: Vec<f64> = Vec::new();
        for row in &rows {
            let v = parse_f64(records, name, &row[*col])?;
            if !values.iter().any(|&x| x == v) {
                values.push(v);
            }
        }
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite axis values"));
        axes.push((name.clone(), values));
    }

    let kept: Vec<&Vec<String>> = rows
        .iter()
        .filter(|row| {
            parse_f64(records, "train_acc", &row[acc_col]).is_ok_and(|acc| acc >= min_train_acc)
        })
        .collect();
    if kept.len() < 2 {
        return Err(LabError::invalid(format!(
            "only {} of {} records pass the training-accuracy filter (>= {min_train_acc}); need at least 2",
            kept.len(),
            rows.len()
        )));
    }

    let mut out_rows: Vec<MeasureCorrelation> = Vec::with_capacity(measure_cols.len());
    for (mcol, mname) in &measure_cols {
        let mut pairs = Vec::with_capacity(kept.len());
        let mut grid = HyperGrid::new(axes.clone())?;
        for row in &kept {
            let measure = parse_f64(records, mname, &row[*mcol])?;
            let gap = parse_f64(records, "gap", &row[gap_col])?;
            let pair = MeasureGapPair::new(measure, gap)?;
            pairs.push(pair);
            let indices: Vec<usize> = axis_cols
                .iter()
                .zip(&axes)
                .map(|((col, _), (_, values))| {
                    let v = parse_f64(records, "axis", &row[*col])?;
                    values
                        .iter()
                        .position(|&x| x == v)
                        .ok_or_else(|| LabError::invalid("axis value vanished from its own axis"))
                })
                .collect::<Result<_>>()?;
            grid.insert(indices, pair)?;
        }
        let tau = kendall_tau(&pairs)?;
        let gran = granulated_coefficients(&grid)?;
        out_rows.push(MeasureCorrelation {
            measure: mname.clone(),
            n_used: kept.len(),
            tau,
            psi: gran.per_axis,
            psi_average: gran.average,
            skipped_slices: gran.skipped.len(),
        });
    }

    std::fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    let output_path = out.join("correlation.csv");
    let mut header: Vec<String> = vec!["measure".into(), "n_used".into(), "tau".into()];
    for (name, _) in &axes {
        header.push(format!("psi.{name}"));
    }
    header.push("psi_avg".into());
    header.push("skipped_slices".into());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let csv_rows: Vec<Vec<String>> = out_rows
        .iter()
        .map(|r| {
            let mut row = vec![r.measure.clone(), r.n_used.to_string(), fmt_f64(r.tau)];
            row.extend(r.psi.iter().map(|(_, v)| fmt_f64(*v)));
            row.push(fmt_f64(r.psi_average));
            row.push(r.skipped_slices.to_string());
            row
        })
        .collect();
    write_csv(&output_path, &header_refs, &csv_rows)?;

    Ok(CorrelateOutcome {
        rows: out_rows,
        output_path,
        n_total: rows.len(),
        n_used: kept.len(),
    })
}

/// Lines comparing adaptive against plain sharpness per p-norm. Reported,
/// never asserted: desk-scale grids are too small to promise the ordering.
pub fn directional_report(rows: &[MeasureCorrelation]) -> Vec<String> {
    let find = |name: &str| rows.iter().find(|r| r.measure == name);
    let mut out = Vec::new();
    for (plain, adaptive, p) in [
        ("sharpness_p2", "adaptive_p2", "p=2"),
        ("sharpness_pinf", "adaptive_pinf", "p=inf"),
    ] {
        if let (Some(s), Some(a)) = (find(plain), find(adaptive)) {
            out.push(format!(
                "{p}: adaptive tau {} vs plain tau {} -> adaptive >= plain: {}",
                fmt_f64(a.tau),
                fmt_f64(s.tau),
                a.tau >= s.tau
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_records(dir: &Path, rows: &[(f64, f64, f64, f64, f64, f64)]) -> PathBuf {
        // (hp.a, hp.b, train_acc, gap_loss, m.sharpness_p2, m.adaptive_p2)
        let path = dir.join("records.csv");
        let csv_rows: Vec<Vec<String>> = rows
            .iter()
            .enumerate()
            .map(|(i, &(a, b, acc, gap, s, ad))| {
                vec![
                    i.to_string(),
                    fmt_f64(a),
                    fmt_f64(b),
                    fmt_f64(acc),
                    fmt_f64(gap),
                    fmt_f64(gap * 0.5),
                    fmt_f64(s),
                    fmt_f64(ad),
                ]
            })
            .collect();
        write_csv(
            &path,
            &["run", "hp.a", "hp.b", "train_acc", "gap_loss", "gap_acc", "m.sharpness_p2", "m.adaptive_p2"],
            &csv_rows,
        )
        .unwrap();
        path
    }

    #[test]
    fn correlates_a_2x2_grid() {
        let dir = tempfile::tempdir().unwrap();
        // Measure `adaptive_p2` equals the gap; `sharpness_p2` anti-orders.
        let rows = vec![
            (1.0, 1.0, 1.0, 0.1, 4.0, 0.1),
            (1.0, 2.0, 1.0, 0.2, 3.0, 0.2),
            (2.0, 1.0, 1.0, 0.3, 2.0, 0.3),
            (2.0, 2.0, 1.0, 0.4, 1.0, 0.4),
        ];
        let path = write_records(dir.path(), &rows);
        let out = run_correlate(&path, MetricKind::Loss, 0.5, dir.path()).unwrap();
        assert_eq!(out.n_used, 4);
        let adaptive = out.rows.iter().find(|r| r.measure == "adaptive_p2").unwrap();
        assert_eq!(adaptive.tau, 1.0);
        assert_eq!(adaptive.psi_average, 1.0);
        let plain = out.rows.iter().find(|r| r.measure == "sharpness_p2").unwrap();
        assert_eq!(plain.tau, -1.0);
        let report = directional_report(&out.rows);
        assert_eq!(report.len(), 1);
        assert!(report[0].contains("true"));
        assert!(out.output_path.exists());
    }

    #[test]
    fn accuracy_filter_drops_rows_and_reports_skips() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            (1.0, 1.0, 1.0, 0.1, 1.0, 0.1),
            (1.0, 2.0, 1.0, 0.2, 2.0, 0.2),
            (2.0, 1.0, 1.0, 0.3, 3.0, 0.3),
            (2.0, 2.0, 0.2, 0.4, 4.0, 0.4), // filtered out
        ];
        let path = write_records(dir.path(), &rows);
        let out = run_correlate(&path, MetricKind::Loss, 0.9, dir.path()).unwrap();
        assert_eq!(out.n_used, 3);
        for r in &out.rows {
            assert_eq!(r.skipped_slices, 2); // one slice per axis lost its record
        }
        // Too strict a filter is an error.
        assert!(run_correlate(&path, MetricKind::Loss, 2.0, dir.path()).is_err());
    }
}
