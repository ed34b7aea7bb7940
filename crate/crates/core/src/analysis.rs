//! Rank-correlation statistics and the generalization-bound diagnostic.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};

/// One observation: a measure value and the generalization gap of the same
/// trained model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeasureGapPair<S> {
    pub measure: S,
    pub gap: S,
}

impl<S: Scalar> MeasureGapPair<S> {
    pub fn new(measure: S, gap: S) -> Result<Self> {
        if !measure.is_finite() || !gap.is_finite() {
            return Err(Error::NonFinite { op: "measure_gap_pair" });
        }
        Ok(MeasureGapPair { measure, gap })
    }
}

/// Which direction "worse generalization" points for a metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    /// Lower is better; gap = test - train.
    Loss,
    /// Higher is better; gap = train - test.
    Accuracy,
}

/// Generalization gap with its sign chosen so larger values mean worse
/// generalization.
pub fn generalization_gap<S: Scalar>(train: S, test: S, kind: MetricKind) -> S {
    match kind {
        MetricKind::Loss => test - train,
        MetricKind::Accuracy => train - test,
    }
}

fn sign_of_cmp<S: Scalar>(a: S, b: S) -> i64 {
    if a > b {
        1
    } else if a < b {
        -1
    } else {
        0
    }
}

/// Kendall rank correlation over (measure, gap) pairs:
/// `tau = 2/(n(n-1)) · Σ_{i<j} sign(m_i - m_j)·sign(g_i - g_j)`.
///
/// Exact O(n²) evaluation; ties contribute 0 through `sign(0) = 0` (no
/// tau-b correction).
pub fn kendall_tau<S: Scalar>(pairs: &[MeasureGapPair<S>]) -> Result<S> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::invalid(format!("kendall tau needs >= 2 pairs, got {n}")));
    }
    for p in pairs {
        if !p.measure.is_finite() || !p.gap.is_finite() {
            return Err(Error::NonFinite { op: "kendall_tau" });
        }
    }
    let mut sum: i64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            sum += sign_of_cmp(pairs[i].measure, pairs[j].measure)
                * sign_of_cmp(pairs[i].gap, pairs[j].gap);
        }
    }
    let denom = (n * (n - 1)) as f64 / 2.0;
    Ok(cast::<S>(sum as f64 / denom))
}

/// Records on (a subset of) a Cartesian hyperparameter grid, keyed by the
/// per-axis value indices.
#[derive(Clone, Debug)]
pub struct HyperGrid<S> {
    axes: Vec<(String, Vec<S>)>,
    records: HashMap<Vec<usize>, MeasureGapPair<S>>,
}

impl<S: Scalar> HyperGrid<S> {
    pub fn new(axes: Vec<(String, Vec<S>)>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::invalid("grid needs at least one axis"));
        }
        for (name, values) in &axes {
            if values.is_empty() {
                return Err(Error::invalid(format!("axis `{name}` has no values")));
            }
        }
        Ok(HyperGrid { axes, records: HashMap::new() })
    }

    pub fn axes(&self) -> &[(String, Vec<S>)] {
        &self.axes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Inserts a record at the given per-axis indices. Each tuple may appear
    /// once.
    pub fn insert(&mut self, indices: Vec<usize>, pair: MeasureGapPair<S>) -> Result<()> {
        if indices.len() != self.axes.len() {
            return Err(Error::invalid(format!(
                "tuple has {} indices, grid has {} axes",
                indices.len(),
                self.axes.len()
            )));
        }
        for (d, (&i, (name, values))) in indices.iter().zip(&self.axes).enumerate() {
            if i >= values.len() {
                return Err(Error::invalid(format!(
                    "index {i} out of range on axis {d} (`{name}`, {} values)",
                    values.len()
                )));
            }
        }
        if self.records.insert(indices.clone(), pair).is_some() {
            return Err(Error::invalid(format!("duplicate grid tuple {indices:?}")));
        }
        Ok(())
    }
}

/// Granulated rank-correlation coefficients per axis, plus their average.
#[derive(Clone, Debug)]
pub struct GranulatedReport<S> {
    /// `(axis name, psi)` in axis order.
    pub per_axis: Vec<(String, S)>,
    /// Mean of the per-axis coefficients.
    pub average: S,
    /// Human-readable notes for slices that were skipped (incomplete).
    pub skipped: Vec<String>,
}

/// For each axis, averages Kendall tau along that axis over every complete
/// 1-d slice (all other axes fixed). Slices with missing records are skipped
/// with a warning note; an axis whose slices are all skipped is an error.
pub fn granulated_coefficients<S: Scalar>(grid: &HyperGrid<S>) -> Result<GranulatedReport<S>> {
    let n_axes = grid.axes.len();
    let mut per_axis = Vec::with_capacity(n_axes);
    let mut skipped = Vec::new();
    for axis in 0..n_axes {
        let axis_len = grid.axes[axis].1.len();
        // Iterate the Cartesian product of the other axes with a
        // mixed-radix counter.
        let other: Vec<usize> = (0..n_axes).filter(|&d| d != axis).collect();
        let radices: Vec<usize> = other.iter().map(|&d| grid.axes[d].1.len()).collect();
        let n_slices: usize = radices.iter().product();
        let mut tau_sum = S::zero();
        let mut tau_count = 0usize;
        for slice_idx in 0..n_slices {
            let mut rem = slice_idx;
            let mut fixed = vec![0usize; n_axes];
            for (pos, &d) in other.iter().enumerate() {
                fixed[d] = rem % radices[pos];
                rem /= radices[pos];
            }
            let mut pairs = Vec::with_capacity(axis_len);
            let mut missing = false;
            for v in 0..axis_len {
                let mut key = fixed.clone();
                key[axis] = v;
                match grid.records.get(&key) {
                    Some(&p) => pairs.push(p),
                    None => {
                        missing = true;
                        break;
                    }
                }
            }
            if missing || pairs.len() < 2 {
                skipped.push(format!(
                    "axis `{}`: slice at {:?} skipped (missing records)",
                    grid.axes[axis].0,
                    other
                        .iter()
                        .map(|&d| format!("{}={}", grid.axes[d].0, fixed[d]))
                        .collect::<Vec<_>>()
                        .join(",")
                ));
                continue;
            }
            tau_sum += kendall_tau(&pairs)?;
            tau_count += 1;
        }
        if tau_count == 0 {
            return Err(Error::invalid(format!(
                "axis `{}`: every slice is missing records",
                grid.axes[axis].0
            )));
        }
        per_axis.push((grid.axes[axis].0.clone(), tau_sum / cast::<S>(tau_count as f64)));
    }
    let average = per_axis.iter().map(|(_, v)| *v).sum::<S>() / cast::<S>(n_axes as f64);
    Ok(GranulatedReport { per_axis, average, skipped })
}

/// Inputs of the probabilistic generalization-bound penalty term.
#[derive(Clone, Copy, Debug)]
pub struct BoundInputs<S> {
    /// Parameter count k.
    pub param_count: usize,
    /// Sample count n (kept as a float so the formula can be probed at
    /// non-integer points); must exceed 1.
    pub sample_count: S,
    /// Failure probability delta in (0, 1).
    pub delta: S,
    pub rho: S,
    pub eta: S,
    /// l2 norm of the weights.
    pub weight_norm: S,
    /// Stand-in for the bound's unexpanded O(1) constant.
    pub constant: S,
}

/// Penalty term added to the perturbed-maximum loss in the adaptive
/// generalization bound:
///
/// `sqrt( (k·ln(1 + ‖w‖²/(η²ρ²)·(1 + sqrt(ln n / k))²) + 4·ln(n/δ) + C) / (n−1) )`
pub fn generalization_bound_penalty<S: Scalar>(b: &BoundInputs<S>) -> Result<S> {
    if !(b.sample_count > S::one()) {
        return Err(Error::invalid("bound needs sample count n > 1"));
    }
    if b.param_count == 0 {
        return Err(Error::invalid("bound needs parameter count k >= 1"));
    }
    if !(b.delta > S::zero() && b.delta < S::one()) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {}", b.delta)));
    }
    if b.eta * b.rho == S::zero() {
        return Err(Error::invalid("eta * rho must be nonzero (the bound divides by it)"));
    }
    if !(b.weight_norm >= S::zero()) || !(b.constant >= S::zero()) {
        return Err(Error::invalid("weight norm and constant must be nonnegative"));
    }
    let k = cast::<S>(b.param_count as f64);
    let n = b.sample_count;
    let dilation = S::one() + (n.ln() / k).sqrt();
    let ratio = (b.weight_norm * b.weight_norm) / (b.eta * b.eta * b.rho * b.rho);
    let inner = k * (S::one() + ratio * dilation * dilation).ln()
        + cast::<S>(4.0) * (n / b.delta).ln()
        + b.constant;
    Ok((inner / (n - S::one())).sqrt())
}
