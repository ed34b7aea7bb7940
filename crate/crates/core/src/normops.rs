//! Diagonal normalization operators for adaptive sharpness.
//!
//! The operator `T_w` rescales the perturbation ball per coordinate so that
//! loss-preserving node-wise re-scalings of `w` leave the reshaped ball, and
//! with it the measured sharpness, unchanged. An additive `eta` floor trades
//! adaptivity for invertibility.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::models::ParameterVector;
use crate::scalar::Scalar;

/// Normalization scheme selecting how the diagonal is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// All scales 1 — reduces adaptive machinery to the plain SAM forms.
    Identity,
    /// `|w_i| + eta` per coordinate.
    Elementwise,
    /// Convolution-filter coordinates share their filter's l2 norm;
    /// everything else falls back to element-wise.
    Filterwise,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scheme::Identity => "none",
            Scheme::Elementwise => "elementwise",
            Scheme::Filterwise => "filterwise",
        };
        f.write_str(s)
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "identity" => Ok(Scheme::Identity),
            "elementwise" => Ok(Scheme::Elementwise),
            "filterwise" => Ok(Scheme::Filterwise),
            other => Err(Error::invalid(format!(
                "unknown normalization scheme `{other}` (expected none, elementwise or filterwise)"
            ))),
        }
    }
}

/// Which norm bounds the transformed perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PNorm {
    Two,
    Inf,
}

impl fmt::Display for PNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PNorm::Two => f.write_str("2"),
            PNorm::Inf => f.write_str("inf"),
        }
    }
}

impl FromStr for PNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2" => Ok(PNorm::Two),
            "inf" | "Inf" | "INF" => Ok(PNorm::Inf),
            other => Err(Error::invalid(format!("unknown p-norm `{other}` (expected 2 or inf)"))),
        }
    }
}

/// Diagonal of `T_w + eta·I` together with how it was built.
#[derive(Clone, Debug)]
pub struct NormalizationOperator<S> {
    scales: Vec<S>,
    scheme: Scheme,
    eta: S,
    bias_normalized: bool,
}

impl<S: Scalar> NormalizationOperator<S> {
    pub fn scales(&self) -> &[S] {
        &self.scales
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn eta(&self) -> S {
        self.eta
    }

    pub fn bias_normalized(&self) -> bool {
        self.bias_normalized
    }

    /// Coordinate-wise multiply by the diagonal.
    pub fn apply(&self, v: &[S]) -> Result<Vec<S>> {
        if v.len() != self.scales.len() {
            return Err(Error::invalid("operator/vector length mismatch"));
        }
        Ok(v.iter().zip(&self.scales).map(|(&x, &s)| s * x).collect())
    }

    /// Coordinate-wise divide by the diagonal; requires every scale > 0.
    pub fn apply_inverse(&self, v: &[S]) -> Result<Vec<S>> {
        if v.len() != self.scales.len() {
            return Err(Error::invalid("operator/vector length mismatch"));
        }
        if let Some(index) = self.scales.iter().position(|&s| s == S::zero()) {
            return Err(Error::ZeroScale { index });
        }
        Ok(v.iter().zip(&self.scales).map(|(&x, &s)| x / s).collect())
    }
}

/// All-ones diagonal.
pub fn identity_op<S: Scalar>(k: usize) -> NormalizationOperator<S> {
    NormalizationOperator {
        scales: vec![S::one(); k],
        scheme: Scheme::Identity,
        eta: S::zero(),
        bias_normalized: false,
    }
}

/// Element-wise diagonal `|w_i| + eta`; bias coordinates get the constant 1
/// unless `bias_normalized` is set.
pub fn elementwise_t<S: Scalar>(w: &ParameterVector<S>, eta: S, bias_normalized: bool) -> NormalizationOperator<S> {
    let mask = &w.layout().bias_mask;
    let scales = w
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !bias_normalized && mask[i] {
                S::one()
            } else {
                v.abs() + eta
            }
        })
        .collect();
    NormalizationOperator { scales, scheme: Scheme::Elementwise, eta, bias_normalized }
}

/// Filter-wise diagonal: coordinates inside convolution filter `i` share
/// `‖f_i‖₂ + eta`, all other coordinates get `|w_j| + eta`. Bias handling
/// matches [`elementwise_t`]. Without filter groups this is identical to
/// the element-wise operator.
pub fn filterwise_t<S: Scalar>(w: &ParameterVector<S>, eta: S, bias_normalized: bool) -> NormalizationOperator<S> {
    let mut op = elementwise_t(w, eta, bias_normalized);
    for group in &w.layout().filter_groups {
        let norm = w.values()[group.clone()]
            .iter()
            .map(|&x| x * x)
            .sum::<S>()
            .sqrt();
        for i in group.clone() {
            op.scales[i] = norm + eta;
        }
    }
    op.scheme = Scheme::Filterwise;
    op
}

/// Radius, norm and normalization selection for one perturbation setup.
#[derive(Clone, Copy, Debug)]
pub struct PerturbationConfig<S> {
    pub rho: S,
    pub p: PNorm,
    pub scheme: Scheme,
    pub eta: S,
    pub bias_normalized: bool,
}

impl<S: Scalar> PerturbationConfig<S> {
    /// `rho = 0` is accepted as the degenerate no-perturbation setup so the
    /// reduction identities (two-step update with `rho = 0` equals the base
    /// optimizer) stay expressible.
    pub fn new(rho: S, p: PNorm, scheme: Scheme, eta: S, bias_normalized: bool) -> Result<Self> {
        if !(rho >= S::zero()) || !rho.is_finite() {
            return Err(Error::invalid(format!("rho must be finite and >= 0, got {rho}")));
        }
        if !(eta >= S::zero()) || !eta.is_finite() {
            return Err(Error::invalid(format!("eta must be finite and >= 0, got {eta}")));
        }
        Ok(PerturbationConfig { rho, p, scheme, eta, bias_normalized })
    }

    pub fn sam(rho: S) -> Result<Self> {
        PerturbationConfig::new(rho, PNorm::Two, Scheme::Identity, S::zero(), false)
    }

    /// Builds the diagonal operator for this configuration at `w`.
    pub fn operator(&self, w: &ParameterVector<S>) -> NormalizationOperator<S> {
        match self.scheme {
            Scheme::Identity => identity_op(w.k()),
            Scheme::Elementwise => elementwise_t(w, self.eta, self.bias_normalized),
            Scheme::Filterwise => filterwise_t(w, self.eta, self.bias_normalized),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ModelSpec};
    use std::sync::Arc;

    fn bare_vector(values: Vec<f64>) -> ParameterVector<f64> {
        use crate::models::ParameterLayout;
        let k = values.len();
        let layout = Arc::new(ParameterLayout {
            k,
            filter_groups: vec![],
            bias_mask: vec![false; k],
            node_map: vec![],
        });
        ParameterVector::new(values, layout).unwrap()
    }

    #[test]
    fn elementwise_scales_are_absolute_values() {
        let w = bare_vector(vec![1.0, 1.0]);
        assert_eq!(elementwise_t(&w, 0.0, true).scales(), &[1.0, 1.0]);

        // The diag(3, 1/3) re-scaling example.
        let w = bare_vector(vec![3.0, 1.0 / 3.0]);
        assert_eq!(elementwise_t(&w, 0.0, true).scales(), &[3.0, 1.0 / 3.0]);

        let w = bare_vector(vec![-2.0, 0.5]);
        assert_eq!(elementwise_t(&w, 0.01, true).scales(), &[2.01, 0.51]);
    }

    #[test]
    fn bias_coordinates_stay_constant_unless_normalized() {
        let spec = ModelSpec::mlp(2, &[3], 2);
        let w: ParameterVector<f64> = build_model(&spec, 1).unwrap();
        let op = elementwise_t(&w, 0.0, false);
        for (i, &is_bias) in w.layout().bias_mask.iter().enumerate() {
            if is_bias {
                assert_eq!(op.scales()[i], 1.0);
            } else {
                assert_eq!(op.scales()[i], w.values()[i].abs());
            }
        }
        let op = elementwise_t(&w, 0.0, true);
        for (i, &v) in w.values().iter().enumerate() {
            assert_eq!(op.scales()[i], v.abs());
        }
    }

    #[test]
    fn filterwise_reduces_to_elementwise_without_filters() {
        let spec = ModelSpec::mlp(3, &[4], 2);
        let w: ParameterVector<f64> = build_model(&spec, 2).unwrap();
        let fw = filterwise_t(&w, 0.01, false);
        let ew = elementwise_t(&w, 0.01, false);
        assert_eq!(fw.scales(), ew.scales());
    }

    #[test]
    fn filterwise_uses_filter_norms() {
        use crate::models::ParameterLayout;
        // One filter (3, 4) plus a scalar weight 2: scales (5, 5, 2).
        let layout = Arc::new(ParameterLayout {
            k: 3,
            filter_groups: vec![0..2],
            bias_mask: vec![false; 3],
            node_map: vec![],
        });
        let w = ParameterVector::new(vec![3.0, 4.0, 2.0], layout.clone()).unwrap();
        assert_eq!(filterwise_t(&w, 0.0, true).scales(), &[5.0, 5.0, 2.0]);

        // All-zero filter floors at eta.
        let w = ParameterVector::new(vec![0.0, 0.0, 2.0], layout).unwrap();
        assert_eq!(filterwise_t(&w, 0.01, true).scales(), &[0.01, 0.01, 2.01]);
    }

    #[test]
    fn apply_and_inverse() {
        let op = identity_op::<f64>(3);
        assert_eq!(op.apply(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);

        let w = bare_vector(vec![2.0, 4.0]);
        let op = elementwise_t(&w, 0.0, true);
        assert_eq!(op.apply(&[1.0, 1.0]).unwrap(), vec![2.0, 4.0]);

        let w = bare_vector(vec![0.0, 4.0]);
        let op = elementwise_t(&w, 0.0, true);
        let err = op.apply_inverse(&[1.0, 1.0]).unwrap_err();
        assert!(err.to_string().contains("eta"), "got: {err}");
    }

    #[test]
    fn rho_and_eta_domains() {
        assert!(PerturbationConfig::new(0.0, PNorm::Two, Scheme::Identity, 0.0, false).is_ok());
        assert!(PerturbationConfig::new(-0.1, PNorm::Two, Scheme::Identity, 0.0, false).is_err());
        assert!(PerturbationConfig::new(0.1, PNorm::Two, Scheme::Identity, -1.0, false).is_err());
        assert!(PerturbationConfig::<f64>::new(f64::NAN, PNorm::Two, Scheme::Identity, 0.0, false).is_err());
    }
}
