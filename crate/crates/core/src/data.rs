//! Labeled classification datasets.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Feature tensor with one sample per leading-axis row, plus class labels.
#[derive(Clone, Debug)]
pub struct Dataset<S> {
    features: Tensor<S>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(features: Tensor<S>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.shape().is_empty() {
            return Err(Error::invalid("dataset features must have a sample axis"));
        }
        if features.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.shape()[0],
                labels.len()
            )));
        }
        if n_classes == 0 {
            return Err(Error::invalid("dataset needs at least one class"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Dataset { features, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor<S> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Copies the given samples into a batch.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor<S>, Vec<usize>)> {
        let feats = self.features.gather_rows(idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((feats, labels))
    }

    /// Replaces the labels wholesale (sizes must match).
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Dataset::new(self.features.clone(), labels, self.n_classes)
    }
}
