//! Labeled feature datasets shared by the trainer and the benchmark.

use crate::matrix::Matrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset must contain at least one sample")]
    Empty,
    #[error("feature rows ({rows}) do not match label count ({labels})")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("class {class} has no samples (classes must be densely indexed)")]
    SparseClasses { class: usize },
    #[error("non-finite feature value at row {0}")]
    NonFinite(usize),
}

/// Raw input features (n × d_in) with dense class labels in `[0, class_count)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self, DatasetError> {
        if labels.is_empty() {
            return Err(DatasetError::Empty);
        }
        if features.rows() != labels.len() {
            return Err(DatasetError::LengthMismatch {
                rows: features.rows(),
                labels: labels.len(),
            });
        }
        for i in 0..features.rows() {
            if features.row(i).iter().any(|v| !v.is_finite()) {
                return Err(DatasetError::NonFinite(i));
            }
        }
        let class_count = labels.iter().max().unwrap() + 1;
        let mut seen = vec![false; class_count];
        for &l in &labels {
            seen[l] = true;
        }
        if let Some(class) = seen.iter().position(|&s| !s) {
            return Err(DatasetError::SparseClasses { class });
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// New dataset-shaped view of the selected rows (labels kept verbatim, so
    /// the result may not be densely indexed; it is only used for batching).
    pub fn select(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        let d = self.features.cols();
        let mut m = Matrix::zeros(indices.len(), d);
        let mut labels = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            m.row_mut(r).copy_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        (m, labels)
    }
}
