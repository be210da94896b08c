//! Datasets and non-IID client partitioning.

mod idx;
mod partition;
mod synth;

pub use idx::{load_idx, load_idx_pair, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use partition::{partition, ClientShard, PartitionScheme, PartitionSpec, ShardManifest};
pub use synth::synth_blobs;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::Batch;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    MnistTrain,
    MnistTest,
    Idx,
    Synthetic,
}

/// Feature matrix with values in `[0, 1]` plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    features: Matrix<T>,
    labels: Vec<usize>,
    classes: usize,
    provenance: Provenance,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(features: Matrix<T>, labels: Vec<usize>, classes: usize, provenance: Provenance) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Consistency("dataset is empty".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Consistency(format!("label {bad} >= class count {classes}")));
        }
        Ok(Self {
            features,
            labels,
            classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[T] {
        self.features.row(i)
    }

    /// Indices of every sample, grouped by label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }

    /// Gather the given samples into a training batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch<T>> {
        let d = self.dim();
        let mut values = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Shape(format!("sample index {i} out of range")));
            }
            values.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Batch::new(Matrix::from_vec(indices.len(), d, values)?, labels)
    }

    /// First `n` samples (or all when `n >= len`).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let d = self.dim();
        Self {
            features: Matrix::from_vec(n, d, self.features.as_slice()[..n * d].to_vec())
                .expect("prefix of a valid matrix"),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            provenance: self.provenance,
        }
    }

    /// Split into the leading `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Config(format!("cannot split {} samples at {n}", self.len())));
        }
        let d = self.dim();
        let (head, tail) = self.features.as_slice().split_at(n * d);
        let mk = |values: &[T], labels: &[usize]| Self {
            features: Matrix::from_vec(labels.len(), d, values.to_vec()).expect("split of a valid matrix"),
            labels: labels.to_vec(),
            classes: self.classes,
            provenance: self.provenance,
        };
        Ok((mk(head, &self.labels[..n]), mk(tail, &self.labels[n..])))
    }
}
