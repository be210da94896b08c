use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::aggregation::ClusterCount;
use crate::data::PartitionSpec;
use crate::error::{Error, Result};
use crate::kd::KdConfig;
use crate::nn::NetworkShape;
use crate::similarity::{ThresholdSchedule, TransitiveConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Similarity clustering, cluster-balanced weights and distillation.
    #[default]
    Cadis,
    /// Similarity clustering and cluster-balanced weights, no distillation.
    CadisNoKd,
    FedAvg,
    /// Sample-proportional weights with distillation during local training.
    FedAvgKd,
}

impl Algorithm {
    pub fn clusters(self) -> bool {
        matches!(self, Self::Cadis | Self::CadisNoKd)
    }

    pub fn distills(self) -> bool {
        matches!(self, Self::Cadis | Self::FedAvgKd)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cadis" => Ok(Self::Cadis),
            "cadis-no-kd" => Ok(Self::CadisNoKd),
            "fed-avg" | "fedavg" => Ok(Self::FedAvg),
            "fed-avg-kd" | "fedavg-kd" => Ok(Self::FedAvgKd),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian blobs; the test set is drawn with a derived seed.
    Synthetic {
        #[serde(default = "synthetic::classes")]
        classes: usize,
        #[serde(default = "synthetic::dims")]
        dims: usize,
        #[serde(default = "synthetic::per_class")]
        per_class: usize,
        #[serde(default = "synthetic::test_per_class")]
        test_per_class: usize,
        #[serde(default = "synthetic::spread")]
        spread: f64,
        #[serde(default = "synthetic::seed")]
        seed: u64,
    },
    /// `train-*` and `t10k-*` IDX files (optionally gzip-compressed) in `dir`.
    Idx {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

mod synthetic {
    pub fn classes() -> usize {
        10
    }
    pub fn dims() -> usize {
        20
    }
    pub fn per_class() -> usize {
        300
    }
    pub fn test_per_class() -> usize {
        100
    }
    pub fn spread() -> f64 {
        0.15
    }
    pub fn seed() -> u64 {
        7
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self::Synthetic {
            classes: synthetic::classes(),
            dims: synthetic::dims(),
            per_class: synthetic::per_class(),
            test_per_class: synthetic::test_per_class(),
            spread: synthetic::spread(),
            seed: synthetic::seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub representation: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128],
            representation: 64,
        }
    }
}

impl NetworkConfig {
    pub fn shape(&self, input: usize, classes: usize) -> Result<NetworkShape> {
        NetworkShape::new(input, self.hidden.clone(), self.representation, classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub rounds: usize,
    /// Participants per round.
    pub participants: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            rounds: 150,
            participants: 10,
            local_epochs: 5,
            batch_size: 8,
            learning_rate: 0.001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilarityConfig {
    pub threshold: ThresholdSchedule,
    pub transitive: TransitiveConfig,
    pub cluster_count: ClusterCount,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            threshold: ThresholdSchedule::default(),
            transitive: TransitiveConfig::default(),
            cluster_count: ClusterCount::Participants,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub precision: Precision,
    pub data: DataConfig,
    pub partition: PartitionSpec,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub kd: KdConfig,
    pub similarity: SimilarityConfig,
    /// Write a similarity snapshot every this many rounds (0 disables).
    pub snapshot_every: usize,
    /// Accuracy (%) used for the rounds-to-target summary field.
    pub target_accuracy: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Cadis,
            seed: 0,
            precision: Precision::F64,
            data: DataConfig::default(),
            partition: PartitionSpec::default(),
            network: NetworkConfig::default(),
            training: TrainingConfig::default(),
            kd: KdConfig::default(),
            similarity: SimilarityConfig::default(),
            snapshot_every: 0,
            target_accuracy: None,
        }
    }
}

impl ExperimentConfig {
    pub fn clients(&self) -> usize {
        self.partition.clients
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        self.kd.validate()?;
        let t = &self.training;
        if t.participants == 0 || t.participants > self.partition.clients {
            return Err(Error::Config(format!(
                "participants per round must lie in 1..={}, got {}",
                self.partition.clients, t.participants
            )));
        }
        if t.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be >= 1".into()));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(t.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        let th = &self.similarity.threshold;
        if !(th.start.is_finite() && th.max.is_finite()) {
            return Err(Error::Config("threshold schedule must be finite".into()));
        }
        if !(self.similarity.transitive.gamma >= 0.0) {
            return Err(Error::Config("gamma must be >= 0".into()));
        }
        if self.network.representation == 0 || self.network.hidden.contains(&0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if let DataConfig::Synthetic {
            classes,
            dims,
            per_class,
            test_per_class,
            spread,
            ..
        } = &self.data
        {
            if *classes < 2 || *dims == 0 || *per_class == 0 || *test_per_class == 0 || !(*spread >= 0.0) {
                return Err(Error::Config(
                    "synthetic data needs >= 2 classes and positive sizes".into(),
                ));
            }
        }
        Ok(())
    }

    /// Effective distillation weight for the configured algorithm.
    pub fn kd_lambda(&self) -> f64 {
        if self.algorithm.distills() {
            self.kd.lambda
        } else {
            0.0
        }
    }
}
