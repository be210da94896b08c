//! Cluster-skewed non-IID client partitions.
//!
//! * `Mc` – several clusters sized by a ratio list; every client of a cluster
//!   holds the same label subset; sample counts log-normally unbalanced.
//! * `Pa` – every class is spread over clients with power-law shares; no
//!   cluster structure (each client is its own cluster).
//! * `Bc` – one dominant cluster plus singletons, equal sample counts.
//! * `Uc` – `Bc` with log-normally unbalanced counts.
//!
//! In the clustered schemes every client has a sample budget (its log-normal
//! multiplier, or 1 when balanced) spread evenly over its labels, and all
//! budgets share one scale set by the most heavily demanded class. Classes
//! held by few clients are therefore rare in the federation as a whole.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const LOG_NORMAL_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PartitionScheme {
    Mc,
    Pa,
    Bc,
    Uc,
}

impl std::str::FromStr for PartitionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MC" => Ok(Self::Mc),
            "PA" => Ok(Self::Pa),
            "BC" => Ok(Self::Bc),
            "UC" => Ok(Self::Uc),
            other => Err(Error::Config(format!("unknown partition scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub clients: usize,
    /// Relative cluster sizes for `Mc`.
    pub cluster_ratios: Vec<u32>,
    /// Fraction of all classes each client holds (`Mc`, `Bc`, `Uc`).
    pub label_fraction: f64,
    /// Share of clients inside the dominant cluster (`Bc`, `Uc`).
    pub bc_share: f64,
    /// Power-law exponent for `Pa`.
    pub pareto_shape: f64,
    /// Equal sample counts for `Mc` instead of log-normal ones.
    pub balanced: bool,
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            scheme: PartitionScheme::Mc,
            clients: 100,
            cluster_ratios: vec![3, 3, 2, 1, 1],
            label_fraction: 0.2,
            bc_share: 0.6,
            pareto_shape: 3.0,
            balanced: false,
            seed: 0,
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if self.cluster_ratios.is_empty() || self.cluster_ratios.contains(&0) {
            return Err(Error::Config("cluster ratios must be positive".into()));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config("label fraction must lie in (0, 1]".into()));
        }
        if !(self.bc_share > 0.0 && self.bc_share <= 1.0) {
            return Err(Error::Config("bc share must lie in (0, 1]".into()));
        }
        if !(self.pareto_shape > 0.0) {
            return Err(Error::Config("pareto shape must be > 0".into()));
        }
        if self.scheme == PartitionScheme::Mc && self.clients < self.cluster_ratios.len() {
            return Err(Error::Config(format!(
                "{} clients cannot fill {} clusters",
                self.clients,
                self.cluster_ratios.len()
            )));
        }
        Ok(())
    }

    pub fn labels_per_client(&self, classes: usize) -> usize {
        ((self.label_fraction * classes as f64 - 1e-9).ceil() as usize).clamp(1, classes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub id: usize,
    /// Ground-truth cluster.
    pub cluster: usize,
    /// Sorted sample indices into the training set.
    pub indices: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// JSON manifest of a partition, for reproducibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub spec: PartitionSpec,
    pub clients: Vec<ClientShard>,
}

/// Largest-remainder split of `total` proportional to `weights`, with at
/// least `min_each` per entry.
fn apportion(total: usize, weights: &[f64], min_each: usize) -> Result<Vec<usize>> {
    let k = weights.len();
    let reserved = min_each * k;
    if total < reserved {
        return Err(Error::Partition(format!(
            "{total} items cannot give {min_each} to each of {k} holders"
        )));
    }
    let free = total - reserved;
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| free as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = free - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).expect("finite weights").then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts.into_iter().map(|c| c + min_each).collect())
}

/// Contiguous blocks of a shuffled class list; block `b` wraps around.
fn label_block(perm: &[usize], per_client: usize, block: usize) -> Vec<usize> {
    let v = perm.len();
    let mut labels: Vec<usize> = (0..per_client).map(|t| perm[(block * per_client + t) % v]).collect();
    labels.sort_unstable();
    labels.dedup();
    labels
}

fn multipliers(rng: &mut ChaCha8Rng, n: usize, balanced: bool) -> Vec<f64> {
    if balanced {
        return vec![1.0; n];
    }
    let dist = LogNormal::new(0.0, LOG_NORMAL_SIGMA).expect("valid log-normal");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Give every client a share of its labels' pools proportional to its
/// weight, with one global scale chosen so the most-demanded label pool is
/// used up. A class therefore contributes in proportion to the number (and
/// weight) of clients holding it, which is what makes small clusters rare;
/// less-demanded pools keep their leftover samples. Equal weights give
/// equal shard sizes. Each holder gets at least one sample per label.
fn split_by_budget(
    pools: &[Vec<usize>],
    label_sets: &[Vec<usize>],
    weights: &[f64],
    indices: &mut [Vec<usize>],
) -> Result<()> {
    let share = |c: usize| weights[c] / label_sets[c].len() as f64;
    let mut demand = vec![0.0; pools.len()];
    for (c, labels) in label_sets.iter().enumerate() {
        for &l in labels {
            demand[l] += share(c);
        }
    }
    let scale = pools
        .iter()
        .zip(&demand)
        .filter(|(_, &d)| d > 0.0)
        .map(|(p, &d)| p.len() as f64 / d)
        .fold(f64::INFINITY, f64::min);
    let mut cursor = vec![0usize; pools.len()];
    for (c, labels) in label_sets.iter().enumerate() {
        for &l in labels {
            // The epsilon keeps exact quotients from flooring one short.
            let take = ((scale * share(c) * (1.0 + 1e-12)).floor() as usize).max(1);
            let end = cursor[l] + take;
            if end > pools[l].len() {
                return Err(Error::Partition(format!(
                    "class {l} has {} samples, too few for its holders",
                    pools[l].len()
                )));
            }
            indices[c].extend_from_slice(&pools[l][cursor[l]..end]);
            cursor[l] = end;
        }
    }
    Ok(())
}

pub fn partition<T: Scalar>(dataset: &Dataset<T>, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    let n = spec.clients;
    let v = dataset.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pools = dataset.indices_by_class();
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut perm: Vec<usize> = (0..v).collect();
    perm.shuffle(&mut rng);
    let per_client = spec.labels_per_client(v);

    let mut indices = vec![Vec::new(); n];
    let clusters: Vec<usize> = match spec.scheme {
        PartitionScheme::Mc => {
            let ratios: Vec<f64> = spec.cluster_ratios.iter().map(|&r| f64::from(r)).collect();
            let sizes = apportion(n, &ratios, 1)?;
            let clusters: Vec<usize> = sizes
                .iter()
                .enumerate()
                .flat_map(|(c, &m)| std::iter::repeat_n(c, m))
                .collect();
            let label_sets: Vec<Vec<usize>> = clusters.iter().map(|&c| label_block(&perm, per_client, c)).collect();
            let weights = multipliers(&mut rng, n, spec.balanced);
            split_by_budget(&pools, &label_sets, &weights, &mut indices)?;
            clusters
        }
        PartitionScheme::Pa => {
            for pool in &pools {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                let w: Vec<f64> = (1..=n).map(|rank| (rank as f64).powf(-spec.pareto_shape)).collect();
                let counts = apportion(pool.len(), &w, 0)?;
                let mut at = 0;
                for (&c, m) in order.iter().zip(counts) {
                    indices[c].extend_from_slice(&pool[at..at + m]);
                    at += m;
                }
            }
            // Every client needs at least one sample: borrow from the richest.
            for c in 0..n {
                if indices[c].is_empty() {
                    let donor = (0..n)
                        .max_by_key(|&d| (indices[d].len(), std::cmp::Reverse(d)))
                        .expect("at least one client");
                    if indices[donor].len() < 2 {
                        return Err(Error::Partition(format!(
                            "{} samples cannot cover {n} clients",
                            dataset.len()
                        )));
                    }
                    let moved = indices[donor].pop().expect("donor has samples");
                    indices[c].push(moved);
                }
            }
            (0..n).collect()
        }
        PartitionScheme::Bc | PartitionScheme::Uc => {
            let big = ((spec.bc_share * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
            let clusters: Vec<usize> = (0..n).map(|c| if c < big { 0 } else { c - big + 1 }).collect();
            let label_sets: Vec<Vec<usize>> = clusters.iter().map(|&c| label_block(&perm, per_client, c)).collect();
            let weights = multipliers(&mut rng, n, spec.scheme == PartitionScheme::Bc);
            split_by_budget(&pools, &label_sets, &weights, &mut indices)?;
            clusters
        }
    };

    Ok(indices
        .into_iter()
        .zip(clusters)
        .enumerate()
        .map(|(id, (mut idx, cluster))| {
            idx.sort_unstable();
            ClientShard {
                id,
                cluster,
                indices: idx,
            }
        })
        .collect())
}
