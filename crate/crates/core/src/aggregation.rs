//! Aggregation weights and the weighted model average.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::scalar::Scalar;
use crate::similarity::ClusterAssignment;

/// How the cluster cardinality dividing each client's weight is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterCount {
    /// Participants of this round that share the client's cluster.
    #[default]
    Participants,
    /// Every client assigned to the cluster, participating or not.
    Global,
}

/// Normalized per-participant weights, aligned with `participants`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector<T> {
    pub participants: Vec<usize>,
    pub weights: Vec<T>,
}

impl<T: Scalar> WeightVector<T> {
    fn normalized(participants: Vec<usize>, raw: Vec<T>) -> Self {
        let total: T = raw.iter().copied().sum();
        let weights = raw.into_iter().map(|x| x / total).collect();
        Self { participants, weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weight_of(&self, client: usize) -> Option<T> {
        self.participants
            .iter()
            .position(|&p| p == client)
            .map(|k| self.weights[k])
    }
}

fn check_counts(participants: &[usize], sample_counts: &[usize]) -> Result<()> {
    if participants.is_empty() {
        return Err(Error::Config("no participants to aggregate".into()));
    }
    if participants.len() != sample_counts.len() {
        return Err(Error::Shape("one sample count per participant required".into()));
    }
    if sample_counts.contains(&0) {
        return Err(Error::Config("participants must hold at least one sample".into()));
    }
    Ok(())
}

/// Sample-proportional weights `n_i / sum n`.
pub fn fedavg_weights<T: Scalar>(participants: &[usize], sample_counts: &[usize]) -> Result<WeightVector<T>> {
    check_counts(participants, sample_counts)?;
    let total = T::from_usize_lossy(sample_counts.iter().sum());
    let raw = sample_counts.iter().map(|&n| T::from_usize_lossy(n) / total).collect();
    Ok(WeightVector::normalized(participants.to_vec(), raw))
}

/// Cluster-balanced weights `(1 / M_i) * (n_i / N)`, normalized.
///
/// `N` is the round's total sample count; it cancels in the normalization.
/// With every participant in its own cluster this is bit-identical to
/// [`fedavg_weights`].
pub fn cadis_weights<T: Scalar>(
    assignment: &ClusterAssignment,
    participants: &[usize],
    sample_counts: &[usize],
    mode: ClusterCount,
) -> Result<WeightVector<T>> {
    check_counts(participants, sample_counts)?;
    if let Some(&bad) = participants.iter().find(|&&p| p >= assignment.clients()) {
        return Err(Error::Shape(format!("client {bad} has no cluster")));
    }
    let total = T::from_usize_lossy(sample_counts.iter().sum());
    let mut in_round = vec![0usize; assignment.cluster_count()];
    for &p in participants {
        in_round[assignment.labels[p]] += 1;
    }
    let raw = participants
        .iter()
        .zip(sample_counts)
        .map(|(&p, &n)| {
            let cluster = assignment.labels[p];
            let m = match mode {
                ClusterCount::Participants => in_round[cluster],
                ClusterCount::Global => assignment.sizes[cluster],
            };
            (T::one() / T::from_usize_lossy(m)) * (T::from_usize_lossy(n) / total)
        })
        .collect();
    Ok(WeightVector::normalized(participants.to_vec(), raw))
}

/// Convex combination `sum_i w_i * model_i`.
pub fn aggregate<T: Scalar>(models: &[&ModelParams<T>], weights: &WeightVector<T>) -> Result<ModelParams<T>> {
    let first = models
        .first()
        .ok_or_else(|| Error::Config("no models to aggregate".into()))?;
    if models.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} models but {} weights",
            models.len(),
            weights.len()
        )));
    }
    if models.iter().any(|m| m.shape() != first.shape()) {
        return Err(Error::Shape("models differ in topology".into()));
    }
    let mut out = vec![T::zero(); first.len()];
    for (model, &w) in models.iter().zip(&weights.weights) {
        for (acc, &x) in out.iter_mut().zip(model.as_slice()) {
            *acc += w * x;
        }
    }
    ModelParams::from_vec(first.shape().clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkShape;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn cadis_examples() {
        let a = ClusterAssignment::from_labels(&[0, 0, 1], 0);
        let w: WeightVector<f64> = cadis_weights(&a, &[0, 1, 2], &[5, 5, 5], ClusterCount::Participants).unwrap();
        assert!(close(&w.weights, &[0.25, 0.25, 0.5]));

        let one = ClusterAssignment::from_labels(&[0, 0, 0, 0], 0);
        let w: WeightVector<f64> =
            cadis_weights(&one, &[0, 1, 2, 3], &[7, 7, 7, 7], ClusterCount::Participants).unwrap();
        assert!(close(&w.weights, &[0.25; 4]));

        let single = ClusterAssignment::singletons(2, 0);
        let w: WeightVector<f64> = cadis_weights(&single, &[0, 1], &[100, 300], ClusterCount::Participants).unwrap();
        assert!(close(&w.weights, &[0.25, 0.75]));
        let f: WeightVector<f64> = fedavg_weights(&[0, 1], &[100, 300]).unwrap();
        assert_eq!(w, f);
    }

    #[test]
    fn global_cardinality_mode() {
        // Cluster {0,1,2} with only client 0 in the round, plus singleton 3.
        let a = ClusterAssignment::from_labels(&[0, 0, 0, 1], 0);
        let part: WeightVector<f64> = cadis_weights(&a, &[0, 3], &[1, 1], ClusterCount::Participants).unwrap();
        let glob: WeightVector<f64> = cadis_weights(&a, &[0, 3], &[1, 1], ClusterCount::Global).unwrap();
        assert!(close(&part.weights, &[0.5, 0.5]));
        assert!(close(&glob.weights, &[0.25, 0.75]));
    }

    #[test]
    fn fedavg_examples() {
        let w: WeightVector<f64> = fedavg_weights(&[0, 1, 2, 3], &[9, 9, 9, 9]).unwrap();
        assert!(close(&w.weights, &[0.25; 4]));
        let w: WeightVector<f64> = fedavg_weights(&[4, 2], &[1, 3]).unwrap();
        assert!(close(&w.weights, &[0.25, 0.75]));
        assert_eq!(w.weight_of(2), Some(0.75));
        let w: WeightVector<f64> = fedavg_weights(&[7], &[12]).unwrap();
        assert_eq!(w.weights, vec![1.0]);
        assert!(fedavg_weights::<f64>(&[], &[]).is_err());
        assert!(fedavg_weights::<f64>(&[1], &[0]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let shape = NetworkShape::new(1, vec![], 1, 2).unwrap();
        let len = shape.param_count();
        let zero = ModelParams::<f64>::from_vec(shape.clone(), vec![0.0; len]).unwrap();
        let ones = ModelParams::<f64>::from_vec(shape.clone(), vec![1.0; len]).unwrap();
        let w: WeightVector<f64> = fedavg_weights(&[0, 1], &[1, 3]).unwrap();
        let out = aggregate(&[&zero, &ones], &w).unwrap();
        assert!(out.as_slice().iter().all(|&x| x == 0.75));

        let same = aggregate(&[&ones, &ones], &w).unwrap();
        assert_eq!(same, ones);

        let pick = WeightVector {
            participants: vec![0, 1],
            weights: vec![0.0, 1.0],
        };
        assert_eq!(aggregate(&[&zero, &ones], &pick).unwrap(), ones);

        let other = ModelParams::<f64>::zeros(NetworkShape::new(2, vec![], 1, 2).unwrap()).unwrap();
        assert!(aggregate(&[&zero, &other], &w).is_err());
        assert!(aggregate(&[&zero], &w).is_err());
    }

    fn arb_round() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (2usize..12).prop_flat_map(|k| {
            (
                proptest::collection::vec(0usize..4, k),
                proptest::collection::vec(1usize..500, k),
            )
        })
    }

    proptest! {
        #[test]
        fn weights_sum_to_one((labels, counts) in arb_round()) {
            let a = ClusterAssignment::from_labels(&labels, 0);
            let parts: Vec<usize> = (0..labels.len()).collect();
            let w: WeightVector<f64> = cadis_weights(&a, &parts, &counts, ClusterCount::Participants).unwrap();
            prop_assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.weights.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn scale_invariant((labels, counts) in arb_round(), factor in 2usize..50) {
            let a = ClusterAssignment::from_labels(&labels, 0);
            let parts: Vec<usize> = (0..labels.len()).collect();
            let scaled: Vec<usize> = counts.iter().map(|&n| n * factor).collect();
            let w: WeightVector<f64> = cadis_weights(&a, &parts, &counts, ClusterCount::Participants).unwrap();
            let s: WeightVector<f64> = cadis_weights(&a, &parts, &scaled, ClusterCount::Participants).unwrap();
            prop_assert!(close(&w.weights, &s.weights));
        }

        #[test]
        fn clusters_contribute_equally((labels, counts) in arb_round()) {
            let a = ClusterAssignment::from_labels(&labels, 0);
            let parts: Vec<usize> = (0..labels.len()).collect();
            let equal = vec![counts[0]; counts.len()];
            let w: WeightVector<f64> = cadis_weights(&a, &parts, &equal, ClusterCount::Participants).unwrap();
            let mut per_cluster = vec![0.0; a.cluster_count()];
            for (k, &p) in parts.iter().enumerate() {
                per_cluster[a.labels[p]] += w.weights[k];
            }
            let target = 1.0 / a.cluster_count() as f64;
            prop_assert!(per_cluster.iter().all(|&x| (x - target).abs() < 1e-12));
        }

        #[test]
        fn singletons_reduce_to_fedavg(counts in proptest::collection::vec(1usize..1000, 1..15)) {
            let k = counts.len();
            let a = ClusterAssignment::singletons(k, 0);
            let parts: Vec<usize> = (0..k).collect();
            let c: WeightVector<f64> = cadis_weights(&a, &parts, &counts, ClusterCount::Participants).unwrap();
            let f: WeightVector<f64> = fedavg_weights(&parts, &counts).unwrap();
            prop_assert_eq!(c, f);
        }

        #[test]
        fn normalizer_choice_is_immaterial((labels, counts) in arb_round(), extra in 1usize..10_000) {
            // Dividing by any N (here the round total plus an offset) gives the same weights.
            let a = ClusterAssignment::from_labels(&labels, 0);
            let parts: Vec<usize> = (0..labels.len()).collect();
            let w: WeightVector<f64> = cadis_weights(&a, &parts, &counts, ClusterCount::Participants).unwrap();
            let big_n = (counts.iter().sum::<usize>() + extra) as f64;
            let mut in_round = vec![0usize; a.cluster_count()];
            for &p in &parts { in_round[a.labels[p]] += 1; }
            let raw: Vec<f64> = parts.iter().zip(&counts).map(|(&p, &n)| n as f64 / big_n / in_round[a.labels[p]] as f64).collect();
            let total: f64 = raw.iter().sum();
            let alt: Vec<f64> = raw.iter().map(|x| x / total).collect();
            prop_assert!(close(&w.weights, &alt));
        }
    }
}
