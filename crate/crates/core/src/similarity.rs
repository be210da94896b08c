//! Server-side client similarity tracking and threshold clustering.
//!
//! Each round the server compares the classifier-layer updates of the
//! participants pairwise (cosine of `W_i - W_g` and `W_j - W_g`), folds them
//! into a running mean `S`, optionally estimates unobserved pairs through
//! shared pivots, min-max rescales `S` into `Q`, and links clients whose `Q`
//! entry clears a rising threshold. Clusters are the connected components.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Improvements with a norm below this are treated as "no signal".
pub const MIN_UPDATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdSchedule {
    pub start: f64,
    pub max: f64,
    /// Rounds until `max` is reached.
    pub ramp: usize,
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        Self {
            start: 0.5,
            max: 0.975,
            ramp: 50,
        }
    }
}

impl ThresholdSchedule {
    /// Linear ramp from `start` to `max`, flat afterwards.
    pub fn epsilon(&self, round: usize) -> f64 {
        if self.ramp == 0 || round >= self.ramp {
            return self.max.max(self.start);
        }
        (self.start + round as f64 * (self.max - self.start) / self.ramp as f64).min(self.max.max(self.start))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransitiveConfig {
    pub enabled: bool,
    /// Pivots qualify when the implied Gaussian deviation is below this.
    pub gamma: f64,
}

impl Default for TransitiveConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            gamma: 0.2,
        }
    }
}

/// Cosine of the two classifier improvements, flattened row-major.
/// Returns 0 when either improvement vanishes.
pub fn instance_similarity<T: Scalar>(wi: &Matrix<T>, wj: &Matrix<T>, wg: &Matrix<T>) -> Result<T> {
    if !wi.same_shape(wj) || !wi.same_shape(wg) {
        return Err(Error::Shape("classifier matrices differ in shape".into()));
    }
    let di: Vec<T> = wi.as_slice().iter().zip(wg.as_slice()).map(|(&a, &g)| a - g).collect();
    let dj: Vec<T> = wj.as_slice().iter().zip(wg.as_slice()).map(|(&a, &g)| a - g).collect();
    Ok(cosine(&di, &dj))
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    let tiny = T::lit(MIN_UPDATE_NORM);
    if na < tiny || nb < tiny {
        return T::zero();
    }
    (dot / (na * nb)).max(-T::one()).min(T::one())
}

/// Range admitted for `cos(a, c)` given `cos(a, b)` and `cos(b, c)`.
pub fn transitive_bounds<T: Scalar>(s_ab: T, s_bc: T) -> (T, T) {
    let mean = s_ab * s_bc;
    let slack = ((T::one() - s_ab * s_ab) * (T::one() - s_bc * s_bc))
        .max(T::zero())
        .sqrt();
    (mean - slack, mean + slack)
}

/// Deviation of the pivot Gaussian: a third of the transitive slack.
pub fn pivot_deviation<T: Scalar>(s_ip: T, s_jp: T) -> T {
    let (lo, hi) = transitive_bounds(s_ip, s_jp);
    (hi - lo) / T::lit(6.0)
}

/// Client -> cluster mapping for one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub round: usize,
    /// Cluster id per client; ids are numbered by smallest member.
    pub labels: Vec<usize>,
    /// Member count per cluster id.
    pub sizes: Vec<usize>,
}

impl ClusterAssignment {
    pub fn singletons(n: usize, round: usize) -> Self {
        Self {
            round,
            labels: (0..n).collect(),
            sizes: vec![1; n],
        }
    }

    /// Canonical assignment from arbitrary per-client labels.
    pub fn from_labels(raw: &[usize], round: usize) -> Self {
        let mut remap = std::collections::HashMap::new();
        let mut labels = Vec::with_capacity(raw.len());
        let mut sizes = Vec::new();
        for &r in raw {
            let next = remap.len();
            let id = *remap.entry(r).or_insert(next);
            if id == sizes.len() {
                sizes.push(0);
            }
            sizes[id] += 1;
            labels.push(id);
        }
        Self { round, labels, sizes }
    }

    pub fn cluster_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn clients(&self) -> usize {
        self.labels.len()
    }

    /// Fraction of client pairs whose same/different relation agrees with
    /// `truth` (the Rand index).
    pub fn pairwise_agreement(&self, truth: &[usize]) -> f64 {
        let n = self.labels.len().min(truth.len());
        if n < 2 {
            return 1.0;
        }
        let mut agree = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                let ours = self.labels[i] == self.labels[j];
                let theirs = truth[i] == truth[j];
                agree += usize::from(ours == theirs);
            }
        }
        agree as f64 / (n * (n - 1) / 2) as f64
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Keep the smaller index as root so ids are stable.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Connected components of `{(i, j) : q_ij >= epsilon}`.
pub fn threshold_components<T: Scalar>(q: &Matrix<T>, epsilon: f64, round: usize) -> ClusterAssignment {
    let n = q.rows();
    let eps = T::lit(epsilon);
    let mut dsu = DisjointSet::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if q.get(i, j) >= eps {
                dsu.union(i, j);
            }
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| dsu.find(i)).collect();
    ClusterAssignment::from_labels(&roots, round)
}

/// Serializable snapshot of the similarity bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySnapshot {
    pub round: usize,
    pub similarity: Vec<Vec<f64>>,
    pub counts: Vec<Vec<u32>>,
    pub direct: Vec<Vec<u32>>,
    pub q: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityState<T> {
    n: usize,
    /// Cumulative similarity; diagonal fixed at 1.
    s: Matrix<T>,
    /// Number of folded observations (direct and transitive) per pair.
    counts: Vec<u32>,
    /// Number of rounds each pair actually co-occurred.
    direct: Vec<u32>,
    q: Matrix<T>,
    pub schedule: ThresholdSchedule,
    pub transitive: TransitiveConfig,
    round: usize,
}

impl<T: Scalar> SimilarityState<T> {
    pub fn new(n: usize, schedule: ThresholdSchedule, transitive: TransitiveConfig) -> Self {
        let mut s = Matrix::zeros(n, n);
        let mut q = Matrix::zeros(n, n);
        for i in 0..n {
            s.set(i, i, T::one());
            q.set(i, i, T::one());
        }
        Self {
            n,
            s,
            counts: vec![0; n * n],
            direct: vec![0; n * n],
            q,
            schedule,
            transitive,
            round: 0,
        }
    }

    pub fn clients(&self) -> usize {
        self.n
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn set_round(&mut self, round: usize) {
        self.round = round;
    }

    pub fn similarity(&self) -> &Matrix<T> {
        &self.s
    }

    pub fn q_matrix(&self) -> &Matrix<T> {
        &self.q
    }

    #[inline]
    pub fn count(&self, i: usize, j: usize) -> u32 {
        self.counts[i * self.n + j]
    }

    #[inline]
    pub fn direct_count(&self, i: usize, j: usize) -> u32 {
        self.direct[i * self.n + j]
    }

    pub fn observed(&self, i: usize, j: usize) -> bool {
        i != j && self.count(i, j) > 0
    }

    fn fold(&mut self, i: usize, j: usize, value: T) {
        let f = self.count(i, j);
        let ff = T::lit(f64::from(f));
        let next = (ff * self.s.get(i, j) + value) / (ff + T::one());
        self.s.set(i, j, next);
        self.s.set(j, i, next);
        self.counts[i * self.n + j] = f + 1;
        self.counts[j * self.n + i] = f + 1;
    }

    /// Fold this round's pairwise instance similarities into `S`.
    ///
    /// `classifiers[k]` is the trained classifier of `participants[k]` and
    /// `global` the classifier all of them started from. Returns the number
    /// of pairs updated.
    pub fn update(&mut self, participants: &[usize], classifiers: &[Matrix<T>], global: &Matrix<T>) -> Result<usize> {
        if participants.len() != classifiers.len() {
            return Err(Error::Shape("one classifier per participant required".into()));
        }
        if let Some(&bad) = participants.iter().find(|&&p| p >= self.n) {
            return Err(Error::Shape(format!("client {bad} out of range")));
        }
        let deltas: Vec<Vec<T>> = classifiers
            .iter()
            .map(|w| {
                if !w.same_shape(global) {
                    return Err(Error::Shape("classifier matrices differ in shape".into()));
                }
                Ok(w.as_slice()
                    .iter()
                    .zip(global.as_slice())
                    .map(|(&a, &g)| a - g)
                    .collect())
            })
            .collect::<Result<_>>()?;
        let mut pairs = 0;
        for a in 0..participants.len() {
            for b in a + 1..participants.len() {
                let (i, j) = (participants[a], participants[b]);
                if i == j {
                    continue;
                }
                if self.direct_count(i, j) == 0 && self.count(i, j) > 0 {
                    // First real observation supersedes transitive estimates.
                    self.counts[i * self.n + j] = 0;
                    self.counts[j * self.n + i] = 0;
                }
                self.fold(i, j, cosine(&deltas[a], &deltas[b]));
                self.direct[i * self.n + j] += 1;
                self.direct[j * self.n + i] += 1;
                pairs += 1;
            }
        }
        Ok(pairs)
    }

    /// Estimate pairs that have never co-occurred through shared pivots.
    ///
    /// For each such pair `(i, j)` every pivot `p` with observed `s_ip`,
    /// `s_jp` and pivot deviation below `gamma` contributes one draw from
    /// `N(s_ip * s_jp, deviation)`, clamped to `[-1, 1]`. The mean of the
    /// draws is folded into `S` like a direct observation. Returns the number
    /// of pairs estimated.
    pub fn transitive_fill<R: Rng + ?Sized>(&mut self, participants: &[usize], rng: &mut R) -> usize {
        if !self.transitive.enabled {
            return 0;
        }
        let n = self.n;
        let mut present = vec![false; n];
        for &p in participants {
            if p < n {
                present[p] = true;
            }
        }
        let gamma = T::lit(self.transitive.gamma);
        let s = self.s.clone();
        let counts = self.counts.clone();
        let seen = |i: usize, j: usize| counts[i * n + j] > 0;
        let mut estimates = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if (present[i] && present[j]) || self.direct_count(i, j) > 0 {
                    continue;
                }
                let mut total = T::zero();
                let mut used = 0usize;
                for p in 0..n {
                    if p == i || p == j || !seen(i, p) || !seen(j, p) {
                        continue;
                    }
                    let (sip, sjp) = (s.get(i, p), s.get(j, p));
                    let dev = pivot_deviation(sip, sjp);
                    if dev >= gamma {
                        continue;
                    }
                    let draw = if dev > T::zero() {
                        let normal = Normal::new(sip.as_f64() * sjp.as_f64(), dev.as_f64()).expect("finite deviation");
                        T::lit(normal.sample(rng))
                    } else {
                        sip * sjp
                    };
                    total += draw.max(-T::one()).min(T::one());
                    used += 1;
                }
                if used > 0 {
                    estimates.push((i, j, total / T::from_usize_lossy(used)));
                }
            }
        }
        let filled = estimates.len();
        for (i, j, value) in estimates {
            self.fold(i, j, value);
        }
        filled
    }

    /// Min-max rescale observed entries of `S` into `Q`. Unobserved pairs
    /// get 0; a degenerate range maps every observed pair to 1.
    pub fn rescale_q(&mut self) {
        let n = self.n;
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for i in 0..n {
            for j in i + 1..n {
                if self.observed(i, j) {
                    let x = self.s.get(i, j);
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
            }
        }
        let range = hi - lo;
        for i in 0..n {
            for j in i + 1..n {
                let q = if !self.observed(i, j) {
                    T::zero()
                } else if range > T::zero() {
                    (self.s.get(i, j) - lo) / range
                } else {
                    T::one()
                };
                self.q.set(i, j, q);
                self.q.set(j, i, q);
            }
        }
    }

    pub fn epsilon(&self, round: usize) -> f64 {
        self.schedule.epsilon(round)
    }

    pub fn cluster(&self, round: usize) -> ClusterAssignment {
        threshold_components(&self.q, self.epsilon(round), round)
    }

    /// Mean squared distance of off-diagonal `Q` from the 0/1 same-cluster
    /// indicator of `truth`.
    pub fn q_mse(&self, truth: &[usize]) -> f64 {
        let n = self.n.min(truth.len());
        if n < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let ideal = if truth[i] == truth[j] { 1.0 } else { 0.0 };
                let d = self.q.get(i, j).as_f64() - ideal;
                total += d * d;
            }
        }
        total / (n * (n - 1) / 2) as f64
    }

    pub fn snapshot(&self) -> SimilaritySnapshot {
        let n = self.n;
        let rows = |m: &Matrix<T>| (0..n).map(|i| m.row(i).iter().map(|x| x.as_f64()).collect()).collect();
        let ints = |v: &[u32]| (0..n).map(|i| v[i * n..(i + 1) * n].to_vec()).collect();
        SimilaritySnapshot {
            round: self.round,
            similarity: rows(&self.s),
            counts: ints(&self.counts),
            direct: ints(&self.direct),
            q: rows(&self.q),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn state(n: usize) -> SimilarityState<f64> {
        SimilarityState::new(n, ThresholdSchedule::default(), TransitiveConfig::default())
    }

    #[test]
    fn instance_similarity_cases() {
        let g = m(&[&[0.0, 0.0]]);
        let a = m(&[&[0.3, -0.2]]);
        assert!((instance_similarity(&a, &a, &g).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(
            instance_similarity(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 1.0]]), &g).unwrap(),
            0.0
        );
        assert!((instance_similarity(&m(&[&[1.0, 1.0]]), &m(&[&[-1.0, -1.0]]), &g).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(instance_similarity(&g, &a, &g).unwrap(), 0.0);
        assert!(instance_similarity(&a, &m(&[&[1.0], &[2.0]]), &g).is_err());
    }

    #[test]
    fn cumulative_update() {
        let mut st = state(4);
        let g = m(&[&[0.0, 0.0]]);
        let same = [m(&[&[1.0, 0.0]]), m(&[&[1.0, 0.0]])];
        assert_eq!(st.update(&[0, 1], &same, &g).unwrap(), 1);
        assert_eq!(st.similarity().get(0, 1), 1.0);
        let ortho = [m(&[&[1.0, 0.0]]), m(&[&[0.0, 1.0]])];
        st.update(&[0, 1], &ortho, &g).unwrap();
        assert_eq!(st.similarity().get(0, 1), 0.5);
        assert_eq!(st.count(1, 0), 2);

        let three = [m(&[&[1.0, 0.0]]), m(&[&[0.0, 1.0]]), m(&[&[1.0, 1.0]])];
        let mut fresh = state(5);
        assert_eq!(fresh.update(&[4, 2, 0], &three, &g).unwrap(), 3);
        assert!(fresh.similarity().is_symmetric(0.0));
    }

    #[test]
    fn rescale_conventions() {
        let mut st = state(4);
        for (i, j, v) in [(0, 1, 0.2), (1, 2, 0.6), (0, 2, 1.0)] {
            st.fold(i, j, v);
        }
        st.rescale_q();
        assert!((st.q_matrix().get(0, 1) - 0.0).abs() < 1e-15);
        assert!((st.q_matrix().get(1, 2) - 0.5).abs() < 1e-15);
        assert!((st.q_matrix().get(2, 0) - 1.0).abs() < 1e-15);
        assert_eq!(st.q_matrix().get(0, 3), 0.0);

        let mut flat = state(3);
        flat.fold(0, 1, 0.4);
        flat.fold(1, 2, 0.4);
        flat.rescale_q();
        assert_eq!(flat.q_matrix().get(0, 1), 1.0);
        assert_eq!(flat.q_matrix().get(1, 2), 1.0);
        assert_eq!(flat.q_matrix().get(0, 2), 0.0);
    }

    #[test]
    fn threshold_schedule() {
        let s = ThresholdSchedule::default();
        assert_eq!(s.epsilon(0), 0.5);
        assert_eq!(s.epsilon(50), 0.975);
        assert_eq!(s.epsilon(500), 0.975);
        assert!((s.epsilon(25) - 0.7375).abs() < 1e-12);
        let mut prev = 0.0;
        for t in 0..80 {
            assert!(s.epsilon(t) >= prev);
            prev = s.epsilon(t);
        }
    }

    #[test]
    fn components_close_transitively() {
        let mut q = Matrix::<f64>::zeros(4, 4);
        for (i, j, v) in [(0, 1, 0.9), (1, 2, 0.8), (0, 2, 0.1)] {
            q.set(i, j, v);
            q.set(j, i, v);
        }
        let a = threshold_components(&q, 0.7, 3);
        assert_eq!(a.labels, vec![0, 0, 0, 1]);
        assert_eq!(a.sizes, vec![3, 1]);
        let none = threshold_components(&Matrix::<f64>::zeros(3, 3), 0.5, 0);
        assert_eq!(none.cluster_count(), 3);
    }

    #[test]
    fn transitive_degenerate_and_noop() {
        let mut st = state(3);
        st.fold(0, 2, 1.0);
        st.fold(1, 2, 1.0);
        st.direct[2] = 1;
        st.direct[6] = 1;
        st.direct[5] = 1;
        st.direct[7] = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(st.transitive_fill(&[2], &mut rng), 1);
        assert_eq!(st.similarity().get(0, 1), 1.0);
        assert_eq!(st.count(0, 1), 1);

        let mut loose = state(3);
        loose.fold(0, 2, 0.0);
        loose.fold(1, 2, 0.0);
        let before = loose.clone();
        assert_eq!(loose.transitive_fill(&[2], &mut rng), 0);
        assert_eq!(loose, before);
    }

    #[test]
    fn pivot_deviation_hand_case() {
        assert!((pivot_deviation(0.6f64, 0.8) - 0.16).abs() < 1e-15);
        let mut st = state(3);
        st.fold(0, 2, 0.6);
        st.fold(1, 2, 0.8);
        st.transitive.gamma = 0.16;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(st.transitive_fill(&[], &mut rng), 0);
        st.transitive.gamma = 0.1601;
        assert_eq!(st.transitive_fill(&[], &mut rng), 1);
    }

    #[test]
    fn direct_observation_replaces_estimates() {
        let mut st = state(3);
        st.fold(0, 1, 0.9);
        st.fold(0, 1, 0.7);
        let g = m(&[&[0.0, 0.0]]);
        st.update(&[0, 1], &[m(&[&[1.0, 0.0]]), m(&[&[0.0, 1.0]])], &g).unwrap();
        assert_eq!(st.similarity().get(0, 1), 0.0);
        assert_eq!(st.count(0, 1), 1);
        assert_eq!(st.direct_count(0, 1), 1);
    }

    #[test]
    fn rand_index() {
        let a = ClusterAssignment::from_labels(&[5, 5, 7, 7], 0);
        assert_eq!(a.labels, vec![0, 0, 1, 1]);
        assert_eq!(a.pairwise_agreement(&[0, 0, 1, 1]), 1.0);
        assert!((a.pairwise_agreement(&[0, 1, 2, 3]) - 4.0 / 6.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn running_mean(values in proptest::collection::vec(-1.0f64..1.0, 1..30)) {
            let mut st = state(2);
            for &v in &values {
                st.fold(0, 1, v);
            }
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            prop_assert!((st.similarity().get(0, 1) - mean).abs() < 1e-12);
        }

        #[test]
        fn more_threshold_fewer_links(seed in any::<u64>(), lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let mut q = Matrix::<f64>::zeros(n, n);
            for i in 0..n {
                for j in i + 1..n {
                    let v: f64 = rng.random();
                    q.set(i, j, v);
                    q.set(j, i, v);
                }
            }
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            prop_assert!(threshold_components(&q, lo, 0).cluster_count() <= threshold_components(&q, hi, 0).cluster_count());
        }

        #[test]
        fn operations_keep_symmetry(seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut st = state(6);
            let g = Matrix::<f64>::zeros(3, 2);
            for _ in 0..5 {
                let parts: Vec<usize> = rand::seq::index::sample(&mut rng, 6, 3).into_vec();
                let ws: Vec<Matrix<f64>> = parts.iter().map(|_| Matrix::from_vec(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).collect();
                st.update(&parts, &ws, &g).unwrap();
                st.transitive_fill(&parts, &mut rng);
                st.rescale_q();
                prop_assert!(st.similarity().is_symmetric(0.0));
                prop_assert!(st.q_matrix().is_symmetric(0.0));
                for i in 0..6 {
                    for j in 0..6 {
                        prop_assert_eq!(st.count(i, j), st.count(j, i));
                    }
                }
            }
        }
    }
}
