//! Round orchestration.
//!
//! A round samples participants, trains each of them locally from the
//! current global model, updates the similarity state and clustering (for
//! the clustering algorithms), aggregates, and evaluates on the held-out set.
//! Every random stream is derived from the master seed and the
//! (round, client) pair, so results do not depend on worker scheduling.

pub mod config;
pub mod metrics;

pub use config::{Algorithm, DataConfig, ExperimentConfig, NetworkConfig, Precision, SimilarityConfig, TrainingConfig};
pub use metrics::{RoundMetrics, Summary};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::aggregation::{aggregate, cadis_weights, fedavg_weights, WeightVector};
use crate::data::{load_idx_pair, partition, synth_blobs, ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::kd::{kd_grad, kd_loss, pairwise_conditional, KdConfig};
use crate::matrix::Matrix;
use crate::nn::{backward_from, cross_entropy, forward, ModelParams};
use crate::rng::{self, STREAM_CLIENT, STREAM_INIT, STREAM_SAMPLING, STREAM_TRANSITIVE};
use crate::scalar::Scalar;
use crate::similarity::{ClusterAssignment, SimilarityState};

const EVAL_BATCH: usize = 512;

/// Uniform `k`-subset of `0..n`, sorted.
pub fn sample_clients<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot sample {k} of {n} clients")));
    }
    let mut picked = rand::seq::index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl From<&TrainingConfig> for LocalConfig {
    fn from(t: &TrainingConfig) -> Self {
        Self {
            epochs: t.local_epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocalUpdate<T> {
    pub params: ModelParams<T>,
    pub samples: usize,
    /// Mean per-batch training loss (cross entropy plus weighted distillation).
    pub mean_loss: f64,
}

/// Local SGD on cross entropy plus `lambda` times the distillation loss
/// against the representations of the frozen starting model.
pub fn local_train<T: Scalar, R: Rng + ?Sized>(
    global: &ModelParams<T>,
    dataset: &Dataset<T>,
    shard: &ClientShard,
    cfg: &LocalConfig,
    kd: Option<&KdConfig>,
    rng: &mut R,
) -> Result<LocalUpdate<T>> {
    if shard.is_empty() {
        return Err(Error::Config(format!("client {} has no samples", shard.id)));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    let kd = kd.filter(|k| k.lambda > 0.0);
    let lr = T::lit(cfg.learning_rate);
    let floor = T::lit(kd.map_or(1e-12, |k| k.floor));
    let lambda = T::lit(kd.map_or(0.0, |k| k.lambda));

    // Teacher representations of the whole shard, row = position in shard.
    let teacher = match kd {
        Some(_) => Some(
            forward(global, &dataset.batch(&shard.indices)?)?
                .representations()
                .clone(),
        ),
        None => None,
    };

    let mut params = global.clone();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut loss_total = 0.0;
    let mut batches = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let idx: Vec<usize> = chunk.iter().map(|&p| shard.indices[p]).collect();
            let batch = dataset.batch(&idx)?;
            let pass = forward(&params, &batch)?;
            let mut loss = cross_entropy(pass.probabilities(), batch.labels())?;
            let mut kd_term = None;
            if let (Some(cfg), Some(teacher)) = (kd, teacher.as_ref()) {
                if chunk.len() >= 2 {
                    let rows: Vec<T> = chunk.iter().flat_map(|&p| teacher.row(p).iter().copied()).collect();
                    let t_reps = Matrix::from_vec(chunk.len(), teacher.cols(), rows)?;
                    let h = cfg.bandwidth_for(&t_reps);
                    let q = pairwise_conditional(&t_reps, h)?;
                    let s_reps = pass.representations();
                    let p = pairwise_conditional(s_reps, h)?;
                    loss += lambda * kd_loss(&q, &p, floor)?;
                    let mut g = kd_grad(&q, s_reps, h)?;
                    g.as_mut_slice().iter_mut().for_each(|x| *x *= lambda);
                    kd_term = Some(g);
                }
            }
            let grad = backward_from(&params, &batch, &pass, kd_term.as_ref())?;
            params.sgd_step(&grad, lr)?;
            loss_total += loss.as_f64();
            batches += 1;
        }
    }
    Ok(LocalUpdate {
        params,
        samples: shard.len(),
        mean_loss: loss_total / batches as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Top-1 accuracy in percent.
    pub top1: f64,
    /// `confusion[(i, j)]` = fraction of class-`j` samples predicted as `i`.
    pub confusion: Matrix<f64>,
}

impl Evaluation {
    pub fn recalls(&self) -> Vec<f64> {
        (0..self.confusion.cols()).map(|c| self.confusion.get(c, c)).collect()
    }
}

pub fn evaluate<T: Scalar>(params: &ModelParams<T>, test: &Dataset<T>) -> Result<Evaluation> {
    let v = params.shape().classes;
    let mut counts = vec![0usize; v * v];
    let mut per_class = vec![0usize; v];
    let mut correct = 0usize;
    let all: Vec<usize> = (0..test.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let batch = test.batch(chunk)?;
        let pass = forward(params, &batch)?;
        for (r, &y) in batch.labels().iter().enumerate() {
            let row = pass.logits().row(r);
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &x)| if x > row[best] { i } else { best });
            counts[pred * v + y] += 1;
            per_class[y] += 1;
            correct += usize::from(pred == y);
        }
    }
    let mut confusion = Matrix::zeros(v, v);
    for i in 0..v {
        for j in 0..v {
            if per_class[j] > 0 {
                confusion.set(i, j, counts[i * v + j] as f64 / per_class[j] as f64);
            }
        }
    }
    Ok(Evaluation {
        top1: 100.0 * correct as f64 / test.len() as f64,
        confusion,
    })
}

/// Load or generate the train/test pair described by `data`.
pub fn load_data<T: Scalar>(data: &DataConfig) -> Result<(Dataset<T>, Dataset<T>)> {
    match data {
        DataConfig::Synthetic {
            classes,
            dims,
            per_class,
            test_per_class,
            spread,
            seed,
        } => Ok((
            synth_blobs(*classes, *dims, *per_class, *spread, *seed)?,
            synth_blobs(
                *classes,
                *dims,
                *test_per_class,
                *spread,
                rng::derive_seed(*seed, &[0x7e57]),
            )?,
        )),
        DataConfig::Idx {
            dir,
            train_limit,
            test_limit,
        } => {
            let train: Dataset<T> = load_idx_pair(dir, "train")?;
            let test: Dataset<T> = load_idx_pair(dir, "t10k")?;
            let train = train_limit.map_or_else(|| train.clone(), |n| train.truncated(n));
            let test = test_limit.map_or_else(|| test.clone(), |n| test.truncated(n));
            Ok((train, test))
        }
    }
}

/// Full simulator state between rounds.
pub struct Simulation<T> {
    config: ExperimentConfig,
    train: Dataset<T>,
    test: Dataset<T>,
    shards: Vec<ClientShard>,
    truth: Vec<usize>,
    global: ModelParams<T>,
    similarity: SimilarityState<T>,
    assignment: ClusterAssignment,
    round: usize,
}

impl<T: Scalar> Simulation<T> {
    pub fn from_config(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = load_data(&config.data)?;
        Self::new(config, train, test)
    }

    pub fn new(config: ExperimentConfig, train: Dataset<T>, test: Dataset<T>) -> Result<Self> {
        config.validate()?;
        if train.dim() != test.dim() {
            return Err(Error::Consistency("train and test feature widths differ".into()));
        }
        let classes = train.classes().max(test.classes());
        let shape = config.network.shape(train.dim(), classes)?;
        let shards = partition(&train, &config.partition)?;
        let truth = shards.iter().map(|s| s.cluster).collect();
        let global = ModelParams::init(shape, &mut rng::stream(config.seed, &[STREAM_INIT]))?;
        let n = config.clients();
        let similarity = SimilarityState::new(n, config.similarity.threshold, config.similarity.transitive);
        Ok(Self {
            config,
            train,
            test,
            shards,
            truth,
            global,
            similarity,
            assignment: ClusterAssignment::singletons(n, 0),
            round: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn global(&self) -> &ModelParams<T> {
        &self.global
    }

    pub fn set_global(&mut self, params: ModelParams<T>) -> Result<()> {
        if params.shape() != self.global.shape() {
            return Err(Error::Shape("replacement model has a different topology".into()));
        }
        self.global = params;
        Ok(())
    }

    pub fn shards(&self) -> &[ClientShard] {
        &self.shards
    }

    pub fn ground_truth(&self) -> &[usize] {
        &self.truth
    }

    pub fn similarity(&self) -> &SimilarityState<T> {
        &self.similarity
    }

    pub fn assignment(&self) -> &ClusterAssignment {
        &self.assignment
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn train_set(&self) -> &Dataset<T> {
        &self.train
    }

    pub fn test_set(&self) -> &Dataset<T> {
        &self.test
    }

    pub fn classes(&self) -> usize {
        self.global.shape().classes
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        evaluate(&self.global, &self.test)
    }

    /// Participants of round `t` (independent of the algorithm).
    pub fn participants(&self, t: usize) -> Result<Vec<usize>> {
        sample_clients(
            self.config.clients(),
            self.config.training.participants,
            &mut rng::stream(self.config.seed, &[STREAM_SAMPLING, t as u64]),
        )
    }

    /// Local updates of the given participants for round `t`, in order.
    pub fn train_participants(&self, participants: &[usize], t: usize) -> Result<Vec<LocalUpdate<T>>> {
        let local = LocalConfig::from(&self.config.training);
        let kd = KdConfig {
            lambda: self.config.kd_lambda(),
            ..self.config.kd
        };
        let seed = self.config.seed;
        participants
            .par_iter()
            .map(|&p| {
                let mut stream = rng::stream(seed, &[STREAM_CLIENT, t as u64, p as u64]);
                local_train(
                    &self.global,
                    &self.train,
                    &self.shards[p],
                    &local,
                    Some(&kd),
                    &mut stream,
                )
            })
            .collect()
    }

    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let t = self.round;
        let participants = self.participants(t)?;
        let updates = self.train_participants(&participants, t)?;
        let counts: Vec<usize> = updates.iter().map(|u| u.samples).collect();

        let clustering = self.config.algorithm.clusters();
        let weights: WeightVector<T> = if clustering {
            let wg = self.global.penultimate();
            let ws: Vec<Matrix<T>> = updates.iter().map(|u| u.params.penultimate()).collect();
            self.similarity.update(&participants, &ws, &wg)?;
            self.similarity.transitive_fill(
                &participants,
                &mut rng::stream(self.config.seed, &[STREAM_TRANSITIVE, t as u64]),
            );
            self.similarity.rescale_q();
            self.similarity.set_round(t + 1);
            self.assignment = self.similarity.cluster(t);
            cadis_weights(
                &self.assignment,
                &participants,
                &counts,
                self.config.similarity.cluster_count,
            )?
        } else {
            fedavg_weights(&participants, &counts)?
        };

        let models: Vec<&ModelParams<T>> = updates.iter().map(|u| &u.params).collect();
        self.global = aggregate(&models, &weights)?;
        let eval = self.evaluate()?;
        self.round += 1;

        Ok(RoundMetrics {
            round: t,
            top1: eval.top1,
            recalls: eval.recalls(),
            weights: WeightVector {
                participants: weights.participants.clone(),
                weights: weights.weights.iter().map(|w| w.as_f64()).collect(),
            },
            cluster_recovery: clustering.then(|| self.assignment.pairwise_agreement(&self.truth)),
            qmatrix_mse: clustering.then(|| self.similarity.q_mse(&self.truth)),
            mean_local_loss: updates.iter().map(|u| u.mean_loss).sum::<f64>() / updates.len() as f64,
            clusters: clustering.then(|| self.assignment.cluster_count()),
        })
    }

    pub fn summary(&self, initial: &Evaluation, series: &[RoundMetrics]) -> Summary {
        let best = metrics::best_round(series);
        let target = self.config.target_accuracy;
        Summary {
            schema: metrics::SUMMARY_SCHEMA.into(),
            metrics_schema: metrics::METRICS_SCHEMA.into(),
            algorithm: self.config.algorithm,
            seed: self.config.seed,
            rounds: series.len(),
            initial_top1: initial.top1,
            best_top1: best.map(|m| m.top1),
            best_round: best.map(|m| m.round),
            final_top1: series.last().map(|m| m.top1),
            tail_mean_top1: metrics::tail_stats(series, 10).map(|(mean, _)| mean),
            target_accuracy: target,
            rounds_to_target: target.and_then(|a| series.iter().find(|m| m.top1 >= a).map(|m| m.round + 1)),
            final_assignment: self.assignment.labels.clone(),
            final_cluster_recovery: series.last().and_then(|m| m.cluster_recovery),
        }
    }
}

/// Everything a finished run produces.
pub struct ExperimentOutput<T> {
    pub initial: Evaluation,
    pub series: Vec<RoundMetrics>,
    pub summary: Summary,
    pub simulation: Simulation<T>,
}

impl<T: Scalar> ExperimentOutput<T> {
    pub fn metrics_csv(&self) -> String {
        metrics::metrics_csv(self.simulation.classes(), &self.series)
    }
}

/// Run `config.training.rounds` rounds, calling `on_round` after each.
pub fn run_experiment_with<T: Scalar>(
    config: ExperimentConfig,
    mut on_round: impl FnMut(&Simulation<T>, &RoundMetrics) -> Result<()>,
) -> Result<ExperimentOutput<T>> {
    let mut simulation = Simulation::<T>::from_config(config)?;
    let initial = simulation.evaluate()?;
    let rounds = simulation.config.training.rounds;
    let mut series = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let m = simulation.run_round()?;
        log::debug!(
            "round {} top1 {:.2} clusters {:?} recovery {:?}",
            m.round,
            m.top1,
            m.clusters,
            m.cluster_recovery
        );
        on_round(&simulation, &m)?;
        series.push(m);
    }
    let summary = simulation.summary(&initial, &series);
    Ok(ExperimentOutput {
        initial,
        series,
        summary,
        simulation,
    })
}

pub fn run_experiment<T: Scalar>(config: ExperimentConfig) -> Result<ExperimentOutput<T>> {
    run_experiment_with(config, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;
    use crate::nn::{backward, NetworkShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.data = DataConfig::Synthetic {
            classes: 4,
            dims: 8,
            per_class: 40,
            test_per_class: 20,
            spread: 0.1,
            seed: 3,
        };
        c.partition.clients = 8;
        c.partition.cluster_ratios = vec![1, 1];
        c.partition.label_fraction = 0.5;
        c.network = NetworkConfig {
            hidden: vec![6],
            representation: 4,
        };
        c.training = TrainingConfig {
            rounds: 3,
            participants: 4,
            local_epochs: 2,
            batch_size: 4,
            learning_rate: 0.1,
        };
        c
    }

    #[test]
    fn sampling_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_clients(5, 5, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(sample_clients(5, 1, &mut rng).unwrap().len(), 1);
        assert!(sample_clients(3, 4, &mut rng).is_err());
    }

    #[test]
    fn sampling_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut hits = [0usize; 10];
        let draws = 100_000;
        for _ in 0..draws {
            for c in sample_clients(10, 3, &mut rng).unwrap() {
                hits[c] += 1;
            }
        }
        for h in hits {
            assert!((h as f64 / draws as f64 - 0.3).abs() < 0.01);
        }
    }

    #[test]
    fn full_batch_step_matches_manual_gradient() {
        let ds: Dataset<f64> = synth_blobs(3, 5, 4, 0.1, 1).unwrap();
        let shape = NetworkShape::new(5, vec![4], 3, 3).unwrap();
        let global = ModelParams::init(shape, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let shard = ClientShard {
            id: 0,
            cluster: 0,
            indices: (0..ds.len()).collect(),
        };
        let cfg = LocalConfig {
            epochs: 1,
            batch_size: ds.len(),
            learning_rate: 0.05,
        };
        let out = local_train(&global, &ds, &shard, &cfg, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

        // Mean-loss gradients do not depend on sample order.
        let grad = backward(&global, &ds.batch(&shard.indices).unwrap(), None).unwrap();
        let mut manual = global.clone();
        manual.sgd_step(&grad, 0.05).unwrap();
        for (a, b) in out.params.as_slice().iter().zip(manual.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.samples, ds.len());
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let ds: Dataset<f64> = synth_blobs(3, 5, 6, 0.1, 1).unwrap();
        let shape = NetworkShape::new(5, vec![4], 3, 3).unwrap();
        let global = ModelParams::init(shape, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let shard = ClientShard {
            id: 0,
            cluster: 0,
            indices: (0..10).collect(),
        };
        let cfg = LocalConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.0,
        };
        let kd = KdConfig::default();
        let out = local_train(&global, &ds, &shard, &cfg, Some(&kd), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.params, global);
    }

    #[test]
    fn local_training_descends() {
        let ds: Dataset<f64> = synth_blobs(4, 6, 30, 0.1, 9).unwrap();
        let shape = NetworkShape::new(6, vec![8], 4, 4).unwrap();
        let mut improved = 0;
        let trials = 20;
        for trial in 0..trials {
            let global = ModelParams::init(shape.clone(), &mut ChaCha8Rng::seed_from_u64(trial)).unwrap();
            let shard = ClientShard {
                id: 0,
                cluster: 0,
                indices: (0..60).collect(),
            };
            let cfg = LocalConfig {
                epochs: 3,
                batch_size: 8,
                learning_rate: 0.002,
            };
            let out = local_train(&global, &ds, &shard, &cfg, None, &mut ChaCha8Rng::seed_from_u64(trial)).unwrap();
            let batch = ds.batch(&shard.indices).unwrap();
            let before = cross_entropy(forward(&global, &batch).unwrap().probabilities(), batch.labels()).unwrap();
            let after = cross_entropy(forward(&out.params, &batch).unwrap().probabilities(), batch.labels()).unwrap();
            improved += usize::from(after <= before);
        }
        assert!(improved * 10 >= trials as usize * 9, "{improved}/{trials}");
    }

    #[test]
    fn evaluation_conventions() {
        let ds: Dataset<f64> = synth_blobs(3, 4, 10, 0.0, 1).unwrap();
        let shape = NetworkShape::new(4, vec![], 2, 3).unwrap();
        let p = ModelParams::zeros(shape).unwrap();
        let e = evaluate(&p, &ds).unwrap();
        // Zero model predicts class 0 for everything.
        assert!((e.top1 - 100.0 / 3.0).abs() < 1e-9);
        for j in 0..3 {
            let col: f64 = (0..3).map(|i| e.confusion.get(i, j)).sum();
            assert!((col - 1.0).abs() < 1e-9);
        }
        assert_eq!(e.recalls(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn memorizer_scores_perfectly() {
        // Representation = one-hot input; classifier = identity.
        let feats = Matrix::from_vec(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let ds = Dataset::new(feats, vec![0, 1, 2], 3, Provenance::Synthetic).unwrap();
        let shape = NetworkShape::new(3, vec![], 3, 3).unwrap();
        let mut p = ModelParams::<f64>::zeros(shape.clone()).unwrap();
        let (w, _) = shape.feature_layer_ranges(0);
        let cls = shape.classifier_range();
        for i in 0..3 {
            p.as_mut_slice()[w.start + i * 3 + i] = 1.0;
            p.as_mut_slice()[cls.start + i * 3 + i] = 1.0;
        }
        assert_eq!(evaluate(&p, &ds).unwrap().top1, 100.0);
    }

    #[test]
    fn random_predictor_near_chance() {
        // Random features through a random net: accuracy should hover near 1/v.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10_000;
        let feats: Vec<f64> = (0..n * 4).map(|_| rng.random()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
        let ds = Dataset::new(
            Matrix::from_vec(n, 4, feats).unwrap(),
            labels,
            10,
            Provenance::Synthetic,
        )
        .unwrap();
        let p = ModelParams::init(NetworkShape::new(4, vec![8], 6, 10).unwrap(), &mut rng).unwrap();
        let top1 = evaluate(&p, &ds).unwrap().top1;
        assert!((top1 - 10.0).abs() <= 2.0, "{top1}");
    }

    #[test]
    fn single_participant_returns_its_model() {
        let mut c = tiny_config();
        c.training.participants = 1;
        c.training.rounds = 1;
        let mut sim = Simulation::<f64>::from_config(c).unwrap();
        let parts = sim.participants(0).unwrap();
        let local = sim.train_participants(&parts, 0).unwrap();
        sim.run_round().unwrap();
        assert_eq!(sim.global(), &local[0].params);
    }

    #[test]
    fn zero_rounds() {
        let mut c = tiny_config();
        c.training.rounds = 0;
        let out = run_experiment::<f64>(c).unwrap();
        assert!(out.series.is_empty());
        assert!(out.summary.best_top1.is_none());
        assert!(out.initial.top1 >= 0.0);
    }

    #[test]
    fn deterministic_series() {
        let a = run_experiment::<f64>(tiny_config()).unwrap();
        let b = run_experiment::<f64>(tiny_config()).unwrap();
        assert_eq!(a.metrics_csv(), b.metrics_csv());
        assert_eq!(a.series.len(), 3);
        let mut other = tiny_config();
        other.seed = 1;
        assert_ne!(run_experiment::<f64>(other).unwrap().metrics_csv(), a.metrics_csv());
    }

    #[test]
    fn aggregate_stays_in_envelope() {
        let mut sim = Simulation::<f64>::from_config(tiny_config()).unwrap();
        let parts = sim.participants(0).unwrap();
        let local = sim.train_participants(&parts, 0).unwrap();
        sim.run_round().unwrap();
        for (k, &g) in sim.global().as_slice().iter().enumerate() {
            let lo = local
                .iter()
                .map(|u| u.params.as_slice()[k])
                .fold(f64::INFINITY, f64::min);
            let hi = local
                .iter()
                .map(|u| u.params.as_slice()[k])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(g >= lo - 1e-12 && g <= hi + 1e-12);
        }
    }

    #[test]
    fn fedavg_matches_direct_average() {
        let mut c = tiny_config();
        c.algorithm = Algorithm::FedAvg;
        let mut sim = Simulation::<f64>::from_config(c).unwrap();
        for t in 0..2 {
            let parts = sim.participants(t).unwrap();
            // Independently retrain every participant from the same global model.
            let local = sim.train_participants(&parts, t).unwrap();
            let total: usize = local.iter().map(|u| u.samples).sum();
            let mut expect = vec![0.0; sim.global().len()];
            for u in &local {
                let w = u.samples as f64 / total as f64;
                for (e, &x) in expect.iter_mut().zip(u.params.as_slice()) {
                    *e += w * x;
                }
            }
            sim.run_round().unwrap();
            for (a, b) in sim.global().as_slice().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
