//! Finite-difference verification of the analytic training gradient.
//!
//! The objective is the mean cross entropy of a batch plus `lambda` times
//! the distillation loss between the representations of a fixed teacher and
//! the model being differentiated. Each case draws a random topology, batch
//! and teacher, and compares every coordinate of the analytic gradient with
//! a central difference.

use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::error::Result;
use crate::kd::{kd_grad, kd_loss, median_pairwise_distance, pairwise_conditional, ConditionalMatrix};
use crate::matrix::Matrix;
use crate::nn::{backward_from, cross_entropy, forward, preactivation_margin, Batch, ModelParams, NetworkShape};
use crate::rng::SimRng;

/// Deliberate mistakes that a working checker must catch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Negate the distillation contribution to the representation gradient.
    KdSign,
    /// Negate the classifier block of the final gradient.
    ClassifierSign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub lambda: f64,
    pub max_batch: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is essentially zero are compared on an absolute scale.
    pub scale_floor: f64,
    pub fault: Option<Fault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 24,
            lambda: 0.7,
            max_batch: 8,
            step: 1e-6,
            tolerance: 1e-4,
            scale_floor: 1e-4,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckCase {
    pub layer_sizes: Vec<usize>,
    pub batch: usize,
    pub lambda: f64,
    pub parameters: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub cases: Vec<GradCheckCase>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

/// Fixed distillation target for one batch.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub conditionals: ConditionalMatrix<f64>,
    pub bandwidth: f64,
}

impl Teacher {
    pub fn from_representations(reps: &Matrix<f64>) -> Result<Self> {
        let bandwidth = median_pairwise_distance(reps);
        let bandwidth = if bandwidth > 0.0 { bandwidth } else { 1.0 };
        Ok(Self {
            conditionals: pairwise_conditional(reps, bandwidth)?,
            bandwidth,
        })
    }
}

/// `CE + lambda * KD` at `params`.
pub fn objective(params: &ModelParams<f64>, batch: &Batch<f64>, teacher: Option<&Teacher>, lambda: f64) -> Result<f64> {
    let pass = forward(params, batch)?;
    let mut loss = cross_entropy(pass.probabilities(), batch.labels())?;
    if let Some(t) = teacher.filter(|_| lambda != 0.0) {
        let student = pairwise_conditional(pass.representations(), t.bandwidth)?;
        loss += lambda * kd_loss(&t.conditionals, &student, f64::MIN_POSITIVE)?;
    }
    Ok(loss)
}

/// Analytic gradient of [`objective`], optionally with an injected fault.
pub fn analytic_gradient(
    params: &ModelParams<f64>,
    batch: &Batch<f64>,
    teacher: Option<&Teacher>,
    lambda: f64,
    fault: Option<Fault>,
) -> Result<Vec<f64>> {
    let pass = forward(params, batch)?;
    let kd_term = match teacher.filter(|_| lambda != 0.0) {
        Some(t) => {
            let mut g = kd_grad(&t.conditionals, pass.representations(), t.bandwidth)?;
            let sign = if fault == Some(Fault::KdSign) { -lambda } else { lambda };
            g.as_mut_slice().iter_mut().for_each(|x| *x *= sign);
            Some(g)
        }
        None => None,
    };
    let mut grad = backward_from(params, batch, &pass, kd_term.as_ref())?;
    if fault == Some(Fault::ClassifierSign) {
        grad[params.shape().classifier_range()]
            .iter_mut()
            .for_each(|x| *x = -*x);
    }
    Ok(grad)
}

/// Central differences of [`objective`] for every parameter.
pub fn numeric_gradient(
    params: &ModelParams<f64>,
    batch: &Batch<f64>,
    teacher: Option<&Teacher>,
    lambda: f64,
    step: f64,
) -> Result<Vec<f64>> {
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let x = params.as_slice()[k];
        probe.as_mut_slice()[k] = x + step;
        let up = objective(&probe, batch, teacher, lambda)?;
        probe.as_mut_slice()[k] = x - step;
        let down = objective(&probe, batch, teacher, lambda)?;
        probe.as_mut_slice()[k] = x;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Largest `|a - n| / max(|a|, |n|, floor)` and where it occurs.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .enumerate()
        .fold((0.0, 0), |best, (i, e)| if e > best.0 { (e, i) } else { best })
}

struct Fixture {
    params: ModelParams<f64>,
    batch: Batch<f64>,
    teacher: Option<Teacher>,
}

fn random_fixture<R: Rng + ?Sized>(rng: &mut R, cfg: &GradCheckConfig) -> Result<Fixture> {
    // Retry until no hidden unit sits within a few steps of the ReLU kink.
    let margin = 1e3 * cfg.step;
    loop {
        let input = rng.random_range(2..=6);
        let hidden: Vec<usize> = (0..rng.random_range(0..=2)).map(|_| rng.random_range(2..=6)).collect();
        let shape = NetworkShape::new(input, hidden, rng.random_range(2..=5), rng.random_range(2..=5))?;
        let b = rng.random_range(1..=cfg.max_batch.max(1));
        let features: Vec<f64> = (0..b * input).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = (0..b).map(|_| rng.random_range(0..shape.classes)).collect();
        let batch = Batch::new(Matrix::from_vec(b, input, features)?, labels)?;

        let mut params = ModelParams::init(shape.clone(), rng)?;
        let mut teacher_params = params.clone();
        for k in 0..params.len() {
            params.as_mut_slice()[k] += rng.random_range(-0.1..0.1);
            teacher_params.as_mut_slice()[k] += rng.random_range(-0.3..0.3);
        }
        if preactivation_margin(&params, &batch)? < margin {
            continue;
        }
        let teacher = if b >= 2 {
            Some(Teacher::from_representations(
                forward(&teacher_params, &batch)?.representations(),
            )?)
        } else {
            None
        };
        return Ok(Fixture { params, batch, teacher });
    }
}

pub fn check_case<R: Rng + ?Sized>(rng: &mut R, cfg: &GradCheckConfig) -> Result<GradCheckCase> {
    let f = random_fixture(rng, cfg)?;
    let analytic = analytic_gradient(&f.params, &f.batch, f.teacher.as_ref(), cfg.lambda, cfg.fault)?;
    let numeric = numeric_gradient(&f.params, &f.batch, f.teacher.as_ref(), cfg.lambda, cfg.step)?;
    let (err, idx) = max_relative_error(&analytic, &numeric, cfg.scale_floor);
    Ok(GradCheckCase {
        layer_sizes: f.params.shape().layer_sizes(),
        batch: f.batch.len(),
        lambda: cfg.lambda,
        parameters: f.params.len(),
        max_rel_error: err,
        worst_index: idx,
        passed: err < cfg.tolerance,
    })
}

/// Run `cfg.trials` random cases from `seed`.
pub fn run_gradcheck(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = SimRng::seed_from_u64(seed);
    let cases = (0..cfg.trials)
        .map(|_| check_case(&mut rng, cfg))
        .collect::<Result<_>>()?;
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        cases,
    })
}
