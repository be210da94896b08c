//! Closed-form checks that run independently of the simulator.
//!
//! * Coverage time: expected number of uniformly sampled `k`-of-`n` rounds
//!   until every client has participated, by exact Markov-chain recursion,
//!   by the geometric upper bound, and by Monte Carlo.
//! * Quadratic federated toy model: clients with losses `a z^2 + b z` run `K`
//!   local gradient steps per round; sample-uniform averaging is compared
//!   with cluster-balanced averaging on the cluster-balanced objective.

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{Exact, Scalar};

/// Two-sided 99% standard normal quantile.
pub const Z_99: f64 = 2.575_829_303_548_901;

pub fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc *= BigUint::from(n - i);
        acc /= BigUint::from(i + 1);
    }
    acc
}

fn check_nk(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::Config(format!("need 1 <= k <= n, got n={n} k={k}")));
    }
    Ok(())
}

/// `1 + sum_{i=k}^{n-1} C(n,k) / (C(n,k) - C(i,k))`.
pub fn expected_rounds_bound<T: Exact>(n: usize, k: usize) -> Result<T> {
    check_nk(n, k)?;
    let total = binomial(n, k);
    let mut acc = T::one();
    for i in k..n {
        acc = acc + T::from_ratio(&total, &(&total - binomial(i, k)));
    }
    Ok(acc)
}

/// Exact expected coverage time.
///
/// State `i` = number of distinct clients seen so far. From `i`, a round
/// reaches `m = i + new` with probability `C(n-i, new) C(i, k-new) / C(n,k)`.
/// Solved backward from `E(n) = 0`, dividing out the self-loop each step;
/// `E(0) = 1 + E(k)`.
pub fn expected_rounds_exact<T: Exact>(n: usize, k: usize) -> Result<T> {
    check_nk(n, k)?;
    let total = binomial(n, k);
    let mut expect: Vec<T> = vec![T::zero(); n + 1];
    for i in (k..n).rev() {
        let mut acc = T::one();
        for fresh in 1..=k.min(n - i) {
            let ways = binomial(n - i, fresh) * binomial(i, k - fresh);
            if ways.is_zero() {
                continue;
            }
            acc = acc + T::from_ratio(&ways, &total) * expect[i + fresh].clone();
        }
        let stay = binomial(i, k);
        expect[i] = acc * T::from_ratio(&total, &(&total - stay));
    }
    Ok(T::one() + expect[k].clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub mean: f64,
    /// 99% normal-approximation half-width of the mean.
    pub half_width: f64,
    pub trials: usize,
}

impl MonteCarlo {
    pub fn contains(&self, value: f64) -> bool {
        (value - self.mean).abs() <= self.half_width
    }
}

fn coverage_trial<R: rand::Rng>(n: usize, k: usize, rng: &mut R, seen: &mut [bool]) -> u64 {
    seen.iter_mut().for_each(|s| *s = false);
    let mut covered = 0;
    let mut rounds = 0;
    while covered < n {
        rounds += 1;
        for c in sample(rng, n, k) {
            if !seen[c] {
                seen[c] = true;
                covered += 1;
            }
        }
    }
    rounds
}

/// Simulated coverage time. Trials are split into fixed chunks with their
/// own derived streams, so the result does not depend on thread count.
pub fn expected_rounds_mc(n: usize, k: usize, trials: usize, seed: u64) -> Result<MonteCarlo> {
    check_nk(n, k)?;
    if trials == 0 {
        return Err(Error::Config("need at least one trial".into()));
    }
    const CHUNK: usize = 4096;
    let chunks = trials.div_ceil(CHUNK);
    let (sum, sum_sq) = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::stream(seed, &[c as u64]);
            let mut seen = vec![false; n];
            let count = CHUNK.min(trials - c * CHUNK);
            (0..count).fold((0u64, 0u128), |(s, sq), _| {
                let r = coverage_trial(n, k, &mut rng, &mut seen);
                (s + r, sq + u128::from(r) * u128::from(r))
            })
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let t = trials as f64;
    let mean = sum as f64 / t;
    let var = if trials > 1 {
        ((sum_sq as f64 - t * mean * mean) / (t - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(MonteCarlo {
        mean,
        half_width: Z_99 * (var / t).sqrt(),
        trials,
    })
}

/// Client with loss `a z^2 + b z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticClient<T> {
    pub a: T,
    pub b: T,
    pub cluster: usize,
}

impl<T: Scalar> QuadraticClient<T> {
    pub fn new(a: T, b: T, cluster: usize) -> Result<Self> {
        if !(a > T::zero()) {
            return Err(Error::Config("quadratic coefficient must be > 0".into()));
        }
        Ok(Self { a, b, cluster })
    }

    pub fn loss(&self, z: T) -> T {
        self.a * z * z + self.b * z
    }

    /// `(1 - 2 a eta)^K`: contraction of `K` local steps.
    pub fn phi(&self, eta: T, steps: usize) -> T {
        (T::one() - T::lit(2.0) * self.a * eta).powi(steps as i32)
    }

    /// `K` exact gradient steps from `z`.
    pub fn local_steps(&self, mut z: T, eta: T, steps: usize) -> T {
        for _ in 0..steps {
            z -= eta * (T::lit(2.0) * self.a * z + self.b);
        }
        z
    }

    /// Closed form of [`Self::local_steps`]: `phi z - (b / 2a)(1 - phi)`.
    pub fn local_closed_form(&self, z: T, eta: T, steps: usize) -> T {
        let phi = self.phi(eta, steps);
        phi * z - self.b / (T::lit(2.0) * self.a) * (T::one() - phi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Cadis,
    FedAvg,
}

/// Per-client weights: uniform for FedAvg, cluster-balanced for CADIS
/// (each cluster `1 / #clusters`, split equally inside).
pub fn scheme_weights<T: Scalar>(clients: &[QuadraticClient<T>], scheme: Scheme) -> Vec<T> {
    let m = clients.len();
    match scheme {
        Scheme::FedAvg => vec![T::one() / T::from_usize_lossy(m); m],
        Scheme::Cadis => {
            let mut ids: Vec<usize> = clients.iter().map(|c| c.cluster).collect();
            ids.sort_unstable();
            ids.dedup();
            let groups = T::from_usize_lossy(ids.len());
            clients
                .iter()
                .map(|c| {
                    let size = clients.iter().filter(|d| d.cluster == c.cluster).count();
                    T::one() / (groups * T::from_usize_lossy(size))
                })
                .collect()
        }
    }
}

fn check_contraction<T: Scalar>(clients: &[QuadraticClient<T>], eta: T) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::Config("need at least one client".into()));
    }
    for c in clients {
        let factor = (T::one() - T::lit(2.0) * c.a * eta).abs();
        if !(eta > T::zero()) || factor >= T::one() {
            return Err(Error::Divergence(format!(
                "|1 - 2 a eta| = {factor} for a = {}, eta = {eta}",
                c.a
            )));
        }
    }
    Ok(())
}

/// Global iterates `Z^0 .. Z^T` obtained by iterating local steps and
/// aggregation.
pub fn quadratic_trajectory<T: Scalar>(
    clients: &[QuadraticClient<T>],
    eta: T,
    steps: usize,
    rounds: usize,
    scheme: Scheme,
    z0: T,
) -> Result<Vec<T>> {
    check_contraction(clients, eta)?;
    let w = scheme_weights(clients, scheme);
    let mut z = z0;
    let mut out = Vec::with_capacity(rounds + 1);
    out.push(z);
    for _ in 0..rounds {
        z = clients
            .iter()
            .zip(&w)
            .map(|(c, &wi)| wi * c.local_steps(z, eta, steps))
            .sum();
        out.push(z);
    }
    Ok(out)
}

/// Per-round affine map `Z -> rate * Z + (1 - rate) * limit`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundMap<T> {
    pub rate: T,
    pub limit: T,
}

impl<T: Scalar> RoundMap<T> {
    pub fn new(clients: &[QuadraticClient<T>], eta: T, steps: usize, scheme: Scheme) -> Result<Self> {
        check_contraction(clients, eta)?;
        let w = scheme_weights(clients, scheme);
        let rate: T = clients.iter().zip(&w).map(|(c, &wi)| wi * c.phi(eta, steps)).sum();
        let offset: T = clients
            .iter()
            .zip(&w)
            .map(|(c, &wi)| wi * c.local_closed_form(T::zero(), eta, steps))
            .sum();
        Ok(Self {
            rate,
            limit: offset / (T::one() - rate),
        })
    }

    /// `Z^t = rate^t Z^0 + (1 - rate^t) limit`.
    pub fn at(&self, z0: T, t: usize) -> T {
        let r = self.rate.powi(t as i32);
        r * z0 + (T::one() - r) * self.limit
    }
}

/// Converged global model under `scheme`.
pub fn fixed_point<T: Scalar>(clients: &[QuadraticClient<T>], eta: T, steps: usize, scheme: Scheme) -> Result<T> {
    RoundMap::new(clients, eta, steps, scheme).map(|m| m.limit)
}

/// Cluster-balanced objective the federation should minimise.
pub fn global_objective<T: Scalar>(z: T, clients: &[QuadraticClient<T>]) -> T {
    scheme_weights(clients, Scheme::Cadis)
        .into_iter()
        .zip(clients)
        .map(|(w, c)| w * c.loss(z))
        .sum()
}

/// Minimiser of [`global_objective`].
pub fn objective_minimizer<T: Scalar>(clients: &[QuadraticClient<T>]) -> T {
    let w = scheme_weights(clients, Scheme::Cadis);
    let a: T = clients.iter().zip(&w).map(|(c, &wi)| wi * c.a).sum();
    let b: T = clients.iter().zip(&w).map(|(c, &wi)| wi * c.b).sum();
    -b / (T::lit(2.0) * a)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub z_fedavg: f64,
    pub z_cadis: f64,
    pub loss_fedavg: f64,
    pub loss_cadis: f64,
    /// `f*(Z_FedAvg) - f*(Z_CADIS)`.
    pub gap: f64,
}

pub fn convergence_report<T: Scalar>(
    clients: &[QuadraticClient<T>],
    eta: T,
    steps: usize,
) -> Result<ConvergenceReport> {
    let zf = fixed_point(clients, eta, steps, Scheme::FedAvg)?;
    let zc = fixed_point(clients, eta, steps, Scheme::Cadis)?;
    let lf = global_objective(zf, clients);
    let lc = global_objective(zc, clients);
    Ok(ConvergenceReport {
        z_fedavg: zf.as_f64(),
        z_cadis: zc.as_f64(),
        loss_fedavg: lf.as_f64(),
        loss_cadis: lc.as_f64(),
        gap: (lf - lc).as_f64(),
    })
}
