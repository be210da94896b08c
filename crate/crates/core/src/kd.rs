//! Representation-geometry distillation.
//!
//! Both teacher and student representations of a batch are turned into
//! column-stochastic matrices of Gaussian-kernel conditionals
//! `p(i|j) = K(x_i, x_j) / sum_{k != j} K(x_k, x_j)`, and the student is
//! penalised by `KL(teacher || student)` summed over columns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum Bandwidth {
    /// Median pairwise distance of the teacher representations (1.0 when zero).
    Adaptive,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    pub lambda: f64,
    pub bandwidth: Bandwidth,
    pub floor: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            bandwidth: Bandwidth::Adaptive,
            floor: 1e-12,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("kd lambda must be >= 0".into()));
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0) {
                return Err(Error::Config("kd bandwidth must be > 0".into()));
            }
        }
        if !(self.floor > 0.0) {
            return Err(Error::Config("kd probability floor must be > 0".into()));
        }
        Ok(())
    }

    /// Kernel bandwidth for a batch whose teacher representations are given.
    pub fn bandwidth_for<T: Scalar>(&self, teacher_reps: &Matrix<T>) -> T {
        match self.bandwidth {
            Bandwidth::Fixed(h) => T::lit(h),
            Bandwidth::Adaptive => {
                let h = median_pairwise_distance(teacher_reps);
                if h > T::zero() {
                    h
                } else {
                    T::one()
                }
            }
        }
    }
}

pub fn median_pairwise_distance<T: Scalar>(reps: &Matrix<T>) -> T {
    let b = reps.rows();
    let mut dists: Vec<T> = Vec::with_capacity(b * b.saturating_sub(1) / 2);
    for i in 0..b {
        for j in i + 1..b {
            dists.push(squared_distance(reps.row(i), reps.row(j)).sqrt());
        }
    }
    if dists.is_empty() {
        return T::zero();
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let m = dists.len();
    if m % 2 == 1 {
        dists[m / 2]
    } else {
        (dists[m / 2 - 1] + dists[m / 2]) / T::lit(2.0)
    }
}

#[inline]
fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Column-stochastic matrix of kernel conditionals; entry `(i, j)` is `p(i|j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMatrix<T>(Matrix<T>);

impl<T: Scalar> ConditionalMatrix<T> {
    pub fn size(&self) -> usize {
        self.0.rows()
    }

    /// `p(i|j)`.
    #[inline]
    pub fn given(&self, i: usize, j: usize) -> T {
        self.0.get(i, j)
    }

    pub fn as_matrix(&self) -> &Matrix<T> {
        &self.0
    }
}

pub fn pairwise_conditional<T: Scalar>(reps: &Matrix<T>, bandwidth: T) -> Result<ConditionalMatrix<T>> {
    let b = reps.rows();
    if b < 2 {
        return Err(Error::DegenerateBatch(format!("need at least 2 samples, got {b}")));
    }
    if !(bandwidth > T::zero()) {
        return Err(Error::Config("bandwidth must be > 0".into()));
    }
    let two_h2 = T::lit(2.0) * bandwidth * bandwidth;
    let mut sq = Matrix::zeros(b, b);
    for i in 0..b {
        for j in i + 1..b {
            let d = squared_distance(reps.row(i), reps.row(j));
            sq.set(i, j, d);
            sq.set(j, i, d);
        }
    }
    let mut out = Matrix::zeros(b, b);
    for j in 0..b {
        // Shift by the nearest neighbour so at least one kernel value is 1.
        let nearest = (0..b)
            .filter(|&k| k != j)
            .map(|k| sq.get(k, j))
            .fold(T::infinity(), T::min);
        let mut total = T::zero();
        for i in (0..b).filter(|&i| i != j) {
            let k = (-(sq.get(i, j) - nearest) / two_h2).exp();
            out.set(i, j, k);
            total += k;
        }
        for i in (0..b).filter(|&i| i != j) {
            out.set(i, j, out.get(i, j) / total);
        }
    }
    Ok(ConditionalMatrix(out))
}

/// `sum_i sum_{j != i} q(j|i) ln(q(j|i) / p(j|i))` with teacher `q`, student `p`.
pub fn kd_loss<T: Scalar>(teacher: &ConditionalMatrix<T>, student: &ConditionalMatrix<T>, floor: T) -> Result<T> {
    let b = teacher.size();
    if student.size() != b {
        return Err(Error::Shape(format!(
            "teacher batch {b}, student batch {}",
            student.size()
        )));
    }
    let mut total = T::zero();
    for i in 0..b {
        for j in (0..b).filter(|&j| j != i) {
            let q = teacher.given(j, i);
            if q > T::zero() {
                let p = student.given(j, i).max(floor);
                total += q * (q.max(floor) / p).ln();
            }
        }
    }
    Ok(total)
}

/// Gradient of [`kd_loss`] with respect to the student representations.
///
/// With `d_ij = |x_i - x_j|^2` and bandwidth `h`,
/// `dL/dx_m = sum_{j != m} [(q(j|m) - p(j|m)) + (q(m|j) - p(m|j))] (x_m - x_j) / h^2`.
/// The floor is ignored here; it only matters once a conditional underflows.
pub fn kd_grad<T: Scalar>(teacher: &ConditionalMatrix<T>, student_reps: &Matrix<T>, bandwidth: T) -> Result<Matrix<T>> {
    let b = student_reps.rows();
    let u = student_reps.cols();
    if teacher.size() != b {
        return Err(Error::Shape(format!(
            "teacher batch {}, student batch {b}",
            teacher.size()
        )));
    }
    let mut grad = Matrix::zeros(b, u);
    if b < 3 {
        return Ok(grad);
    }
    let student = pairwise_conditional(student_reps, bandwidth)?;
    let inv_h2 = T::one() / (bandwidth * bandwidth);
    for m in 0..b {
        for j in (0..b).filter(|&j| j != m) {
            let coeff =
                (teacher.given(j, m) - student.given(j, m) + teacher.given(m, j) - student.given(m, j)) * inv_h2;
            if coeff == T::zero() {
                continue;
            }
            let (xm, xj) = (student_reps.row(m), student_reps.row(j));
            let diff: Vec<T> = xm.iter().zip(xj).map(|(&a, &c)| a - c).collect();
            for (g, d) in grad.row_mut(m).iter_mut().zip(diff) {
                *g += coeff * d;
            }
        }
    }
    Ok(grad)
}
