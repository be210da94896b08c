//! Dense classifier with hand-derived gradients.
//!
//! The final layer `W` (classes x representation, no bias) is kept at the
//! tail of the flat parameter vector so the server can diff it cheaply.

mod io;
mod params;

pub use io::{read_params, write_params, PARAMS_MAGIC, PARAMS_VERSION};
pub use params::{Activation, ModelParams, NetworkShape};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-major sample block with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    features: Matrix<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(features: Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Shape("batch must hold at least one sample".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} samples but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn check(&self, shape: &NetworkShape) -> Result<()> {
        if self.features.cols() != shape.input {
            return Err(Error::Shape(format!(
                "batch has {} features, network expects {}",
                self.features.cols(),
                shape.input
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= shape.classes) {
            return Err(Error::Shape(format!(
                "label {bad} out of range for {} classes",
                shape.classes
            )));
        }
        Ok(())
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    /// Post-activation output of every feature layer; the last is `R(x)`.
    activations: Vec<Matrix<T>>,
    logits: Matrix<T>,
    probabilities: Matrix<T>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn representations(&self) -> &Matrix<T> {
        self.activations.last().expect("at least one feature layer")
    }

    pub fn logits(&self) -> &Matrix<T> {
        &self.logits
    }

    pub fn probabilities(&self) -> &Matrix<T> {
        &self.probabilities
    }
}

// out[b][o] = bias[o] + sum_i w[o][i] * x[b][i]
fn affine<T: Scalar>(x: &Matrix<T>, w: &[T], bias: Option<&[T]>, out_dim: usize) -> Matrix<T> {
    let in_dim = x.cols();
    let mut out = Matrix::zeros(x.rows(), out_dim);
    for b in 0..x.rows() {
        let xr = x.row(b);
        let orow = out.row_mut(b);
        for (o, slot) in orow.iter_mut().enumerate() {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = bias.map_or(T::zero(), |bs| bs[o]);
            for (&wi, &xi) in wr.iter().zip(xr) {
                acc += wi * xi;
            }
            *slot = acc;
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut probs = logits.clone();
    for r in 0..probs.rows() {
        let row = probs.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    probs
}

pub fn forward<T: Scalar>(params: &ModelParams<T>, batch: &Batch<T>) -> Result<ForwardPass<T>> {
    let shape = params.shape();
    batch.check(shape)?;
    let dims = shape.feature_dims();
    let values = params.as_slice();
    let mut activations: Vec<Matrix<T>> = Vec::with_capacity(shape.feature_layers());
    for layer in 0..shape.feature_layers() {
        let (w, b) = shape.feature_layer_ranges(layer);
        let input = activations.last().unwrap_or(batch.features());
        let mut z = affine(input, &values[w], Some(&values[b]), dims[layer + 1]);
        for x in z.as_mut_slice() {
            *x = x.max(T::zero());
        }
        activations.push(z);
    }
    let reps = activations.last().expect("at least one feature layer");
    let logits = affine(reps, params.classifier(), None, shape.classes);
    let probabilities = softmax(&logits);
    Ok(ForwardPass {
        activations,
        logits,
        probabilities,
    })
}

/// Smallest absolute pre-activation over every hidden unit and sample.
///
/// Finite-difference checks are only meaningful when this is well above the
/// step size, since ReLU is not differentiable at zero.
pub fn preactivation_margin<T: Scalar>(params: &ModelParams<T>, batch: &Batch<T>) -> Result<T> {
    let shape = params.shape();
    batch.check(shape)?;
    let dims = shape.feature_dims();
    let values = params.as_slice();
    let mut input = batch.features().clone();
    let mut margin = T::infinity();
    for layer in 0..shape.feature_layers() {
        let (w, b) = shape.feature_layer_ranges(layer);
        let mut z = affine(&input, &values[w], Some(&values[b]), dims[layer + 1]);
        for x in z.as_mut_slice() {
            margin = margin.min(x.abs());
            *x = x.max(T::zero());
        }
        input = z;
    }
    Ok(margin)
}

/// Mean negative natural-log likelihood of the true labels.
pub fn cross_entropy<T: Scalar>(probabilities: &Matrix<T>, labels: &[usize]) -> Result<T> {
    if probabilities.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} labels",
            probabilities.rows(),
            labels.len()
        )));
    }
    let floor = T::lit(PROB_FLOOR);
    let mut total = T::zero();
    for (r, &y) in labels.iter().enumerate() {
        if y >= probabilities.cols() {
            return Err(Error::Shape(format!("label {y} out of range")));
        }
        total -= probabilities.get(r, y).max(floor).ln();
    }
    Ok(total / T::from_usize_lossy(labels.len()))
}

/// Gradient of `mean CE + kd` with respect to every parameter.
///
/// `kd_term`, when present, is the gradient of the (already weighted)
/// distillation loss with respect to the representation matrix.
pub fn backward<T: Scalar>(params: &ModelParams<T>, batch: &Batch<T>, kd_term: Option<&Matrix<T>>) -> Result<Vec<T>> {
    let pass = forward(params, batch)?;
    backward_from(params, batch, &pass, kd_term)
}

/// Same as [`backward`] but reuses an existing forward pass.
pub fn backward_from<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch<T>,
    pass: &ForwardPass<T>,
    kd_term: Option<&Matrix<T>>,
) -> Result<Vec<T>> {
    let shape = params.shape();
    batch.check(shape)?;
    let n = batch.len();
    let (u, v) = (shape.representation, shape.classes);
    if pass.probabilities.rows() != n {
        return Err(Error::Shape("forward pass does not match batch".into()));
    }
    if let Some(kd) = kd_term {
        if kd.rows() != n || kd.cols() != u {
            return Err(Error::Shape(format!(
                "kd gradient is {}x{}, expected {n}x{u}",
                kd.rows(),
                kd.cols()
            )));
        }
    }

    let values = params.as_slice();
    let mut grad = vec![T::zero(); values.len()];
    let inv_n = T::one() / T::from_usize_lossy(n);

    // dL/dlogits = (p - onehot) / n
    let mut dlogits = pass.probabilities.clone();
    for (r, &y) in batch.labels().iter().enumerate() {
        let row = dlogits.row_mut(r);
        row[y] -= T::one();
        for x in row.iter_mut() {
            *x *= inv_n;
        }
    }

    let reps = pass.representations();
    let w = params.classifier();
    let cls = shape.classifier_range();
    let mut upstream = kd_term.cloned().unwrap_or_else(|| Matrix::zeros(n, u));
    {
        let gw = &mut grad[cls];
        for b in 0..n {
            let dl = dlogits.row(b);
            let rep = reps.row(b);
            let up = upstream.row_mut(b);
            for (k, &d) in dl.iter().enumerate().take(v) {
                let wrow = &w[k * u..(k + 1) * u];
                let grow = &mut gw[k * u..(k + 1) * u];
                for c in 0..u {
                    grow[c] += d * rep[c];
                    up[c] += d * wrow[c];
                }
            }
        }
    }

    let dims = shape.feature_dims();
    for layer in (0..shape.feature_layers()).rev() {
        let (wr, br) = shape.feature_layer_ranges(layer);
        let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
        let out = &pass.activations[layer];
        let input = if layer == 0 {
            batch.features()
        } else {
            &pass.activations[layer - 1]
        };
        // Rectifier derivative: pass-through where the unit fired.
        for (d, &a) in upstream.as_mut_slice().iter_mut().zip(out.as_slice()) {
            if a <= T::zero() {
                *d = T::zero();
            }
        }
        let weights = &values[wr.clone()];
        let mut next = if layer > 0 {
            Some(Matrix::zeros(n, fan_in))
        } else {
            None
        };
        let (gw, gb) = {
            let (head, tail) = grad.split_at_mut(br.start);
            (&mut head[wr.clone()], &mut tail[..fan_out])
        };
        for b in 0..n {
            let dz = upstream.row(b);
            let x = input.row(b);
            for o in 0..fan_out {
                let d = dz[o];
                if d == T::zero() {
                    continue;
                }
                gb[o] += d;
                let grow = &mut gw[o * fan_in..(o + 1) * fan_in];
                for (g, &xi) in grow.iter_mut().zip(x) {
                    *g += d * xi;
                }
                if let Some(next) = next.as_mut() {
                    let wrow = &weights[o * fan_in..(o + 1) * fan_in];
                    for (nx, &wi) in next.row_mut(b).iter_mut().zip(wrow) {
                        *nx += d * wi;
                    }
                }
            }
        }
        if let Some(next) = next {
            upstream = next;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(x: Vec<f64>, y: usize) -> Batch<f64> {
        let d = x.len();
        Batch::new(Matrix::from_vec(1, d, x).unwrap(), vec![y]).unwrap()
    }

    /// Identity-like feature layer so the representation equals the input.
    fn passthrough(u: usize, v: usize) -> ModelParams<f64> {
        let shape = NetworkShape::new(u, vec![], u, v).unwrap();
        let mut p = ModelParams::zeros(shape.clone()).unwrap();
        let (w, _) = shape.feature_layer_ranges(0);
        let ws = &mut p.as_mut_slice()[w];
        for i in 0..u {
            ws[i * u + i] = 1.0;
        }
        p
    }

    #[test]
    fn zero_classifier_gives_uniform_probabilities() {
        let shape = NetworkShape::new(3, vec![4], 2, 5).unwrap();
        let mut p = ModelParams::<f64>::init(shape.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cls = shape.classifier_range();
        p.as_mut_slice()[cls].iter_mut().for_each(|x| *x = 0.0);
        let pass = forward(&p, &single(vec![0.3, 0.9, 0.1], 0)).unwrap();
        for &q in pass.probabilities().as_slice() {
            assert!((q - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_evaluated_softmax() {
        let mut p = passthrough(2, 2);
        let cls = p.shape().classifier_range();
        p.as_mut_slice()[cls].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        let pass = forward(&p, &single(vec![1.0, 0.0], 0)).unwrap();
        let e = std::f64::consts::E;
        assert_eq!(pass.logits().as_slice(), &[1.0, 0.0]);
        assert!((pass.probabilities().get(0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((pass.probabilities().get(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn probability_rows_normalized() {
        let shape = NetworkShape::new(4, vec![6], 3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ModelParams::<f64>::init(shape, &mut rng).unwrap();
        let x: Vec<f64> = (0..12).map(|_| rng.random()).collect();
        let batch = Batch::new(Matrix::from_vec(3, 4, x).unwrap(), vec![0, 1, 3]).unwrap();
        let pass = forward(&p, &batch).unwrap();
        for r in 0..3 {
            let s: f64 = pass.probabilities().row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(pass.representations().as_slice().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let logits = Matrix::from_vec(1, 3, vec![50.0, -50.0, 49.0]).unwrap();
        let probs = softmax(&logits);
        let s: f64 = probs.row(0).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert!(probs.as_slice().iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn cross_entropy_values() {
        let perfect = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&perfect, &[0]).unwrap(), 0.0);
        let uniform = Matrix::from_vec(1, 10, vec![0.1; 10]).unwrap();
        assert!((cross_entropy(&uniform, &[3]).unwrap() - 10f64.ln()).abs() < 1e-12);
        let row = Matrix::from_vec(1, 3, vec![0.5, 0.25, 0.25]).unwrap();
        assert!((cross_entropy(&row, &[1]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&row, &[1, 2]).is_err());
    }

    #[test]
    fn classifier_gradient_closed_form() {
        // W = 0, R = [1, 1], v = 3, true class 1: p = 1/3 everywhere.
        let p = passthrough(2, 3);
        let g = backward(&p, &single(vec![1.0, 1.0], 1), None).unwrap();
        let gw = &g[p.shape().classifier_range()];
        let third = 1.0 / 3.0;
        let expected = [third, third, -2.0 * third, -2.0 * third, third, third];
        for (a, b) in gw.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{gw:?}");
        }
    }

    #[test]
    fn kd_term_is_additive() {
        let shape = NetworkShape::new(3, vec![4], 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ModelParams::<f64>::init(shape, &mut rng).unwrap();
        let x: Vec<f64> = (0..6).map(|_| rng.random()).collect();
        let batch = Batch::new(Matrix::from_vec(2, 3, x).unwrap(), vec![0, 2]).unwrap();
        let plain = backward(&p, &batch, None).unwrap();
        let zero_kd = backward(&p, &batch, Some(&Matrix::zeros(2, 2))).unwrap();
        assert_eq!(plain, zero_kd);
    }

    #[test]
    fn shape_errors() {
        let p = passthrough(2, 3);
        assert!(forward(&p, &single(vec![1.0, 1.0, 1.0], 0)).is_err());
        assert!(forward(&p, &single(vec![1.0, 1.0], 3)).is_err());
        assert!(Batch::<f64>::new(Matrix::zeros(0, 2), vec![]).is_err());
        assert!(backward(&p, &single(vec![1.0, 1.0], 0), Some(&Matrix::zeros(1, 3))).is_err());
    }
}
