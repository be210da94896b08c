use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Hidden-layer nonlinearity. Only the rectifier is supported: its outputs are
/// non-negative, which the classifier-row sign analysis depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Dense topology `input -> hidden... -> representation -> classes`.
///
/// Every feature layer (including the one producing the representation) is
/// affine with bias followed by the activation. The classifier is a bias-free
/// `classes x representation` matrix followed by softmax.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub representation: usize,
    pub classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for NetworkShape {
    fn default() -> Self {
        Self {
            input: 784,
            hidden: vec![128],
            representation: 64,
            classes: 10,
            activation: Activation::Relu,
        }
    }
}

impl NetworkShape {
    pub fn new(input: usize, hidden: Vec<usize>, representation: usize, classes: usize) -> Result<Self> {
        let shape = Self {
            input,
            hidden,
            representation,
            classes,
            activation: Activation::Relu,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.representation == 0 {
            return Err(Error::Config("representation dim must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("class count must be >= 2".into()));
        }
        Ok(())
    }

    /// Widths `[input, hidden.., representation]` of the feature extractor.
    pub fn feature_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.representation);
        dims
    }

    pub fn feature_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// Layer sizes as stored in parameter file headers.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = self.feature_dims();
        sizes.push(self.classes);
        sizes
    }

    pub fn from_layer_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 3 {
            return Err(Error::Shape(format!(
                "need at least 3 layer sizes, got {}",
                sizes.len()
            )));
        }
        Self::new(
            sizes[0],
            sizes[1..sizes.len() - 2].to_vec(),
            sizes[sizes.len() - 2],
            sizes[sizes.len() - 1],
        )
    }

    pub fn param_count(&self) -> usize {
        let dims = self.feature_dims();
        let features: usize = dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        features + self.classes * self.representation
    }

    /// Offsets of one feature layer's weight block (`out x in`) and bias block.
    pub fn feature_layer_ranges(&self, layer: usize) -> (Range<usize>, Range<usize>) {
        let dims = self.feature_dims();
        let mut offset = 0;
        for l in 0..layer {
            offset += dims[l + 1] * dims[l] + dims[l + 1];
        }
        let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
        let w = offset..offset + fan_out * fan_in;
        let b = w.end..w.end + fan_out;
        (w, b)
    }

    pub fn classifier_range(&self) -> Range<usize> {
        let len = self.classes * self.representation;
        let total = self.param_count();
        total - len..total
    }
}

/// Flat parameter vector together with the topology that interprets it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    shape: NetworkShape,
    values: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(shape: NetworkShape) -> Result<Self> {
        shape.validate()?;
        let values = vec![T::zero(); shape.param_count()];
        Ok(Self { shape, values })
    }

    pub fn from_vec(shape: NetworkShape, values: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if values.len() != shape.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                shape.param_count(),
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(shape: NetworkShape, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(shape)?;
        let dims = params.shape.feature_dims();
        for layer in 0..params.shape.feature_layers() {
            let (w, _) = params.shape.feature_layer_ranges(layer);
            glorot_fill(&mut params.values[w], dims[layer], dims[layer + 1], rng);
        }
        let (u, v) = (params.shape.representation, params.shape.classes);
        let range = params.shape.classifier_range();
        glorot_fill(&mut params.values[range], u, v, rng);
        Ok(params)
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Classifier block viewed in place, row-major `classes x representation`.
    pub fn classifier(&self) -> &[T] {
        &self.values[self.shape.classifier_range()]
    }

    /// Copy of the classifier matrix `W` (the layer feeding softmax).
    pub fn penultimate(&self) -> Matrix<T> {
        Matrix::from_vec(
            self.shape.classes,
            self.shape.representation,
            self.classifier().to_vec(),
        )
        .expect("classifier block matches its shape")
    }

    /// `params <- params - lr * gradient`.
    pub fn sgd_step(&mut self, gradient: &[T], lr: T) -> Result<()> {
        if gradient.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "gradient has {} entries, parameters {}",
                gradient.len(),
                self.values.len()
            )));
        }
        if !(lr >= T::zero()) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        for (p, &g) in self.values.iter_mut().zip(gradient) {
            *p -= lr * g;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }
}

fn glorot_fill<T: Scalar, R: Rng + ?Sized>(out: &mut [T], fan_in: usize, fan_out: usize, rng: &mut R) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot bound");
    for w in out {
        *w = T::lit(dist.sample(rng));
    }
}
