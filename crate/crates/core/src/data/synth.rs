use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

const LOW: f64 = 0.25;
const HIGH: f64 = 0.75;

/// Fixed class centre. With `dims >= classes` class `c` is raised on every
/// coordinate `k` with `k % classes == c`; otherwise the binary code of `c`
/// is used.
pub(crate) fn center(class: usize, classes: usize, dims: usize) -> Vec<f64> {
    (0..dims)
        .map(|k| {
            let on = if dims >= classes {
                k % classes == class
            } else {
                (class >> k) & 1 == 1
            };
            if on {
                HIGH
            } else {
                LOW
            }
        })
        .collect()
}

/// Isotropic Gaussian blobs around fixed, distinct centres, clamped to
/// `[0, 1]` and shuffled. Deterministic in `seed`.
pub fn synth_blobs<T: Scalar>(
    classes: usize,
    dims: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if classes < 2 || dims == 0 || per_class == 0 {
        return Err(Error::Config(
            "blobs need >= 2 classes, >= 1 dim and >= 1 sample per class".into(),
        ));
    }
    if dims < classes && dims < usize::BITS as usize && (1usize << dims) < classes {
        return Err(Error::Config(format!("{dims} dims cannot separate {classes} centres")));
    }
    if !(spread >= 0.0) {
        return Err(Error::Config("spread must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread).map_err(|e| Error::Config(e.to_string()))?;
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let mu = center(c, classes, dims);
        for _ in 0..per_class {
            let x = mu
                .iter()
                .map(|&m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            rows.push((x, c));
        }
    }
    rows.shuffle(&mut rng);
    let labels = rows.iter().map(|(_, y)| *y).collect();
    let values = rows.into_iter().flat_map(|(x, _)| x).map(T::lit).collect();
    Dataset::new(
        Matrix::from_vec(classes * per_class, dims, values)?,
        labels,
        classes,
        Provenance::Synthetic,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let a: Dataset<f64> = synth_blobs(4, 6, 10, 0.1, 42).unwrap();
        let b: Dataset<f64> = synth_blobs(4, 6, 10, 0.1, 42).unwrap();
        let c: Dataset<f64> = synth_blobs(4, 6, 10, 0.1, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 40);
    }

    #[test]
    fn zero_spread_sits_on_centres() {
        let ds: Dataset<f64> = synth_blobs(3, 5, 4, 0.0, 1).unwrap();
        for i in 0..ds.len() {
            let mu = center(ds.labels()[i], 3, 5);
            assert_eq!(ds.sample(i), &mu[..]);
        }
    }

    #[test]
    fn centres_are_distinct() {
        for (v, d) in [(10, 20), (10, 4), (5, 5), (3, 2)] {
            let cs: Vec<_> = (0..v).map(|c| center(c, v, d)).collect();
            for i in 0..v {
                for j in 0..i {
                    assert_ne!(cs[i], cs[j], "v={v} d={d}");
                }
            }
        }
        assert!(synth_blobs::<f64>(10, 3, 1, 0.1, 0).is_err());
    }
}
