//! How one SGD step moves the classifier rows, for single- and multi-class
//! batches with strictly positive representations.

use cadis::nn::{backward, forward, Batch, ModelParams, NetworkShape};
use cadis::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random network plus batch whose representations are all strictly positive.
fn positive_fixture(seed: u64, labels: &[usize], classes: usize) -> (ModelParams<f64>, Batch<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let input = rng.random_range(2..=8);
        let hidden: Vec<usize> = (0..rng.random_range(0..=2)).map(|_| rng.random_range(2..=10)).collect();
        let shape = NetworkShape::new(input, hidden, rng.random_range(1..=8), classes).unwrap();
        let params = ModelParams::init(shape, &mut rng).unwrap();
        let x: Vec<f64> = (0..labels.len() * input).map(|_| rng.random()).collect();
        let batch = Batch::new(Matrix::from_vec(labels.len(), input, x).unwrap(), labels.to_vec()).unwrap();
        if forward(&params, &batch)
            .unwrap()
            .representations()
            .as_slice()
            .iter()
            .all(|&r| r > 0.0)
        {
            return (params, batch);
        }
    }
}

fn step(params: &ModelParams<f64>, batch: &Batch<f64>, lr: f64) -> ModelParams<f64> {
    let grad = backward(params, batch, None).unwrap();
    let mut next = params.clone();
    next.sgd_step(&grad, lr).unwrap();
    next
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn single_class_step_raises_only_its_row(seed in any::<u64>(), classes in 2usize..10, lr in 1e-4f64..0.5) {
        let y = (seed % classes as u64) as usize;
        let (params, batch) = positive_fixture(seed, &[y], classes);
        let (before, after) = (params.penultimate(), step(&params, &batch, lr).penultimate());
        for k in 0..classes {
            for (b, a) in before.row(k).iter().zip(after.row(k)) {
                if k == y {
                    prop_assert!(a > b, "row {} (true label) entry fell: {} -> {}", k, b, a);
                } else {
                    prop_assert!(a < b, "row {} entry rose: {} -> {}", k, b, a);
                }
            }
        }
    }

    #[test]
    fn rows_of_absent_classes_fall(seed in any::<u64>(), batch_size in 2usize..8) {
        let classes = 8;
        // Batch drawn from classes {2, 5} only.
        let labels: Vec<usize> = (0..batch_size).map(|i| if (seed >> i) & 1 == 0 { 2 } else { 5 }).collect();
        let (params, batch) = positive_fixture(seed, &labels, classes);
        let (before, after) = (params.penultimate(), step(&params, &batch, 0.1).penultimate());
        for k in (0..classes).filter(|&k| k != 2 && k != 5) {
            for (b, a) in before.row(k).iter().zip(after.row(k)) {
                prop_assert!(a < b);
            }
        }
    }
}

#[test]
fn hidden_only_step_leaves_classifier() {
    let (params, batch) = positive_fixture(3, &[0, 1], 3);
    let mut grad = backward(&params, &batch, None).unwrap();
    let cls = params.shape().classifier_range();
    grad[cls].iter_mut().for_each(|g| *g = 0.0);
    let mut next = params.clone();
    next.sgd_step(&grad, 0.3).unwrap();
    assert_eq!(next.classifier(), params.classifier());
    assert_ne!(next.as_slice(), params.as_slice());
}

#[test]
fn fresh_classifier_is_the_initializer_output() {
    let shape = NetworkShape::new(4, vec![3], 2, 3).unwrap();
    let a = ModelParams::<f64>::init(shape.clone(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = ModelParams::<f64>::init(shape, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a.penultimate(), b.penultimate());
    assert_eq!(a.penultimate().as_slice(), a.classifier());
}
