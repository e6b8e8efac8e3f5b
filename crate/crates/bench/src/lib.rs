//! Fixtures shared by the kernel benchmarks.

use otml_core::ot::{Marginal, TransportProblem};
use otml_core::pipeline::{gen_phantom_dataset, sample_rng};
use otml_core::tensor::Tensor;
use rand::Rng;

fn simplex(d: usize, rng: &mut impl Rng) -> Marginal {
    let w: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    Marginal::new(w.iter().map(|v| v / s).collect()).expect("positive weights")
}

/// Square problem with costs in `[0, 2]` and random marginals.
pub fn random_problem(d: usize, epsilon: f64, seed: u64) -> TransportProblem {
    let mut rng = sample_rng(seed, &[d as u64]);
    let cost = Tensor::from_fn(&[d, d], |_| rng.gen_range(0.0..2.0));
    let (mu, nu) = (simplex(d, &mut rng), simplex(d, &mut rng));
    TransportProblem::new(cost, mu, nu, epsilon).expect("valid problem")
}

/// `size×size` phantom images.
pub fn phantom_images(n: usize, size: usize, seed: u64) -> Vec<Tensor> {
    gen_phantom_dataset(n, 4, size, size, seed).expect("valid dataset").into_iter().map(|s| s.image).collect()
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = sample_rng(seed, &[shape.len() as u64]);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}
