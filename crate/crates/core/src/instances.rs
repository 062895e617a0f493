//! Seeded random problem instances shared by the verification suites,
//! benchmarks and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::learner::{LearnerProblem, TrainingSample};
use crate::tensor::{FilterWeights, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceSpec {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub d: usize,
    pub k: usize,
    pub m: usize,
    pub lambda: f64,
    /// Draw importance weights with random signs.
    pub signed_weights: bool,
    /// Draw per-sample global weights in `[0.5, 1.5]` instead of 1.
    pub random_gamma: bool,
}

impl InstanceSpec {
    pub fn new(h: usize, w: usize, c: usize, d: usize, k: usize, m: usize) -> Self {
        InstanceSpec {
            h,
            w,
            c,
            d,
            k,
            m,
            lambda: 0.1,
            signed_weights: true,
            random_gamma: true,
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

pub fn random_filter(k: usize, c: usize, d: usize, seed: u64) -> FilterWeights {
    let mut r = rng(seed);
    FilterWeights::from_tensor(normal_tensor(&mut r, &[k, k, c, d])).expect("odd k")
}

pub fn random_problem(spec: &InstanceSpec, seed: u64) -> LearnerProblem {
    let mut r = rng(seed);
    let samples = (0..spec.m)
        .map(|_| {
            let x = normal_tensor(&mut r, &[spec.h, spec.w, spec.c]);
            let e = normal_tensor(&mut r, &[spec.h, spec.w, spec.d]);
            let w = Tensor::from_fn(&[spec.h, spec.w, spec.d], |_| {
                let mag = r.random_range(0.5..1.5);
                if spec.signed_weights && r.random_bool(0.3) {
                    -mag
                } else {
                    mag
                }
            });
            let gamma = if spec.random_gamma { r.random_range(0.5..1.5) } else { 1.0 };
            TrainingSample::new(x, e, w, gamma).expect("consistent shapes")
        })
        .collect();
    LearnerProblem::new(samples, spec.lambda, spec.k).expect("valid instance")
}
