//! Reverse-mode differentiation through the unrolled steepest-descent
//! learner.
//!
//! The forward pass stores every iterate together with its residuals,
//! gradient, projections and step length; the backward pass walks the tape
//! in reverse applying the adjoint of each update `τ' = τ − α(τ) g(τ)`,
//! including the full dependence of `α` on every input.

use crate::error::{Error, Result};
use crate::learner::{run_sd, LearnerProblem, SolveOptions, SolveReport, StepRecord};
use crate::tensor::{conv2d, conv2d_input_adjoint, conv2d_transpose, FilterWeights, Tensor};

#[derive(Debug, Clone)]
pub struct LearnerTape {
    problem: LearnerProblem,
    tau0: FilterWeights,
    steps: Vec<StepRecord>,
    output: FilterWeights,
    report: SolveReport,
}

impl LearnerTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn problem(&self) -> &LearnerProblem {
        &self.problem
    }

    pub fn output(&self) -> &FilterWeights {
        &self.output
    }

    pub fn report(&self) -> &SolveReport {
        &self.report
    }

    /// Recorded `(τⁱ, αⁱ)` pairs.
    pub fn iterates(&self) -> impl Iterator<Item = (&FilterWeights, f64)> {
        self.steps.iter().map(|s| (&s.tau, s.alpha))
    }

    /// Re-apply the recorded updates from `τ⁰`.
    pub fn replay(&self) -> Result<FilterWeights> {
        let mut tau = self.tau0.clone();
        for s in &self.steps {
            tau.axpy(-s.alpha, &s.grad)?;
        }
        Ok(tau)
    }
}

/// Gradients of `⟨upstream, τᴺ⟩` with respect to every learner input.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerGradients {
    pub features: Vec<Tensor>,
    pub labels: Vec<Tensor>,
    pub importance: Vec<Tensor>,
    pub global_weights: Vec<f64>,
    pub lambda: f64,
    pub tau0: FilterWeights,
}

pub fn solve_sd_traced(
    problem: &LearnerProblem,
    tau0: &FilterWeights,
    iters: usize,
) -> Result<(FilterWeights, LearnerTape)> {
    solve_sd_traced_with(problem, tau0, SolveOptions::iters(iters))
}

pub fn solve_sd_traced_with(
    problem: &LearnerProblem,
    tau0: &FilterWeights,
    opts: SolveOptions,
) -> Result<(FilterWeights, LearnerTape)> {
    let mut steps = Vec::with_capacity(opts.iters);
    let (tau, report) = run_sd(problem, tau0, opts, Some(&mut steps))?;
    let tape = LearnerTape {
        problem: problem.clone(),
        tau0: tau0.clone(),
        steps,
        output: tau.clone(),
        report,
    };
    Ok((tau, tape))
}

pub fn backward(tape: &LearnerTape, upstream: &FilterWeights) -> Result<LearnerGradients> {
    let problem = &tape.problem;
    problem.check_filter(upstream)?;
    let k = problem.kernel_size();
    let lambda = problem.lambda();
    let samples = problem.samples();

    let mut features: Vec<Tensor> = samples.iter().map(|s| Tensor::zeros(s.features().shape())).collect();
    let mut labels: Vec<Tensor> = samples.iter().map(|s| Tensor::zeros(s.labels().shape())).collect();
    let mut importance = labels.clone();
    let mut global_weights = vec![0.0; samples.len()];
    let mut lambda_bar = 0.0;
    let mut tau_bar = upstream.clone();

    for step in tape.steps.iter().rev() {
        let g = &step.grad;
        let alpha = step.alpha;
        let alpha_bar = -tau_bar.dot(g)?;
        let mut g_bar = tau_bar.scale(-alpha);
        // α = num / den
        let num_bar = alpha_bar / step.den;
        let den_bar = -alpha_bar * alpha / step.den;
        g_bar.axpy(2.0 * (num_bar + lambda * den_bar), g)?;
        lambda_bar += den_bar * step.num;

        // den = Σ γ ⟨w², q²⟩ + λ‖g‖²
        for (t, s) in samples.iter().enumerate() {
            let q = &step.projections[t];
            let gamma = s.global_weight();
            let w = s.importance();
            let q_bar = w.zip_map(q, |w, q| 2.0 * den_bar * gamma * w * w * q)?;
            importance[t].axpy(1.0, &w.zip_map(q, |w, q| 2.0 * den_bar * gamma * w * q * q)?)?;
            global_weights[t] += den_bar * w.zip_map(q, |w, q| w * w * q * q)?.data().iter().sum::<f64>();
            g_bar.axpy(1.0, &conv2d_transpose(&q_bar, s.features(), k)?)?;
            features[t].axpy(1.0, &conv2d_input_adjoint(&q_bar, g)?)?;
        }

        // g = Σ x ⊛ᵀ (γ w² r) + λ τ
        lambda_bar += g_bar.dot(&step.tau)?;
        tau_bar.axpy(lambda, &g_bar)?;
        for (t, s) in samples.iter().enumerate() {
            let z = &step.weighted[t];
            let r = &step.residuals[t];
            let gamma = s.global_weight();
            let w = s.importance();
            let z_bar = conv2d(s.features(), &g_bar)?;
            features[t].axpy(1.0, &conv2d_input_adjoint(z, &g_bar)?)?;
            let r_bar = w.zip_map(&z_bar, |w, zb| gamma * w * w * zb)?;
            let wr = w.zip_map(r, |w, r| w * r)?;
            importance[t].axpy(1.0, &wr.zip_map(&z_bar, |wr, zb| 2.0 * gamma * wr * zb)?)?;
            global_weights[t] += w.zip_map(r, |w, r| w * w * r)?.dot(&z_bar)?;
            // r = x ⊛ τ − e
            tau_bar.axpy(1.0, &conv2d_transpose(&r_bar, s.features(), k)?)?;
            features[t].axpy(1.0, &conv2d_input_adjoint(&r_bar, &step.tau)?)?;
            labels[t].axpy(-1.0, &r_bar)?;
        }
        if !tau_bar.is_finite() {
            return Err(Error::NonFinite {
                iteration: 0,
                reason: "backward pass produced non-finite cotangents".into(),
            });
        }
    }

    Ok(LearnerGradients {
        features,
        labels,
        importance,
        global_weights,
        lambda: lambda_bar,
        tau0: tau_bar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{random_filter, random_problem, InstanceSpec};
    use crate::learner::{solve_sd, TrainingSample};

    fn scalar(lambda: f64) -> LearnerProblem {
        let t = |v: f64| Tensor::new(vec![1, 1, 1], vec![v]).unwrap();
        LearnerProblem::new(vec![TrainingSample::new(t(1.0), t(1.0), t(1.0), 1.0).unwrap()], lambda, 1).unwrap()
    }

    #[test]
    fn zero_iterations_pass_upstream_through() {
        let p = random_problem(&InstanceSpec::new(4, 4, 2, 2, 3, 2), 3);
        let tau0 = random_filter(3, 2, 2, 4);
        let (out, tape) = solve_sd_traced(&p, &tau0, 0).unwrap();
        assert!(tape.is_empty());
        assert_eq!(out, tau0);
        let up = random_filter(3, 2, 2, 5);
        let g = backward(&tape, &up).unwrap();
        assert_eq!(g.tau0, up);
        assert_eq!(g.lambda, 0.0);
        assert!(g.features.iter().chain(&g.labels).chain(&g.importance).all(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn scalar_lambda_derivative() {
        let zero = FilterWeights::zeros(1, 1, 1).unwrap();
        for lambda in [0.0, 0.5, 1.0, 3.0] {
            let (tau, _) = solve_sd_traced(&scalar(lambda), &zero, 1).unwrap();
            assert!((tau.data()[0] - 1.0 / (1.0 + lambda)).abs() <= 1e-15);
        }
        let (_, tape) = solve_sd_traced(&scalar(1.0), &zero, 1).unwrap();
        let up = FilterWeights::new(1, 1, 1, vec![1.0]).unwrap();
        let g = backward(&tape, &up).unwrap();
        assert!((g.lambda + 0.25).abs() <= 1e-10, "{}", g.lambda);
    }

    #[test]
    fn traced_matches_untraced_bitwise() {
        let p = random_problem(&InstanceSpec::new(5, 5, 3, 2, 3, 2), 8);
        let tau0 = random_filter(3, 3, 2, 9);
        let (a, _) = solve_sd(&p, &tau0, 7).unwrap();
        let (b, tape) = solve_sd_traced(&p, &tau0, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(tape.replay().unwrap(), b);
    }

    #[test]
    fn zero_upstream_and_linearity() {
        let p = random_problem(&InstanceSpec::new(4, 4, 2, 2, 3, 2), 12);
        let (_, tape) = solve_sd_traced(&p, &p.zero_filter(), 3).unwrap();
        let zero = backward(&tape, &p.zero_filter()).unwrap();
        assert!(zero.tau0.as_tensor().max_abs() == 0.0 && zero.lambda == 0.0);
        assert!(zero.features.iter().all(|t| t.max_abs() == 0.0));

        let u1 = random_filter(3, 2, 2, 13);
        let u2 = random_filter(3, 2, 2, 14);
        let mut comb = u1.scale(2.0);
        comb.axpy(-0.5, &u2).unwrap();
        let g1 = backward(&tape, &u1).unwrap();
        let g2 = backward(&tape, &u2).unwrap();
        let gc = backward(&tape, &comb).unwrap();
        assert!((gc.lambda - (2.0 * g1.lambda - 0.5 * g2.lambda)).abs() <= 1e-12 * (1.0 + gc.lambda.abs()));
        for t in 0..2 {
            let mut want = g1.features[t].scale(2.0);
            want.axpy(-0.5, &g2.features[t]).unwrap();
            for (a, b) in gc.features[t].data().iter().zip(want.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn matches_finite_differences() {
        let spec = InstanceSpec::new(4, 4, 2, 2, 3, 2);
        for seed in 0..3 {
            let r = crate::verify::gradcheck_instance(&spec, 3, seed).unwrap();
            assert!(r.max_rel_error() <= 1e-5, "{r:?}");
        }
    }
}
