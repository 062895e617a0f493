//! The internal few-shot learner: a weighted, ridge-regularised convolutional
//! least-squares loss minimised by steepest descent with exact line search.
//!
//! For samples `(x_t, e_t, w_t, γ_t)` and kernel `τ`:
//!
//! ```text
//! L(τ) = ½ Σ_t γ_t ‖w_t ⊙ (x_t ⊛ τ − e_t)‖² + ½ λ ‖τ‖²
//! g    = Σ_t x_t ⊛ᵀ (γ_t w_t² ⊙ (x_t ⊛ τ − e_t)) + λ τ
//! α    = ‖g‖² / (Σ_t γ_t ‖w_t ⊙ (x_t ⊛ g)‖² + λ ‖g‖²)
//! τ'   = τ − α g
//! ```
//!
//! Importance weights are stored unsquared and may be negative.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bench::flops;
use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_transpose, FilterWeights, Tensor};

pub const DEFAULT_LAMBDA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    features: Tensor,
    labels: Tensor,
    importance: Tensor,
    global_weight: f64,
}

fn as_map(t: Tensor) -> Result<Tensor> {
    let (h, w, c) = t.dims3()?;
    t.reshape(vec![h, w, c])
}

impl TrainingSample {
    /// `features` is `H×W×C`; `labels` and `importance` are `H×W×D`.
    pub fn new(features: Tensor, labels: Tensor, importance: Tensor, global_weight: f64) -> Result<Self> {
        let features = as_map(features)?;
        let labels = as_map(labels)?;
        let importance = as_map(importance)?;
        let (h, w, _) = features.dims3()?;
        let (lh, lw, _) = labels.dims3()?;
        if lh != h {
            return Err(Error::dim("label height (H)", h, lh));
        }
        if lw != w {
            return Err(Error::dim("label width (W)", w, lw));
        }
        labels
            .same_shape(&importance)
            .map_err(|_| Error::Shape {
                shape: importance.shape().to_vec(),
                reason: format!("importance must match labels {:?}", labels.shape()),
            })?;
        if !(global_weight >= 0.0 && global_weight.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "global weight must be finite and nonnegative, got {global_weight}"
            )));
        }
        Ok(TrainingSample {
            features,
            labels,
            importance,
            global_weight,
        })
    }

    /// Sample with unit importance everywhere and unit global weight.
    pub fn unweighted(features: Tensor, labels: Tensor) -> Result<Self> {
        let ones = Tensor::filled(labels.shape(), 1.0);
        Self::new(features, labels, ones, 1.0)
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }
    pub fn labels(&self) -> &Tensor {
        &self.labels
    }
    pub fn importance(&self) -> &Tensor {
        &self.importance
    }
    pub fn global_weight(&self) -> f64 {
        self.global_weight
    }

    pub fn with_global_weight(mut self, gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad global weight {gamma}")));
        }
        self.global_weight = gamma;
        Ok(self)
    }

    /// `(H, W, C, D)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.features.shape();
        (s[0], s[1], s[2], self.labels.shape()[2])
    }

    /// Per-element data weight `γ w²`.
    pub(crate) fn data_weight(&self) -> Tensor {
        let g = self.global_weight;
        self.importance.map(|w| g * w * w)
    }
}

/// One instance of the internal loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerProblem {
    samples: Vec<TrainingSample>,
    lambda: f64,
    kernel_size: usize,
}

impl LearnerProblem {
    /// `lambda ≥ 0` is accepted here; the closed-form solvers require `lambda > 0`.
    pub fn new(samples: Vec<TrainingSample>, lambda: f64, kernel_size: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("problem needs at least one sample".into()));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be finite and ≥ 0, got {lambda}")));
        }
        FilterWeights::zeros(kernel_size, 1, 1)?;
        let (_, _, c, d) = samples[0].dims();
        for (t, s) in samples.iter().enumerate().skip(1) {
            let (_, _, ct, dt) = s.dims();
            if ct != c {
                return Err(Error::dim(format!("sample {t} feature channels (C)"), c, ct));
            }
            if dt != d {
                return Err(Error::dim(format!("sample {t} label channels (D)"), d, dt));
            }
        }
        Ok(LearnerProblem {
            samples,
            lambda,
            kernel_size,
        })
    }

    pub fn samples(&self) -> &[TrainingSample] {
        &self.samples
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }
    pub fn in_channels(&self) -> usize {
        self.samples[0].dims().2
    }
    pub fn out_channels(&self) -> usize {
        self.samples[0].dims().3
    }

    pub fn zero_filter(&self) -> FilterWeights {
        FilterWeights::zeros(self.kernel_size, self.in_channels(), self.out_channels())
            .expect("kernel size validated at construction")
    }

    pub fn check_filter(&self, tau: &FilterWeights) -> Result<()> {
        if tau.kernel_size() != self.kernel_size {
            return Err(Error::dim("kernel size (K)", self.kernel_size, tau.kernel_size()));
        }
        if tau.in_channels() != self.in_channels() {
            return Err(Error::dim("filter input channels (C)", self.in_channels(), tau.in_channels()));
        }
        if tau.out_channels() != self.out_channels() {
            return Err(Error::dim("filter output channels (D)", self.out_channels(), tau.out_channels()));
        }
        Ok(())
    }

    /// Total spatial size `Σ_t H_t W_t`, used by the FLOP model.
    pub(crate) fn pixels(&self) -> u128 {
        self.samples
            .iter()
            .map(|s| {
                let (h, w, _, _) = s.dims();
                (h * w) as u128
            })
            .sum()
    }
}

/// `x_t ⊛ τ − e_t` for every sample.
pub(crate) fn residuals(problem: &LearnerProblem, tau: &FilterWeights) -> Result<Vec<Tensor>> {
    problem.check_filter(tau)?;
    problem
        .samples
        .iter()
        .map(|s| {
            let mut r = conv2d(&s.features, tau)?;
            r.axpy(-1.0, &s.labels)?;
            Ok(r)
        })
        .collect()
}

pub(crate) fn loss_from_residuals(problem: &LearnerProblem, res: &[Tensor], tau: &FilterWeights) -> f64 {
    let data: f64 = problem
        .samples
        .iter()
        .zip(res)
        .map(|(s, r)| {
            let e: f64 = s
                .importance
                .data()
                .iter()
                .zip(r.data())
                .map(|(w, r)| (w * r) * (w * r))
                .sum();
            s.global_weight * e
        })
        .sum();
    0.5 * data + 0.5 * problem.lambda * tau.norm_sq()
}

/// Per-sample `γ w² ⊙ r`.
pub(crate) fn weighted_residuals(problem: &LearnerProblem, res: &[Tensor]) -> Vec<Tensor> {
    problem
        .samples
        .iter()
        .zip(res)
        .map(|(s, r)| {
            let g = s.global_weight;
            s.importance
                .zip_map(r, |w, r| g * w * w * r)
                .expect("residual shaped like labels")
        })
        .collect()
}

pub(crate) fn gradient_from_weighted(
    problem: &LearnerProblem,
    weighted: &[Tensor],
    tau: &FilterWeights,
) -> Result<FilterWeights> {
    let mut g = tau.scale(problem.lambda);
    for (s, z) in problem.samples.iter().zip(weighted) {
        g.axpy(1.0, &conv2d_transpose(z, &s.features, problem.kernel_size)?)?;
    }
    Ok(g)
}

/// Projections `x_t ⊛ g` and the line-search denominator.
pub(crate) fn curvature(problem: &LearnerProblem, g: &FilterWeights, g_norm_sq: f64) -> Result<(Vec<Tensor>, f64)> {
    let mut proj = Vec::with_capacity(problem.samples.len());
    let mut den = 0.0;
    for s in &problem.samples {
        let q = conv2d(&s.features, g)?;
        let e: f64 = s
            .importance
            .data()
            .iter()
            .zip(q.data())
            .map(|(w, q)| (w * q) * (w * q))
            .sum();
        den += s.global_weight * e;
        proj.push(q);
    }
    Ok((proj, den + problem.lambda * g_norm_sq))
}

pub fn loss(problem: &LearnerProblem, tau: &FilterWeights) -> Result<f64> {
    let res = residuals(problem, tau)?;
    Ok(loss_from_residuals(problem, &res, tau))
}

pub fn gradient(problem: &LearnerProblem, tau: &FilterWeights) -> Result<FilterWeights> {
    let res = residuals(problem, tau)?;
    gradient_from_weighted(problem, &weighted_residuals(problem, &res), tau)
}

/// Exact line-search step along `-g`. `None` when `g` is zero, meaning the
/// current point is already stationary.
pub fn step_length(problem: &LearnerProblem, g: &FilterWeights) -> Result<Option<f64>> {
    problem.check_filter(g)?;
    let num = g.norm_sq();
    if num == 0.0 {
        return Ok(None);
    }
    let (_, den) = curvature(problem, g, num)?;
    if !(den > 0.0 && den.is_finite()) {
        return Err(Error::NonFinite {
            iteration: 0,
            reason: format!("line-search denominator {den}"),
        });
    }
    Ok(Some(num / den))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Loss at the iterate the step starts from.
    pub loss: f64,
    pub alpha: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: Vec<IterationRecord>,
    pub iterations_run: usize,
    pub converged: bool,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub elapsed_ns: u128,
    pub flop_estimate: u128,
}

impl SolveReport {
    /// Loss values `L(τ⁰), …, L(τᴺ)`.
    pub fn loss_trace(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.iterations.iter().map(|r| r.loss).collect();
        v.push(self.final_loss);
        v
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub iters: usize,
    /// Stop once `‖g‖ ≤ grad_tol`. Zero only stops on an exactly zero gradient.
    pub grad_tol: f64,
}

impl SolveOptions {
    pub fn iters(iters: usize) -> Self {
        SolveOptions { iters, grad_tol: 0.0 }
    }
}

/// Everything one steepest-descent step computes, kept for the unrolled
/// backward pass.
#[derive(Debug, Clone)]
pub(crate) struct StepRecord {
    pub tau: FilterWeights,
    pub residuals: Vec<Tensor>,
    pub weighted: Vec<Tensor>,
    pub grad: FilterWeights,
    pub projections: Vec<Tensor>,
    pub num: f64,
    pub den: f64,
    pub alpha: f64,
}

pub(crate) fn run_sd(
    problem: &LearnerProblem,
    tau0: &FilterWeights,
    opts: SolveOptions,
    mut tape: Option<&mut Vec<StepRecord>>,
) -> Result<(FilterWeights, SolveReport)> {
    problem.check_filter(tau0)?;
    let start = Instant::now();
    let mut tau = tau0.clone();
    let mut records = Vec::with_capacity(opts.iters);
    let mut converged = false;
    let mut res = residuals(problem, &tau)?;
    let initial_loss = loss_from_residuals(problem, &res, &tau);
    let mut current_loss = initial_loss;

    for it in 0..opts.iters {
        let weighted = weighted_residuals(problem, &res);
        let g = gradient_from_weighted(problem, &weighted, &tau)?;
        let num = g.norm_sq();
        if !num.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                reason: "gradient is not finite".into(),
            });
        }
        if num == 0.0 || num.sqrt() <= opts.grad_tol {
            converged = true;
            break;
        }
        let (proj, den) = curvature(problem, &g, num)?;
        let alpha = num / den;
        if !(den > 0.0) || !alpha.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                reason: format!("step length {num}/{den}"),
            });
        }
        records.push(IterationRecord {
            loss: current_loss,
            alpha,
            grad_norm: num.sqrt(),
        });
        let mut next = tau.clone();
        next.axpy(-alpha, &g)?;
        if let Some(tape) = tape.as_deref_mut() {
            tape.push(StepRecord {
                tau: std::mem::replace(&mut tau, next),
                residuals: res,
                weighted,
                grad: g,
                projections: proj,
                num,
                den,
                alpha,
            });
        } else {
            tau = next;
        }
        res = residuals(problem, &tau)?;
        current_loss = loss_from_residuals(problem, &res, &tau);
        if !current_loss.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                reason: "loss is not finite".into(),
            });
        }
    }

    let (_, _, c, d) = problem.samples[0].dims();
    let report = SolveReport {
        iterations_run: records.len(),
        iterations: records,
        converged,
        initial_loss,
        final_loss: current_loss,
        elapsed_ns: start.elapsed().as_nanos(),
        flop_estimate: 0,
    };
    let k = problem.kernel_size as u128;
    let flop_estimate = flops::sd_product(problem.pixels(), k, c as u128, d as u128, report.iterations_run as u128);
    Ok((tau, SolveReport { flop_estimate, ..report }))
}

/// Run `opts.iters` steepest-descent iterations from `tau0`. Passing the
/// previous solution as `tau0` warm-starts the learner.
pub fn solve_sd_with(
    problem: &LearnerProblem,
    tau0: &FilterWeights,
    opts: SolveOptions,
) -> Result<(FilterWeights, SolveReport)> {
    run_sd(problem, tau0, opts, None)
}

pub fn solve_sd(problem: &LearnerProblem, tau0: &FilterWeights, iters: usize) -> Result<(FilterWeights, SolveReport)> {
    run_sd(problem, tau0, SolveOptions::iters(iters), None)
}
