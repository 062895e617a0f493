//! Seeded property suites: convolution adjointness, SD-vs-closed-form
//! convergence, Woodbury equivalence and unrolled-gradient checks.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::exact::matrixize;
use crate::instances::{normal_tensor, random_filter, random_problem, rng, InstanceSpec};
use crate::learner::{loss, solve_sd, LearnerProblem, TrainingSample};
use crate::tensor::{conv2d, conv2d_transpose, FilterWeights, Tensor};
use crate::unroll::{backward, solve_sd_traced};

pub const ADJOINT_TOL: f64 = 1e-10;
pub const MATRIX_TOL: f64 = 1e-12;
pub const ORACLE_TOL: f64 = 1e-6;
pub const LINE_SEARCH_SLACK: f64 = 1e-12;
pub const WOODBURY_TOL: f64 = 1e-8;
pub const GRADCHECK_TOL: f64 = 1e-5;

/// Step-length multipliers the exact line search must beat.
pub const STEP_PERTURBATIONS: [f64; 4] = [0.5, 0.9, 1.1, 1.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Adjoint,
    Oracle,
    Gradcheck,
    Woodbury,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Adjoint, Suite::Oracle, Suite::Gradcheck, Suite::Woodbury];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Adjoint => "adjoint",
            Suite::Oracle => "oracle",
            Suite::Gradcheck => "gradcheck",
            Suite::Woodbury => "woodbury",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub cases: usize,
    pub passed: usize,
    pub worst_error: f64,
    pub tolerance: f64,
    /// Secondary checks folded into the pass count.
    pub notes: Vec<String>,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.passed == self.cases
    }
}

pub fn run_suite(suite: Suite, seed: u64, cases: usize) -> Result<SuiteReport> {
    match suite {
        Suite::Adjoint => adjoint_suite(seed, cases),
        Suite::Oracle => oracle_suite(seed, cases),
        Suite::Gradcheck => gradcheck_suite(seed, cases),
        Suite::Woodbury => woodbury_suite(seed, cases),
    }
}

/// Scale-aware error of the adjoint identity for one random shape.
pub fn adjoint_error(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let h = r.random_range(1..=9);
    let w = r.random_range(1..=9);
    let c = r.random_range(1..=4);
    let d = r.random_range(1..=4);
    let k = [1, 3, 5][r.random_range(0..3)];
    let x = normal_tensor(&mut r, &[h, w, c]);
    let tau = FilterWeights::from_tensor(normal_tensor(&mut r, &[k, k, c, d]))?;
    let u = normal_tensor(&mut r, &[h, w, d]);
    let lhs = conv2d(&x, &tau)?.dot(&u)?;
    let rhs = tau.dot(&conv2d_transpose(&u, &x, k)?)?;
    Ok((lhs - rhs).abs() / (1.0 + lhs.abs()))
}

fn adjoint_suite(seed: u64, cases: usize) -> Result<SuiteReport> {
    let mut worst = 0.0_f64;
    let mut passed = 0;
    for i in 0..cases {
        let e = adjoint_error(seed.wrapping_add(i as u64))?;
        worst = worst.max(e);
        passed += usize::from(e <= ADJOINT_TOL);
    }
    Ok(SuiteReport {
        suite: Suite::Adjoint,
        cases,
        passed,
        worst_error: worst,
        tolerance: ADJOINT_TOL,
        notes: vec![],
    })
}

/// Max relative gap between `X·vec(τ)` and `conv2d` over a few random kernels.
pub fn matrix_conv_error(problem: &LearnerProblem, seed: u64) -> Result<f64> {
    let m = matrixize(problem)?;
    let mut worst = 0.0_f64;
    for j in 0..3 {
        let tau = random_filter(problem.kernel_size(), problem.in_channels(), problem.out_channels(), seed ^ (0x9e37 + j));
        for (s, got) in problem.samples().iter().zip(m.apply(&tau)) {
            let want = conv2d(s.features(), &tau)?;
            for (a, b) in got.data().iter().zip(want.data()) {
                worst = worst.max((a - b).abs() / (1.0 + b.abs()));
            }
        }
    }
    Ok(worst)
}

/// Diagnostics of one SD run checked against the closed form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCase {
    pub loss_gap: f64,
    /// Worst positive `L(τ−αg) − L(τ−cαg)` normalised by `1 + L(τ)`.
    pub line_search_excess: f64,
    /// Worst loss increase between consecutive iterates beyond `1e-12` relative; zero when monotone.
    pub monotonicity_excess: f64,
    pub matrix_error: f64,
}

impl OracleCase {
    pub fn ok(&self) -> bool {
        self.loss_gap <= ORACLE_TOL
            && self.line_search_excess <= LINE_SEARCH_SLACK
            && self.monotonicity_excess <= 0.0
            && self.matrix_error <= MATRIX_TOL
    }
}

pub fn oracle_spec() -> InstanceSpec {
    let mut s = InstanceSpec::new(8, 8, 4, 3, 3, 2);
    s.lambda = 0.1;
    s
}

pub fn oracle_case(spec: &InstanceSpec, seed: u64, iters: usize) -> Result<OracleCase> {
    let problem = random_problem(spec, seed);
    let (tau, tape) = solve_sd_traced(&problem, &problem.zero_filter(), iters)?;
    let primal = matrixize(&problem)?.solve_primal()?;
    let l_primal = loss(&problem, &primal)?;
    let l_sd = loss(&problem, &tau)?;
    let loss_gap = (l_sd - l_primal).abs() / (1.0 + l_primal);

    let mut line_search_excess = 0.0_f64;
    for (tau_i, alpha) in tape.iterates() {
        let g = crate::learner::gradient(&problem, tau_i)?;
        let at = |scale: f64| -> Result<f64> {
            let mut t = tau_i.clone();
            t.axpy(-scale * alpha, &g)?;
            loss(&problem, &t)
        };
        let base = loss(&problem, tau_i)?;
        let best = at(1.0)?;
        for c in STEP_PERTURBATIONS {
            line_search_excess = line_search_excess.max((best - at(c)?) / (1.0 + base));
        }
    }
    let trace = tape.report().loss_trace();
    let monotonicity_excess = trace
        .windows(2)
        .map(|w| w[1] - w[0] * (1.0 + 1e-12))
        .fold(0.0, f64::max);
    Ok(OracleCase {
        loss_gap,
        line_search_excess,
        monotonicity_excess,
        matrix_error: matrix_conv_error(&problem, seed)?,
    })
}

fn oracle_suite(seed: u64, cases: usize) -> Result<SuiteReport> {
    let spec = oracle_spec();
    let mut worst = 0.0_f64;
    let mut worst_ls = 0.0_f64;
    let mut worst_mat = 0.0_f64;
    let mut passed = 0;
    for i in 0..cases {
        let c = oracle_case(&spec, seed.wrapping_add(i as u64), 100)?;
        worst = worst.max(c.loss_gap);
        worst_ls = worst_ls.max(c.line_search_excess);
        worst_mat = worst_mat.max(c.matrix_error);
        passed += usize::from(c.ok());
    }
    Ok(SuiteReport {
        suite: Suite::Oracle,
        cases,
        passed,
        worst_error: worst,
        tolerance: ORACLE_TOL,
        notes: vec![
            format!("worst line-search excess {worst_ls:.3e} (slack {LINE_SEARCH_SLACK:e})"),
            format!("worst X·vec(τ) vs conv2d {worst_mat:.3e} (tol {MATRIX_TOL:e})"),
        ],
    })
}

pub fn woodbury_error(spec: &InstanceSpec, seed: u64) -> Result<f64> {
    let m = matrixize(&random_problem(spec, seed))?;
    let primal = m.solve_primal()?;
    let dual = m.solve_dual()?;
    Ok(primal
        .data()
        .iter()
        .zip(dual.data())
        .map(|(p, d)| (p - d).abs() / (1.0 + p.abs()))
        .fold(0.0, f64::max))
}

fn woodbury_suite(seed: u64, cases: usize) -> Result<SuiteReport> {
    let spec = oracle_spec();
    let mut worst = 0.0_f64;
    let mut passed = 0;
    for i in 0..cases {
        let e = woodbury_error(&spec, seed.wrapping_add(i as u64))?;
        worst = worst.max(e);
        passed += usize::from(e <= WOODBURY_TOL);
    }
    Ok(SuiteReport {
        suite: Suite::Woodbury,
        cases,
        passed,
        worst_error: worst,
        tolerance: WOODBURY_TOL,
        notes: vec![],
    })
}

/// Relative gap between analytic and central-difference directional
/// derivatives, per input block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub features: f64,
    pub labels: f64,
    pub importance: f64,
    pub global_weights: f64,
    pub lambda: f64,
    pub tau0: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        [self.features, self.labels, self.importance, self.global_weights, self.lambda, self.tau0]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[derive(Clone, Copy)]
enum Block {
    Features,
    Labels,
    Importance,
}

fn perturbed(problem: &LearnerProblem, block: Block, dirs: &[Tensor], h: f64) -> Result<LearnerProblem> {
    let samples = problem
        .samples()
        .iter()
        .zip(dirs)
        .map(|(s, v)| {
            let (mut x, mut e, mut w) = (s.features().clone(), s.labels().clone(), s.importance().clone());
            match block {
                Block::Features => x.axpy(h, v)?,
                Block::Labels => e.axpy(h, v)?,
                Block::Importance => w.axpy(h, v)?,
            }
            TrainingSample::new(x, e, w, s.global_weight())
        })
        .collect::<Result<Vec<_>>>()?;
    LearnerProblem::new(samples, problem.lambda(), problem.kernel_size())
}

fn scaled_step(t: impl Iterator<Item = f64>) -> f64 {
    1e-5 * (1.0 + t.fold(0.0_f64, |m, v| m.max(v.abs())))
}

/// Compare `backward` against central differences of `⟨u, τᴺ⟩` along random
/// directions for every input block.
pub fn gradcheck_instance(spec: &InstanceSpec, iters: usize, seed: u64) -> Result<GradcheckReport> {
    let problem = random_problem(spec, seed);
    let (k, c, d) = (spec.k, spec.c, spec.d);
    let tau0 = random_filter(k, c, d, seed ^ 0xa5a5).scale(0.1);
    let upstream = random_filter(k, c, d, seed ^ 0x5a5a);
    let (_, tape) = solve_sd_traced(&problem, &tau0, iters)?;
    let grads = backward(&tape, &upstream)?;
    let objective = |p: &LearnerProblem, t0: &FilterWeights| -> Result<f64> {
        let (t, _) = solve_sd(p, t0, iters)?;
        upstream.dot(&t)
    };
    let mut r = rng(seed ^ 0x1234);

    let mut block_check = |block: Block, analytic: &[Tensor]| -> Result<f64> {
        let dirs: Vec<Tensor> = analytic.iter().map(|g| normal_tensor(&mut r, g.shape())).collect();
        let h = scaled_step(problem.samples().iter().flat_map(|s| {
            match block {
                Block::Features => s.features(),
                Block::Labels => s.labels(),
                Block::Importance => s.importance(),
            }
            .data()
            .to_vec()
        }));
        let plus = objective(&perturbed(&problem, block, &dirs, h)?, &tau0)?;
        let minus = objective(&perturbed(&problem, block, &dirs, -h)?, &tau0)?;
        let fd = (plus - minus) / (2.0 * h);
        let an: f64 = analytic
            .iter()
            .zip(&dirs)
            .map(|(g, v)| g.dot(v))
            .sum::<Result<f64>>()?;
        Ok(rel_gap(an, fd))
    };
    let features = block_check(Block::Features, &grads.features)?;
    let labels = block_check(Block::Labels, &grads.labels)?;
    let importance = block_check(Block::Importance, &grads.importance)?;

    let gammas: Vec<f64> = problem.samples().iter().map(|s| s.global_weight()).collect();
    let gdir: Vec<f64> = (0..gammas.len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let hg = scaled_step(gammas.iter().copied());
    let with_gamma = |sign: f64| -> Result<LearnerProblem> {
        let samples = problem
            .samples()
            .iter()
            .zip(&gdir)
            .map(|(s, v)| s.clone().with_global_weight(s.global_weight() + sign * hg * v))
            .collect::<Result<Vec<_>>>()?;
        LearnerProblem::new(samples, problem.lambda(), k)
    };
    let fd = (objective(&with_gamma(1.0)?, &tau0)? - objective(&with_gamma(-1.0)?, &tau0)?) / (2.0 * hg);
    let an: f64 = grads.global_weights.iter().zip(&gdir).map(|(g, v)| g * v).sum();
    let global_weights = rel_gap(an, fd);

    let hl = 1e-5 * (1.0 + problem.lambda());
    let with_lambda = |l: f64| LearnerProblem::new(problem.samples().to_vec(), l, k);
    let fd = (objective(&with_lambda(problem.lambda() + hl)?, &tau0)?
        - objective(&with_lambda(problem.lambda() - hl)?, &tau0)?)
        / (2.0 * hl);
    let lambda = rel_gap(grads.lambda, fd);

    let v = random_filter(k, c, d, seed ^ 0x7777);
    let ht = scaled_step(tau0.data().iter().copied());
    let mut tp = tau0.clone();
    tp.axpy(ht, &v)?;
    let mut tm = tau0.clone();
    tm.axpy(-ht, &v)?;
    let fd = (objective(&problem, &tp)? - objective(&problem, &tm)?) / (2.0 * ht);
    let tau0_err = rel_gap(grads.tau0.dot(&v)?, fd);

    Ok(GradcheckReport {
        features,
        labels,
        importance,
        global_weights,
        lambda,
        tau0: tau0_err,
    })
}

pub fn gradcheck_spec() -> InstanceSpec {
    InstanceSpec::new(4, 4, 2, 2, 3, 2)
}

fn gradcheck_suite(seed: u64, cases: usize) -> Result<SuiteReport> {
    let spec = gradcheck_spec();
    let mut worst = 0.0_f64;
    let mut passed = 0;
    for i in 0..cases {
        let e = gradcheck_instance(&spec, 3, seed.wrapping_add(i as u64))?.max_rel_error();
        worst = worst.max(e);
        passed += usize::from(e <= GRADCHECK_TOL);
    }
    Ok(SuiteReport {
        suite: Suite::Gradcheck,
        cases,
        passed,
        worst_error: worst,
        tolerance: GRADCHECK_TOL,
        notes: vec![],
    })
}
