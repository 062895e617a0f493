//! Matrix form of the internal loss and its two closed-form minimisers.
//!
//! Per output channel `d` the problem is ordinary weighted ridge regression
//! with the im2col design `P` (`HWM × K²C`), row weights `ω = √γ·w[..,d]`
//! and targets `e[..,d]`:
//!
//! * primal: `τ_d = (Pᵀ Ω² P + λI)⁻¹ Pᵀ Ω² e_d`
//! * dual (Woodbury): `τ_d = Pᵀ Ω (Ω P Pᵀ Ω + λI)⁻¹ Ω e_d`
//!
//! Both systems are SPD for `λ > 0` and are solved by Cholesky.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::learner::LearnerProblem;
use crate::par;
use crate::tensor::{FilterWeights, Tensor};

/// Default cap on the number of dense matrix entries (512 MiB of f64).
pub const DEFAULT_ENTRY_BUDGET: usize = 1 << 26;

/// Systems whose Cholesky-based condition estimate exceeds this are rejected.
pub const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct MatrixizedProblem {
    /// Stacked im2col design, `HWM × K²C`; identical for every output channel.
    design: DMatrix<f64>,
    /// Stacked `√γ_t · w_t`, `HWM × D`.
    weights: DMatrix<f64>,
    /// Stacked labels, `HWM × D`.
    targets: DMatrix<f64>,
    /// Row offset of each sample in the stacked matrices.
    offsets: Vec<usize>,
    shapes: Vec<(usize, usize)>,
    lambda: f64,
    k: usize,
    c: usize,
    d: usize,
}

/// im2col rows for one `H×W×C` map; column `(a·K + b)·C + c` matches the
/// kernel layout with the output channel stripped.
fn im2col_into(x: &Tensor, k: usize, design: &mut DMatrix<f64>, row0: usize) {
    let (h, w, c) = x.dims3().expect("validated sample");
    let p = k / 2;
    let xs = x.data();
    for i in 0..h {
        for j in 0..w {
            let row = row0 + i * w + j;
            for a in 0..k {
                let si = i + a;
                if si < p || si - p >= h {
                    continue;
                }
                for b in 0..k {
                    let sj = j + b;
                    if sj < p || sj - p >= w {
                        continue;
                    }
                    let base = ((si - p) * w + (sj - p)) * c;
                    for ci in 0..c {
                        design[(row, (a * k + b) * c + ci)] = xs[base + ci];
                    }
                }
            }
        }
    }
}

pub fn matrixize(problem: &LearnerProblem) -> Result<MatrixizedProblem> {
    matrixize_with_budget(problem, DEFAULT_ENTRY_BUDGET)
}

pub fn matrixize_with_budget(problem: &LearnerProblem, budget: usize) -> Result<MatrixizedProblem> {
    let k = problem.kernel_size();
    let c = problem.in_channels();
    let d = problem.out_channels();
    let rows: usize = problem
        .samples()
        .iter()
        .map(|s| s.dims().0 * s.dims().1)
        .sum();
    let cols = k * k * c;
    let entries = rows.saturating_mul(cols);
    if entries > budget {
        return Err(Error::Capacity { rows, cols, entries, budget });
    }
    let mut design = DMatrix::zeros(rows, cols);
    let mut weights = DMatrix::zeros(rows, d);
    let mut targets = DMatrix::zeros(rows, d);
    let mut offsets = Vec::new();
    let mut shapes = Vec::new();
    let mut row0 = 0;
    for s in problem.samples() {
        let (h, w, _, _) = s.dims();
        im2col_into(s.features(), k, &mut design, row0);
        let g = s.global_weight().sqrt();
        for pix in 0..h * w {
            for dd in 0..d {
                weights[(row0 + pix, dd)] = g * s.importance().data()[pix * d + dd];
                targets[(row0 + pix, dd)] = s.labels().data()[pix * d + dd];
            }
        }
        offsets.push(row0);
        shapes.push((h, w));
        row0 += h * w;
    }
    Ok(MatrixizedProblem {
        design,
        weights,
        targets,
        offsets,
        shapes,
        lambda: problem.lambda(),
        k,
        c,
        d,
    })
}

/// Result of one SPD solve with its condition estimate.
struct SpdSolve {
    solution: DVector<f64>,
    condition: f64,
}

fn solve_spd(a: DMatrix<f64>, rhs: &DVector<f64>) -> Result<SpdSolve> {
    let chol = a.cholesky().ok_or_else(|| Error::IllConditioned {
        condition: f64::INFINITY,
        reason: "matrix is not positive definite".into(),
    })?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &v| (lo.min(v.abs()), hi.max(v.abs())));
    // (max/min of the Cholesky diagonal)² bounds κ(A) from below
    let condition = (hi / lo).powi(2);
    if !(condition <= CONDITION_LIMIT) {
        return Err(Error::IllConditioned {
            condition,
            reason: format!("estimate exceeds {CONDITION_LIMIT:e}"),
        });
    }
    Ok(SpdSolve {
        solution: chol.solve(rhs),
        condition,
    })
}

impl MatrixizedProblem {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Stacked per-channel design `P` (`HWM × K²C`).
    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn rows(&self) -> usize {
        self.design.nrows()
    }

    /// Output channel `d` of `τ` as a `K²C` vector.
    pub fn channel_of(&self, tau: &FilterWeights, d: usize) -> DVector<f64> {
        DVector::from_iterator(
            self.design.ncols(),
            tau.data().iter().skip(d).step_by(self.d).copied(),
        )
    }

    fn assemble(&self, columns: Vec<DVector<f64>>) -> FilterWeights {
        let n = self.design.ncols();
        let mut data = vec![0.0; n * self.d];
        for (dd, col) in columns.iter().enumerate() {
            for j in 0..n {
                data[j * self.d + dd] = col[j];
            }
        }
        FilterWeights::new(self.k, self.c, self.d, data).expect("shape from problem")
    }

    /// `X · vec(τ)` split back into per-sample `H×W×D` maps.
    pub fn apply(&self, tau: &FilterWeights) -> Vec<Tensor> {
        let cols: Vec<DVector<f64>> = (0..self.d)
            .map(|dd| &self.design * self.channel_of(tau, dd))
            .collect();
        self.offsets
            .iter()
            .zip(&self.shapes)
            .map(|(&row0, &(h, w))| {
                Tensor::from_fn(&[h, w, self.d], |idx| cols[idx % self.d][row0 + idx / self.d])
            })
            .collect()
    }

    /// `½‖W(Xτ − e)‖² + ½λ‖τ‖²`
    pub fn loss(&self, tau: &FilterWeights) -> f64 {
        let mut data = 0.0;
        for dd in 0..self.d {
            let r = &self.design * self.channel_of(tau, dd) - self.targets.column(dd);
            data += r
                .iter()
                .zip(self.weights.column(dd).iter())
                .map(|(r, w)| (w * r) * (w * r))
                .sum::<f64>();
        }
        0.5 * data + 0.5 * self.lambda * tau.norm_sq()
    }

    /// `XᵀW²(Xτ − e) + λτ`, the normal-equation residual.
    pub fn normal_residual(&self, tau: &FilterWeights) -> (f64, f64) {
        let mut res = 0.0;
        let mut rhs = 0.0;
        for dd in 0..self.d {
            let t = self.channel_of(tau, dd);
            let w2 = self.weights.column(dd).map(|w| w * w);
            let r = (&self.design * &t - self.targets.column(dd)).component_mul(&w2);
            let g = self.design.tr_mul(&r) + &t * self.lambda;
            res += g.norm_squared();
            let b = self.design.tr_mul(&self.targets.column(dd).component_mul(&w2));
            rhs += b.norm_squared();
        }
        (res.sqrt(), rhs.sqrt())
    }

    fn weighted_design(&self, dd: usize) -> (DMatrix<f64>, DVector<f64>) {
        let omega = self.weights.column(dd);
        let mut pw = self.design.clone();
        for (r, &o) in omega.iter().enumerate() {
            pw.row_mut(r).scale_mut(o);
        }
        let we = self.targets.column(dd).component_mul(&omega);
        (pw, we)
    }

    fn require_lambda(&self) -> Result<()> {
        if self.lambda > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "closed-form solvers need lambda > 0".into(),
            ))
        }
    }

    pub fn solve_primal(&self) -> Result<FilterWeights> {
        self.require_lambda()?;
        let n = self.design.ncols();
        let cols = par::map_range(self.d, |dd| {
            let (pw, we) = self.weighted_design(dd);
            let a = pw.tr_mul(&pw) + DMatrix::identity(n, n) * self.lambda;
            let b = pw.tr_mul(&we);
            solve_spd(a, &b).map(|s| s.solution)
        });
        Ok(self.assemble(cols.into_iter().collect::<Result<_>>()?))
    }

    pub fn solve_dual(&self) -> Result<FilterWeights> {
        self.solve_dual_with_budget(DEFAULT_ENTRY_BUDGET)
    }

    pub fn solve_dual_with_budget(&self, budget: usize) -> Result<FilterWeights> {
        self.require_lambda()?;
        let m = self.rows();
        let entries = m.saturating_mul(m);
        if entries > budget {
            return Err(Error::Capacity { rows: m, cols: m, entries, budget });
        }
        let cols = par::map_range(self.d, |dd| {
            let (pw, we) = self.weighted_design(dd);
            let gram = &pw * pw.transpose() + DMatrix::identity(m, m) * self.lambda;
            solve_spd(gram, &we).map(|s| pw.tr_mul(&s.solution))
        });
        Ok(self.assemble(cols.into_iter().collect::<Result<_>>()?))
    }

    /// Largest condition estimate over the per-channel primal systems.
    pub fn primal_condition(&self) -> Result<f64> {
        self.require_lambda()?;
        let n = self.design.ncols();
        let mut worst = 0.0_f64;
        for dd in 0..self.d {
            let (pw, we) = self.weighted_design(dd);
            let a = pw.tr_mul(&pw) + DMatrix::identity(n, n) * self.lambda;
            worst = worst.max(solve_spd(a, &pw.tr_mul(&we))?.condition);
        }
        Ok(worst)
    }

    /// Full block matrix `X_t` (`HWD × K²CD`) of one sample, with rows and
    /// columns in tensor layout order.
    pub fn sample_matrix(&self, t: usize) -> DMatrix<f64> {
        let (h, w) = self.shapes[t];
        let row0 = self.offsets[t];
        let n = self.design.ncols();
        let d = self.d;
        let mut x = DMatrix::zeros(h * w * d, n * d);
        for pix in 0..h * w {
            for j in 0..n {
                let v = self.design[(row0 + pix, j)];
                if v != 0.0 {
                    for dd in 0..d {
                        x[(pix * d + dd, j * d + dd)] = v;
                    }
                }
            }
        }
        x
    }

    /// Joint system `(X, diag W, e)` over all samples and channels, rows in
    /// `(t, pixel, d)` order.
    pub fn joint(&self) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let n = self.design.ncols() * self.d;
        let rows = self.rows() * self.d;
        let mut x = DMatrix::zeros(rows, n);
        let mut wdiag = DVector::zeros(rows);
        let mut e = DVector::zeros(rows);
        for t in 0..self.offsets.len() {
            let xt = self.sample_matrix(t);
            let r0 = self.offsets[t] * self.d;
            x.view_mut((r0, 0), (xt.nrows(), n)).copy_from(&xt);
            for r in 0..xt.nrows() {
                let (pix, dd) = (r / self.d, r % self.d);
                wdiag[r0 + r] = self.weights[(self.offsets[t] + pix, dd)];
                e[r0 + r] = self.targets[(self.offsets[t] + pix, dd)];
            }
        }
        (x, wdiag, e)
    }

    pub fn filter_from_vec(&self, v: &DVector<f64>) -> FilterWeights {
        FilterWeights::new(self.k, self.c, self.d, v.iter().copied().collect()).expect("shape from problem")
    }
}

pub fn solve_primal(problem: &LearnerProblem) -> Result<FilterWeights> {
    matrixize(problem)?.solve_primal()
}

pub fn solve_dual(problem: &LearnerProblem) -> Result<FilterWeights> {
    matrixize(problem)?.solve_dual()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{random_problem, InstanceSpec};
    use crate::learner::{gradient, loss, TrainingSample};
    use crate::tensor::conv2d;

    fn scalar(x: f64, e: f64, w: f64, lambda: f64) -> LearnerProblem {
        let t = |v: f64| Tensor::new(vec![1, 1, 1], vec![v]).unwrap();
        LearnerProblem::new(vec![TrainingSample::new(t(x), t(e), t(w), 1.0).unwrap()], lambda, 1).unwrap()
    }

    #[test]
    fn scalar_matrix_and_closed_forms() {
        let m = matrixize(&scalar(2.0, 1.0, 1.0, 1.0)).unwrap();
        assert_eq!(m.design().as_slice(), &[2.0]);
        let p = scalar(1.0, 3.0, 2.0, 1.0);
        assert!((solve_primal(&p).unwrap().data()[0] - 2.4).abs() < 1e-14);
        assert!((solve_dual(&p).unwrap().data()[0] - 2.4).abs() < 1e-14);
    }

    #[test]
    fn zero_features_and_zero_labels() {
        let mut spec = InstanceSpec::new(3, 3, 2, 2, 3, 1);
        spec.lambda = 0.3;
        let p = random_problem(&spec, 4);
        let zeroed: Vec<_> = p
            .samples()
            .iter()
            .map(|s| {
                TrainingSample::new(
                    Tensor::zeros(s.features().shape()),
                    s.labels().clone(),
                    s.importance().clone(),
                    1.0,
                )
                .unwrap()
            })
            .collect();
        let zp = LearnerProblem::new(zeroed, 0.3, 3).unwrap();
        assert!(matrixize(&zp).unwrap().design().iter().all(|&v| v == 0.0));

        let no_labels: Vec<_> = p
            .samples()
            .iter()
            .map(|s| {
                TrainingSample::new(
                    s.features().clone(),
                    Tensor::zeros(s.labels().shape()),
                    s.importance().clone(),
                    1.0,
                )
                .unwrap()
            })
            .collect();
        let np = LearnerProblem::new(no_labels, 0.3, 3).unwrap();
        assert!(solve_primal(&np).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(solve_dual(&np).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matrix_product_matches_conv() {
        let spec = InstanceSpec::new(3, 3, 2, 2, 3, 2);
        let p = random_problem(&spec, 5);
        let m = matrixize(&p).unwrap();
        for seed in 0..20 {
            let tau = crate::instances::random_filter(3, 2, 2, 100 + seed);
            let mapped = m.apply(&tau);
            for (s, got) in p.samples().iter().zip(&mapped) {
                let want = conv2d(s.features(), &tau).unwrap();
                for (a, b) in got.data().iter().zip(want.data()) {
                    assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
                }
            }
            // block matrix form of one sample in tensor layout
            let x0 = m.sample_matrix(0);
            let v = DVector::from_column_slice(tau.data());
            let prod = &x0 * v;
            let want = conv2d(p.samples()[0].features(), &tau).unwrap();
            for (a, b) in prod.iter().zip(want.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
            let l = loss(&p, &tau).unwrap();
            assert!((m.loss(&tau) - l).abs() <= 1e-12 * (1.0 + l));
        }
    }

    #[test]
    fn per_channel_equals_joint_system() {
        let spec = InstanceSpec::new(4, 4, 2, 2, 3, 2);
        let p = random_problem(&spec, 9);
        let m = matrixize(&p).unwrap();
        let (x, wd, e) = m.joint();
        let w2 = wd.map(|w| w * w);
        let mut xw = x.clone();
        for (r, &v) in w2.iter().enumerate() {
            xw.row_mut(r).scale_mut(v);
        }
        let n = x.ncols();
        let a = x.tr_mul(&xw) + DMatrix::identity(n, n) * p.lambda();
        let b = x.tr_mul(&e.component_mul(&w2));
        let joint = a.cholesky().unwrap().solve(&b);
        let primal = m.solve_primal().unwrap();
        for (a, b) in joint.iter().zip(primal.data()) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn primal_is_stationary_and_local_minimum() {
        let spec = InstanceSpec::new(6, 6, 3, 2, 3, 2);
        let p = random_problem(&spec, 11);
        let m = matrixize(&p).unwrap();
        let tau = m.solve_primal().unwrap();
        let (res, rhs) = m.normal_residual(&tau);
        assert!(res <= 1e-8 * (1.0 + rhs));
        let g = gradient(&p, &tau).unwrap();
        assert!(g.norm_sq().sqrt() <= 1e-8 * (1.0 + rhs));
        let best = loss(&p, &tau).unwrap();
        for seed in 0..100 {
            let mut probe = tau.clone();
            probe.axpy(1e-3, &crate::instances::random_filter(3, 3, 2, 500 + seed)).unwrap();
            assert!(loss(&p, &probe).unwrap() >= best);
        }
    }

    #[test]
    fn dual_agrees_with_primal() {
        for seed in 0..10 {
            let spec = InstanceSpec::new(5, 4, 3, 2, 3, 2);
            let p = random_problem(&spec, seed);
            let a = solve_primal(&p).unwrap();
            let b = solve_dual(&p).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() / (1.0 + x.abs()) <= 1e-8);
            }
        }
    }

    #[test]
    fn capacity_and_lambda_guards() {
        let p = random_problem(&InstanceSpec::new(4, 4, 2, 1, 3, 1), 1);
        assert!(matches!(matrixize_with_budget(&p, 10), Err(Error::Capacity { entries: 288, .. })));
        let m = matrixize(&p).unwrap();
        assert!(matches!(m.solve_dual_with_budget(100), Err(Error::Capacity { .. })));
        let z = scalar(1.0, 1.0, 1.0, 0.0);
        assert!(solve_primal(&z).is_err());
    }

    #[test]
    fn ill_conditioned_system_is_reported() {
        // 2×2 design with nearly collinear columns and tiny ridge
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 1.0, 1.0, 1.0 + 1e-9]).unwrap();
        let e = Tensor::new(vec![1, 2, 1], vec![1.0, 2.0]).unwrap();
        let s = TrainingSample::unweighted(x, e).unwrap();
        let p = LearnerProblem::new(vec![s], 1e-14, 1).unwrap();
        assert!(matches!(solve_primal(&p), Err(Error::IllConditioned { .. })));
    }
}
