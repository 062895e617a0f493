//! FLOP models and wall-clock sweeps for the three ways of fitting the
//! target model: steepest descent, primal closed form, dual closed form.

pub mod flops;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{matrixize, DEFAULT_ENTRY_BUDGET};
use crate::instances::{random_problem, InstanceSpec};
use crate::learner::{solve_sd, LearnerProblem};
use crate::tensor::{conv2d_raw, conv2d_transpose_raw};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sd,
    Primal,
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    H,
    W,
    K,
    C,
    D,
    M,
    #[serde(rename = "N_SD")]
    NSd,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Sd => "sd",
            Method::Primal => "primal",
            Method::Dual => "dual",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sd" => Ok(Method::Sd),
            "primal" => Ok(Method::Primal),
            "dual" => Ok(Method::Dual),
            _ => Err(Error::InvalidArgument(format!("unknown method {s:?}"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        })
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::H => "H",
            Axis::W => "W",
            Axis::K => "K",
            Axis::C => "C",
            Axis::D => "D",
            Axis::M => "M",
            Axis::NSd => "N_SD",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "H" | "h" => Ok(Axis::H),
            "W" | "w" => Ok(Axis::W),
            "K" | "k" => Ok(Axis::K),
            "C" | "c" => Ok(Axis::C),
            "D" | "d" => Ok(Axis::D),
            "M" | "m" => Ok(Axis::M),
            "N" | "N_SD" | "n" | "n_sd" => Ok(Axis::NSd),
            _ => Err(Error::InvalidArgument(format!("unknown axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityConfig {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub c: usize,
    pub d: usize,
    pub m: usize,
    pub n_sd: usize,
    pub method: Method,
    pub repetitions: usize,
    pub warmup: usize,
    pub precision: Precision,
}

impl ComplexityConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(h: usize, w: usize, k: usize, c: usize, d: usize, m: usize, n_sd: usize, method: Method) -> Self {
        ComplexityConfig {
            h,
            w,
            k,
            c,
            d,
            m,
            n_sd,
            method,
            repetitions: 5,
            warmup: 2,
            precision: Precision::F64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.h, self.w, self.k, self.c, self.d, self.m, self.n_sd];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument("all dimensions must be positive".into()));
        }
        if self.k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("K must be odd, got {}", self.k)));
        }
        if self.repetitions < 3 {
            return Err(Error::InvalidArgument("at least 3 repetitions are required".into()));
        }
        if self.precision == Precision::F32 && self.method != Method::Sd {
            return Err(Error::InvalidArgument("32-bit mode is only available for sd".into()));
        }
        Ok(())
    }

    pub fn with_axis(mut self, axis: Axis, value: usize) -> Self {
        match axis {
            Axis::H => self.h = value,
            Axis::W => self.w = value,
            Axis::K => self.k = value,
            Axis::C => self.c = value,
            Axis::D => self.d = value,
            Axis::M => self.m = value,
            Axis::NSd => self.n_sd = value,
        }
        self
    }

    pub fn axis(&self, axis: Axis) -> usize {
        match axis {
            Axis::H => self.h,
            Axis::W => self.w,
            Axis::K => self.k,
            Axis::C => self.c,
            Axis::D => self.d,
            Axis::M => self.m,
            Axis::NSd => self.n_sd,
        }
    }

    fn instance(&self) -> InstanceSpec {
        let mut s = InstanceSpec::new(self.h, self.w, self.c, self.d, self.k, self.m);
        s.lambda = 0.1;
        s
    }

    /// Dense entries the method has to materialise.
    pub fn matrix_entries(&self) -> u128 {
        let rows = (self.h * self.w * self.m) as u128;
        let cols = (self.k * self.k * self.c) as u128;
        match self.method {
            Method::Sd => 0,
            Method::Primal => rows * cols + cols * cols,
            Method::Dual => rows * cols + rows * rows,
        }
    }
}

/// Unit-constant operation count for the configured method.
pub fn flop_estimate(cfg: &ComplexityConfig) -> u128 {
    let u = |v: usize| v as u128;
    let (h, w, k, c, d, m) = (u(cfg.h), u(cfg.w), u(cfg.k), u(cfg.c), u(cfg.d), u(cfg.m));
    match cfg.method {
        Method::Sd => flops::sd_product(h * w * m, k, c, d, u(cfg.n_sd)),
        Method::Primal => flops::primal(h, w, k, c, d, m),
        Method::Dual => flops::dual(h, w, k, c, d, m),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub config: ComplexityConfig,
    pub time_ns_median: u128,
    pub time_ns_min: u128,
    pub flops: u128,
    /// Set when the case was not run.
    pub skipped: Option<String>,
}

impl BenchRecord {
    pub fn csv_header() -> &'static str {
        "h,w,k,c,d,m,n_sd,method,precision,repetitions,warmup,time_ns_median,time_ns_min,flops,skipped"
    }

    pub fn csv_row(&self) -> String {
        let c = &self.config;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.h,
            c.w,
            c.k,
            c.c,
            c.d,
            c.m,
            c.n_sd,
            c.method,
            c.precision,
            c.repetitions,
            c.warmup,
            self.time_ns_median,
            self.time_ns_min,
            self.flops,
            self.skipped.as_deref().unwrap_or("").replace(',', ";")
        )
    }
}

/// Steepest descent in single precision over raw buffers; mirrors the
/// arithmetic of `learner::solve_sd`.
fn sd_f32(problem: &LearnerProblem, iters: usize) -> Vec<f32> {
    let k = problem.kernel_size();
    let (c, d) = (problem.in_channels(), problem.out_channels());
    let lambda = problem.lambda() as f32;
    let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    struct S {
        dims: (usize, usize, usize),
        x: Vec<f32>,
        e: Vec<f32>,
        s: Vec<f32>,
    }
    let samples: Vec<S> = problem
        .samples()
        .iter()
        .map(|t| {
            let (h, w, _, _) = t.dims();
            S {
                dims: (h, w, c),
                x: to32(t.features().data()),
                e: to32(t.labels().data()),
                s: to32(t.data_weight().data()),
            }
        })
        .collect();
    let n = k * k * c * d;
    let mut tau = vec![0f32; n];
    let mut tmp = vec![0f32; n];
    for _ in 0..iters {
        let mut g: Vec<f32> = tau.iter().map(|t| lambda * t).collect();
        for smp in &samples {
            let (h, w, _) = smp.dims;
            let mut r = vec![0f32; h * w * d];
            conv2d_raw(&smp.x, smp.dims, &tau, k, d, &mut r);
            for ((r, e), s) in r.iter_mut().zip(&smp.e).zip(&smp.s) {
                *r = s * (*r - e);
            }
            conv2d_transpose_raw(&r, &smp.x, smp.dims, k, d, &mut tmp);
            g.iter_mut().zip(&tmp).for_each(|(g, t)| *g += t);
        }
        let num: f32 = g.iter().map(|v| v * v).sum();
        if num == 0.0 {
            break;
        }
        let mut den = lambda * num;
        for smp in &samples {
            let (h, w, _) = smp.dims;
            let mut q = vec![0f32; h * w * d];
            conv2d_raw(&smp.x, smp.dims, &g, k, d, &mut q);
            den += q.iter().zip(&smp.s).map(|(q, s)| s * q * q).sum::<f32>();
        }
        let alpha = num / den;
        tau.iter_mut().zip(&g).for_each(|(t, g)| *t -= alpha * g);
    }
    tau
}

fn run_once(cfg: &ComplexityConfig, problem: &LearnerProblem) -> Result<()> {
    match (cfg.method, cfg.precision) {
        (Method::Sd, Precision::F64) => {
            std::hint::black_box(solve_sd(problem, &problem.zero_filter(), cfg.n_sd)?);
        }
        (Method::Sd, Precision::F32) => {
            std::hint::black_box(sd_f32(problem, cfg.n_sd));
        }
        (Method::Primal, _) => {
            std::hint::black_box(matrixize(problem)?.solve_primal()?);
        }
        (Method::Dual, _) => {
            std::hint::black_box(matrixize(problem)?.solve_dual()?);
        }
    }
    Ok(())
}

/// Time one configuration: `warmup` discarded runs, then `repetitions` timed.
pub fn run_case(cfg: &ComplexityConfig, seed: u64, budget: usize) -> Result<BenchRecord> {
    cfg.validate()?;
    let flops = flop_estimate(cfg);
    if cfg.matrix_entries() > budget as u128 {
        return Ok(BenchRecord {
            config: *cfg,
            time_ns_median: 0,
            time_ns_min: 0,
            flops,
            skipped: Some(format!(
                "needs {} matrix entries, budget {budget}",
                cfg.matrix_entries()
            )),
        });
    }
    let problem = random_problem(&cfg.instance(), seed);
    for _ in 0..cfg.warmup {
        run_once(cfg, &problem)?;
    }
    let mut times = Vec::with_capacity(cfg.repetitions);
    for _ in 0..cfg.repetitions {
        let t = Instant::now();
        run_once(cfg, &problem)?;
        times.push(t.elapsed().as_nanos().max(1));
    }
    times.sort_unstable();
    Ok(BenchRecord {
        config: *cfg,
        time_ns_median: times[times.len() / 2],
        time_ns_min: times[0],
        flops,
        skipped: None,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: Axis,
    pub method: Method,
    pub values: Vec<usize>,
    pub records: Vec<BenchRecord>,
    pub time_slope: Option<f64>,
    pub flop_slope: Option<f64>,
    /// Local slopes of the FLOP model between consecutive points.
    pub flop_point_slopes: Vec<f64>,
    /// `t(v_{i+1}) / t(v_i)` for consecutive timed points.
    pub time_ratios: Vec<f64>,
    /// Max coordinate gap between primal and dual on the probe instance.
    pub parity_error: f64,
}

impl SweepResult {
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            axis: Axis,
            method: Method,
            values: &'a [usize],
            time_slope: Option<f64>,
            flop_slope: Option<f64>,
            flop_point_slopes: &'a [f64],
            time_ratios: &'a [f64],
            parity_error: f64,
            skipped: Vec<(usize, &'a str)>,
        }
        let skipped = self
            .records
            .iter()
            .zip(&self.values)
            .filter_map(|(r, &v)| r.skipped.as_deref().map(|s| (v, s)))
            .collect();
        serde_json::to_string_pretty(&Summary {
            axis: self.axis,
            method: self.method,
            values: &self.values,
            time_slope: self.time_slope,
            flop_slope: self.flop_slope,
            flop_point_slopes: &self.flop_point_slopes,
            time_ratios: &self.time_ratios,
            parity_error: self.parity_error,
            skipped,
        })
        .expect("summary serialises")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(BenchRecord::csv_header());
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Primal/dual agreement on a small instance derived from the base config.
pub fn parity_probe(base: &ComplexityConfig, seed: u64) -> Result<f64> {
    let mut spec = base.instance();
    spec.h = spec.h.min(8);
    spec.w = spec.w.min(8);
    spec.c = spec.c.min(4);
    spec.d = spec.d.min(3);
    spec.m = spec.m.min(2);
    spec.k = spec.k.min(3);
    crate::verify::woodbury_error(&spec, seed)
}

pub fn run_sweep(base: &ComplexityConfig, axis: Axis, values: &[usize], seed: u64) -> Result<SweepResult> {
    run_sweep_with_budget(base, axis, values, seed, DEFAULT_ENTRY_BUDGET)
}

pub fn run_sweep_with_budget(
    base: &ComplexityConfig,
    axis: Axis,
    values: &[usize],
    seed: u64,
    budget: usize,
) -> Result<SweepResult> {
    let mut records = Vec::with_capacity(values.len());
    for &v in values {
        records.push(run_case(&base.with_axis(axis, v), seed, budget)?);
    }
    let timed: Vec<(f64, f64)> = records
        .iter()
        .zip(values)
        .filter(|(r, _)| r.skipped.is_none())
        .map(|(r, &v)| (v as f64, r.time_ns_median as f64))
        .collect();
    let flop_pts: Vec<(f64, f64)> = records
        .iter()
        .zip(values)
        .map(|(r, &v)| (v as f64, r.flops as f64))
        .collect();
    let flop_point_slopes = flop_pts
        .windows(2)
        .filter_map(loglog_slope)
        .collect();
    let time_ratios = timed.windows(2).map(|w| w[1].1 / w[0].1).collect();
    Ok(SweepResult {
        axis,
        method: base.method,
        values: values.to_vec(),
        time_slope: loglog_slope(&timed),
        flop_slope: loglog_slope(&flop_pts),
        flop_point_slopes,
        time_ratios,
        parity_error: parity_probe(base, seed)?,
        records,
    })
}
