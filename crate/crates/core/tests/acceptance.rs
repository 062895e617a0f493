//! Acceptance criteria, one PASS/FAIL line each. Runs sequentially in a
//! single process so the wall-clock checks are not disturbed by other tests.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fewshot::bench::{self, flop_estimate, Axis, ComplexityConfig, Method};
use fewshot::memory::{MemoryConfig, SampleMemory};
use fewshot::toy::{self, ToyConfig};
use fewshot::tracking::{mask_to_box, MAX_SCALE_CHANGE, MIN_SCALE_CHANGE};
use fewshot::unroll::{backward, solve_sd_traced};
use fewshot::verify::{self, oracle_spec};
use fewshot::{instances, solve_sd, FilterWeights, LearnerProblem, Tensor, TrainingSample};

const ORACLE_INSTANCES: u64 = 50;
const ORACLE_ITERS: usize = 100;
const ORACLE_GAP: f64 = 1e-6;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const WOODBURY_GAP: f64 = 1e-8;
const LINE_SEARCH_SLACK: f64 = 1e-12;
const SCALAR_TOL: f64 = 1e-12;
const ADJOINT_SHAPES: u64 = 100;
const ADJOINT_TOL: f64 = 1e-10;
const MATRIX_TOL: f64 = 1e-12;
const GRADCHECK_INSTANCES: u64 = 50;
const GRADCHECK_TOL: f64 = 1e-5;
const SCALAR_GRAD_TOL: f64 = 1e-10;
const FLOP_CONFIGS: u64 = 20;
const DOUBLING_RANGE: (f64, f64) = (1.6, 2.6);
const SLOPE_RANGE: (f64, f64) = (0.7, 1.3);
const SWEEP_BUDGET: Duration = Duration::from_secs(300);
const K_MAX: usize = 32;
const GAMMA_SUM_TOL: f64 = 1e-12;
const DECAY_WEIGHTS: [f64; 3] = [0.298893, 0.332103, 0.369004];
const DECAY_TOL: f64 = 1e-6;
const RANDOM_MASKS: u64 = 100;
const TOY_SEEDS: u64 = 5;
const TOY_STEPS: usize = 500;
const TOY_BUDGET: Duration = Duration::from_secs(15 * 60);

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn c1_oracle() -> Outcome {
    let start = Instant::now();
    let spec = oracle_spec();
    let mut worst = 0.0_f64;
    for seed in 0..ORACLE_INSTANCES {
        let c = verify::oracle_case(&spec, seed, ORACLE_ITERS).expect("oracle case");
        worst = worst.max(c.loss_gap);
    }
    let t = start.elapsed();
    Outcome::new(
        worst <= ORACLE_GAP && t <= ORACLE_BUDGET,
        format!("worst |L_SD - L_primal|/(1+L_primal) {worst:.2e} (tol {ORACLE_GAP:e}), {:.1}s", t.as_secs_f64()),
    )
}

fn c2_woodbury() -> Outcome {
    let spec = oracle_spec();
    let worst = (0..ORACLE_INSTANCES)
        .map(|s| verify::woodbury_error(&spec, s).expect("woodbury"))
        .fold(0.0, f64::max);
    Outcome::new(worst <= WOODBURY_GAP, format!("worst coordinate gap {worst:.2e} (tol {WOODBURY_GAP:e})"))
}

fn c3_line_search() -> Outcome {
    let spec = oracle_spec();
    let (mut excess, mut mono) = (0.0_f64, 0.0_f64);
    for seed in 0..ORACLE_INSTANCES {
        let c = verify::oracle_case(&spec, seed, ORACLE_ITERS).expect("oracle case");
        excess = excess.max(c.line_search_excess);
        mono = mono.max(c.monotonicity_excess);
    }
    Outcome::new(
        excess <= LINE_SEARCH_SLACK && mono <= 0.0,
        format!(
            "worst advantage of a perturbed step {excess:.2e} (slack {LINE_SEARCH_SLACK:e}), worst loss increase {mono:.2e}"
        ),
    )
}

fn scalar(x: f64, e: f64, w: f64, lambda: f64) -> LearnerProblem {
    let t = |v: f64| Tensor::new(vec![1, 1, 1], vec![v]).unwrap();
    let s = TrainingSample::new(t(x), t(e), t(w), 1.0).unwrap();
    LearnerProblem::new(vec![s], lambda, 1).unwrap()
}

fn c4_scalar() -> Outcome {
    let mut worst = 0.0_f64;
    for (x, e, w, lambda, expect) in [(2.0, 6.0, 1.0, 0.0, 3.0), (1.0, 1.0, 1.0, 1.0, 0.5)] {
        let p = scalar(x, e, w, lambda);
        let (tau, _) = solve_sd(&p, &p.zero_filter(), 1).unwrap();
        worst = worst.max((tau.data()[0] - expect).abs());
    }
    Outcome::new(worst <= SCALAR_TOL, format!("worst |τ¹ - τ*| {worst:.2e} (tol {SCALAR_TOL:e})"))
}

fn c5_adjoint() -> Outcome {
    let adj = (0..ADJOINT_SHAPES)
        .map(|s| verify::adjoint_error(s).expect("adjoint"))
        .fold(0.0, f64::max);
    let spec = oracle_spec();
    let mat = (0..ORACLE_INSTANCES)
        .map(|s| verify::matrix_conv_error(&instances::random_problem(&spec, s), s).expect("matrix"))
        .fold(0.0, f64::max);
    Outcome::new(
        adj <= ADJOINT_TOL && mat <= MATRIX_TOL,
        format!("adjoint {adj:.2e} (tol {ADJOINT_TOL:e}), X·vec(τ) vs conv {mat:.2e} (tol {MATRIX_TOL:e})"),
    )
}

fn c6_gradients() -> Outcome {
    let spec = verify::gradcheck_spec();
    let mut worst = verify::GradcheckReport {
        features: 0.0,
        labels: 0.0,
        importance: 0.0,
        global_weights: 0.0,
        lambda: 0.0,
        tau0: 0.0,
    };
    for seed in 0..GRADCHECK_INSTANCES {
        let r = verify::gradcheck_instance(&spec, 3, seed).expect("gradcheck");
        worst.features = worst.features.max(r.features);
        worst.labels = worst.labels.max(r.labels);
        worst.importance = worst.importance.max(r.importance);
        worst.global_weights = worst.global_weights.max(r.global_weights);
        worst.lambda = worst.lambda.max(r.lambda);
        worst.tau0 = worst.tau0.max(r.tau0);
    }
    let p = scalar(1.0, 1.0, 1.0, 1.0);
    let (_, tape) = solve_sd_traced(&p, &p.zero_filter(), 1).unwrap();
    let up = FilterWeights::new(1, 1, 1, vec![1.0]).unwrap();
    let dl = backward(&tape, &up).unwrap().lambda;
    let scalar_gap = (dl + 0.25).abs();
    Outcome::new(
        worst.max_rel_error() <= GRADCHECK_TOL && scalar_gap <= SCALAR_GRAD_TOL,
        format!(
            "x {:.1e}, e {:.1e}, w {:.1e}, λ {:.1e}, τ⁰ {:.1e}, γ {:.1e} (tol {GRADCHECK_TOL:e}); dτ¹/dλ = {dl} (gap {scalar_gap:.1e})",
            worst.features, worst.labels, worst.importance, worst.lambda, worst.tau0, worst.global_weights
        ),
    )
}

/// The three operation counts written out independently of the library.
fn flops_by_hand(cfg: &ComplexityConfig) -> u128 {
    let [h, w, k, c, d, m, n] = [cfg.h, cfg.w, cfg.k, cfg.c, cfg.d, cfg.m, cfg.n_sd].map(|v| v as u128);
    match cfg.method {
        Method::Sd => h * w * k.pow(2) * c * d * m * n,
        Method::Primal => d * k.pow(6) * c.pow(3) + d * k.pow(4) * c.pow(2) * h * w * m,
        Method::Dual => d * (h * w * m).pow(3) + d * k.pow(2) * c * (h * w * m).pow(2),
    }
}

fn c7_complexity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..FLOP_CONFIGS {
        let base = ComplexityConfig::new(
            rng.random_range(1..64),
            rng.random_range(1..64),
            2 * rng.random_range(0..4) + 1,
            rng.random_range(1..64),
            rng.random_range(1..16),
            rng.random_range(1..40),
            rng.random_range(1..30),
            Method::Sd,
        );
        for method in [Method::Sd, Method::Primal, Method::Dual] {
            let cfg = ComplexityConfig { method, ..base };
            mismatches += usize::from(flop_estimate(&cfg) != flops_by_hand(&cfg));
        }
    }
    let reference = ComplexityConfig::new(8, 8, 3, 4, 3, 2, 5, Method::Sd);
    mismatches += usize::from(flop_estimate(&reference) != 69_120);

    let base = ComplexityConfig::new(32, 32, 3, 16, 4, 1, 10, Method::Sd);
    let sweep = bench::run_sweep(&base, Axis::M, &[1, 2, 4, 8, 16, 32], 0).expect("sweep");
    let doubling = toy::median(&sweep.time_ratios);
    let slope = sweep.time_slope.unwrap_or(f64::NAN);
    let t = start.elapsed();
    Outcome::new(
        mismatches == 0
            && (DOUBLING_RANGE.0..=DOUBLING_RANGE.1).contains(&doubling)
            && (SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&slope)
            && t <= SWEEP_BUDGET,
        format!(
            "formula mismatches {mismatches}/{}; M-doubling ratios {:?}, median {doubling:.3} (range {:?}); slope {slope:.3} (range {:?}); {:.1}s",
            3 * FLOP_CONFIGS + 1,
            sweep.time_ratios.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            DOUBLING_RANGE,
            SLOPE_RANGE,
            t.as_secs_f64()
        ),
    )
}

fn tiny_sample() -> TrainingSample {
    TrainingSample::unweighted(Tensor::zeros(&[1, 1, 1]), Tensor::zeros(&[1, 1, 1])).unwrap()
}

fn c8_memory() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut max_len, mut first_lost, mut worst_sum) = (0usize, false, 0.0_f64);
    for _ in 0..20 {
        let config = MemoryConfig {
            eta: rng.random_range(0.5..1.0),
            ..MemoryConfig::default()
        };
        let mut memory = SampleMemory::new(config).unwrap();
        let mut frame = 0;
        for _ in 0..100 {
            memory.insert(frame, tiny_sample()).unwrap();
            max_len = max_len.max(memory.len());
            first_lost |= memory.frames()[0] != 0;
            worst_sum = worst_sum.max((memory.current_weights().iter().sum::<f64>() - 1.0).abs());
            frame += rng.random_range(1..4);
        }
    }
    let mut memory = SampleMemory::new(MemoryConfig::default()).unwrap();
    for f in 0..3 {
        memory.insert(f, tiny_sample()).unwrap();
    }
    let w = memory.weights(2);
    let decay = w.iter().zip(DECAY_WEIGHTS).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Outcome::new(
        max_len <= K_MAX && !first_lost && worst_sum <= GAMMA_SUM_TOL && decay <= DECAY_TOL,
        format!(
            "max size {max_len} (K_max {K_MAX}), frame 0 retained {}, worst |Σγ-1| {worst_sum:.1e}, three-frame weights {w:.6?}",
            !first_lost
        ),
    )
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let mut m = Tensor::from_fn(&[h, w], |_| if rng.random_bool(0.3) { rng.random_range(0.0..1.0) } else { 0.0 });
    m.data_mut()[rng.random_range(0..h * w)] = 1.0;
    m
}

fn c9_boxes() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + b.abs());
    let raw = 4.0 * 1.25f64.sqrt();
    let uniform = mask_to_box(&Tensor::filled(&[4, 4], 1.0), [raw, raw]).unwrap();
    let ex1 = uniform.center == [1.5, 1.5] && close(uniform.raw_size[0], raw) && uniform.delta == 1.0;
    let mut px = Tensor::zeros(&[8, 8]);
    px.data_mut()[5 * 8 + 3] = 1.0;
    let single = mask_to_box(&px, [10.0, 10.0]).unwrap();
    let ex2 = single.center == [3.0, 5.0] && single.delta == MIN_SCALE_CHANGE && close(single.size[0], 9.5);
    let grown = mask_to_box(&Tensor::filled(&[4, 4], 1.0), [raw / 2.0, raw / 2.0]).unwrap();
    let ex3 = close(grown.delta_raw, 2.0) && grown.delta == MAX_SCALE_CHANGE && close(grown.size[1], 1.1 * raw / 2.0);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = 0;
    for _ in 0..RANDOM_MASKS {
        let (h, w) = (rng.random_range(2..12), rng.random_range(2..12));
        let (dx, dy) = (rng.random_range(0..6), rng.random_range(0..6));
        let prev = [rng.random_range(0.5..8.0), rng.random_range(0.5..8.0)];
        let m = random_mask(&mut rng, h, w);
        let base = mask_to_box(&m, prev).unwrap();
        let (bh, bw) = (h + dy, w + dx);
        let mut shifted = Tensor::zeros(&[bh, bw]);
        for i in 0..h {
            for j in 0..w {
                shifted.data_mut()[(i + dy) * bw + j + dx] = m.data()[i * w + j];
            }
        }
        let moved = mask_to_box(&shifted, prev).unwrap();
        let scaled = mask_to_box(&m.scale(rng.random_range(0.01..100.0)), prev).unwrap();
        let tol = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());
        let ok = tol(moved.center[0], base.center[0] + dx as f64)
            && tol(moved.center[1], base.center[1] + dy as f64)
            && tol(moved.size[0], base.size[0])
            && tol(moved.size[1], base.size[1])
            && tol(scaled.center[0], base.center[0])
            && tol(scaled.center[1], base.center[1])
            && tol(scaled.raw_size[0], base.raw_size[0])
            && tol(scaled.raw_size[1], base.raw_size[1])
            && (MIN_SCALE_CHANGE..=MAX_SCALE_CHANGE).contains(&base.delta);
        failures += usize::from(!ok);
    }
    Outcome::new(
        ex1 && ex2 && ex3 && failures == 0,
        format!("examples uniform {ex1}, single pixel {ex2}, growth clamp {ex3}; random-mask failures {failures}/{RANDOM_MASKS}"),
    )
}

fn c10_toy() -> Outcome {
    let start = Instant::now();
    let runs: Vec<(f64, f64)> = (0..TOY_SEEDS)
        .map(|seed| {
            let cfg = ToyConfig {
                seed,
                steps: TOY_STEPS,
                ..ToyConfig::default()
            };
            let learned = toy::train_toy(&cfg).expect("learned run").final_test.mean;
            let fixed = toy::train_toy(&cfg.baseline()).expect("baseline run").final_test.mean;
            (learned, fixed)
        })
        .collect();
    let learned = toy::median(&runs.iter().map(|r| r.0).collect::<Vec<_>>());
    let fixed = toy::median(&runs.iter().map(|r| r.1).collect::<Vec<_>>());
    let t = start.elapsed();
    Outcome::new(
        learned > fixed && t <= TOY_BUDGET,
        format!(
            "median test IoU learned D=4 {learned:.4} vs fixed D=1 {fixed:.4}; per seed {:?}; {:.1}s",
            runs.iter()
                .map(|(a, b)| ((a * 1e4).round() / 1e4, (b * 1e4).round() / 1e4))
                .collect::<Vec<_>>(),
            t.as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("oracle convergence", c1_oracle),
        ("primal/dual agreement", c2_woodbury),
        ("line-search exactness", c3_line_search),
        ("one-step scalar fixtures", c4_scalar),
        ("adjoint and matrix form", c5_adjoint),
        ("unrolled gradients", c6_gradients),
        ("operation counts and M scaling", c7_complexity),
        ("sample memory", c8_memory),
        ("mask to box", c9_boxes),
        ("learned labels beat fixed labels", c10_toy),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        failed += usize::from(!o.pass);
        println!("{} {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
