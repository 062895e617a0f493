#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fewshot::bench::{self, Axis, ComplexityConfig, Method, Precision};
use fewshot::memory::MemoryState;
use fewshot::tensor::ltt;
use fewshot::toy::{self, ToyConfig, ToyModules};
use fewshot::tracking::{mask_to_box, search_region, BoxEstimate, SearchRegion, SEARCH_SCALE};
use fewshot::verify::{run_suite, Suite};
use fewshot::{matrixize, solve_sd, Error, FilterWeights, LearnerProblem, Tensor, TrainingSample};

const EXIT_VERIFY: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_EMPTY: u8 = 4;

#[derive(Parser)]
#[command(name = "fewshot", version, about = "Convolutional few-shot learner tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a kernel to LTT samples.
    Solve(SolveArgs),
    /// Run the numerical property suites.
    Verify(VerifyArgs),
    /// Time a solver along one dimension.
    Bench(BenchArgs),
    /// Train the toy label generator, weight predictor and decoder.
    ToyTrain(ToyArgs),
    /// Estimate a target box from a mask.
    Track(TrackArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Sd,
    Primal,
    Dual,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Sd => Method::Sd,
            MethodArg::Primal => Method::Primal,
            MethodArg::Dual => Method::Dual,
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    /// `features.ltt,labels.ltt[,weights.ltt]`; repeat once per sample.
    #[arg(long = "sample", required = true)]
    samples: Vec<String>,
    /// Global sample weights, comma separated (default 1 each).
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long, value_enum, default_value = "sd")]
    method: MethodArg,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = fewshot::learner::DEFAULT_LAMBDA)]
    lambda: f64,
    /// Kernel size; taken from `--tau0` when given.
    #[arg(long)]
    kernel_size: Option<usize>,
    /// Initial kernel for steepest descent.
    #[arg(long)]
    tau0: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Report path (default `<out>.report.json`).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Adjoint,
    Oracle,
    Gradcheck,
    Woodbury,
    All,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: SuiteArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    cases: usize,
    /// Write the summary as JSON to this path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

#[derive(Args)]
struct BenchArgs {
    /// One of H, W, K, C, D, M, N_SD.
    #[arg(long)]
    axis: String,
    /// Comma-separated values for the swept axis.
    #[arg(long)]
    values: String,
    #[arg(long, value_enum, default_value = "sd")]
    method: MethodArg,
    #[arg(long, default_value_t = 32)]
    h: usize,
    #[arg(long, default_value_t = 32)]
    w: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    c: usize,
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long, default_value_t = 1)]
    m: usize,
    #[arg(long = "n-sd", default_value_t = 10)]
    n_sd: usize,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, value_enum, default_value = "f64")]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum dense matrix entries a closed-form case may allocate.
    #[arg(long, default_value_t = fewshot::exact::DEFAULT_ENTRY_BUDGET)]
    budget: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = fewshot::learner::DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = 5)]
    n_init: usize,
    #[arg(long, default_value_t = 2)]
    n_update: usize,
    #[arg(long, default_value_t = 4)]
    q: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    h: usize,
    #[arg(long, default_value_t = 16)]
    w: usize,
    #[arg(long, default_value_t = 8)]
    c: usize,
    /// Train the single-channel fixed-label ablation instead.
    #[arg(long)]
    fixed_labels: bool,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    #[arg(long)]
    metrics: PathBuf,
    /// Directory receiving one LTT file per parameter tensor.
    #[arg(long)]
    modules_dir: PathBuf,
}

#[derive(Args)]
struct TrackArgs {
    /// LTT mask, `H×W` or `H×W×1`.
    #[arg(long, required_unless_present = "synthetic_frames")]
    mask: Option<PathBuf>,
    /// Previous box as `w,h` or `x,y,w,h`.
    #[arg(long, default_value = "1,1")]
    prev_box: String,
    /// Image size `W,H`; adds the search region to the output.
    #[arg(long)]
    image_size: Option<String>,
    /// Resampled search-region resolution `W,H`.
    #[arg(long, default_value = "64,64")]
    out_resolution: String,
    /// Run the inference loop on a synthetic video of this many frames.
    #[arg(long)]
    synthetic_frames: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trained modules for the synthetic video (default: untrained).
    #[arg(long)]
    modules_dir: Option<PathBuf>,
    /// Write the final memory state as JSON.
    #[arg(long)]
    memory_out: Option<PathBuf>,
    /// Also write the output JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    version: String,
    parallel: bool,
    seed: Option<u64>,
    inputs: Vec<String>,
    config: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl RunManifest {
    fn new(subcommand: &str, seed: Option<u64>) -> Self {
        RunManifest {
            subcommand: subcommand.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            parallel: fewshot::par::is_parallel(),
            seed,
            inputs: Vec::new(),
            config: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.into(), value.to_string());
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Written next to the first output as `<output>.manifest.json`.
    fn write(&self) -> anyhow::Result<Option<PathBuf>> {
        let Some(first) = self.outputs.first() else {
            return Ok(None);
        };
        let path = PathBuf::from(format!("{first}.manifest.json"));
        write_json(&path, self)?;
        Ok(Some(path))
    }
}

#[derive(Debug)]
struct VerifyFailed(usize);

impl std::fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} suite(s) failed", self.0)
    }
}

impl std::error::Error for VerifyFailed {}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parse_floats(s: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| anyhow!("bad number {v:?}: {e}")))
        .collect()
}

fn parse_usizes(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|e| anyhow!("bad integer {v:?}: {e}")))
        .collect()
}

fn load(path: &Path) -> anyhow::Result<Tensor> {
    ltt::load(path).with_context(|| format!("reading {}", path.display()))
}

fn solve(args: SolveArgs) -> anyhow::Result<()> {
    let mut manifest = RunManifest::new("solve", None);
    let gammas = match &args.gamma {
        Some(g) => parse_floats(g)?,
        None => vec![1.0; args.samples.len()],
    };
    if gammas.len() != args.samples.len() {
        bail!(Error::InvalidArgument(format!(
            "{} gamma values for {} samples",
            gammas.len(),
            args.samples.len()
        )));
    }
    let mut samples = Vec::with_capacity(args.samples.len());
    for (spec, &gamma) in args.samples.iter().zip(&gammas) {
        let parts: Vec<&str> = spec.split(',').collect();
        if !(2..=3).contains(&parts.len()) {
            bail!(Error::InvalidArgument(format!(
                "--sample expects features,labels[,weights], got {spec:?}"
            )));
        }
        let x = load(Path::new(parts[0]))?;
        let e = load(Path::new(parts[1]))?;
        let w = match parts.get(2) {
            Some(p) => load(Path::new(p))?,
            None => Tensor::filled(e.shape(), 1.0),
        };
        manifest.inputs.extend(parts.iter().map(|p| p.to_string()));
        samples.push(TrainingSample::new(x, e, w, gamma)?);
    }
    let tau0 = match &args.tau0 {
        Some(p) => {
            manifest.inputs.push(p.display().to_string());
            Some(FilterWeights::from_tensor(load(p)?)?)
        }
        None => None,
    };
    let k = match (&tau0, args.kernel_size) {
        (Some(t), Some(k)) if t.kernel_size() != k => bail!(Error::InvalidArgument(format!(
            "--kernel-size {k} disagrees with tau0 kernel size {}",
            t.kernel_size()
        ))),
        (Some(t), _) => t.kernel_size(),
        (None, Some(k)) => k,
        (None, None) => 3,
    };
    let problem = LearnerProblem::new(samples, args.lambda, k)?;
    let tau0 = match tau0 {
        Some(t) => {
            problem.check_filter(&t)?;
            t
        }
        None => problem.zero_filter(),
    };
    let method = Method::from(args.method);
    manifest.set("method", method);
    manifest.set("iters", args.iters);
    manifest.set("lambda", args.lambda);
    manifest.set("kernel_size", k);
    manifest.set("gamma", gammas.iter().map(f64::to_string).collect::<Vec<_>>().join(","));

    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.report.json", args.out.display())));
    let tau = match method {
        Method::Sd => {
            let (tau, report) = solve_sd(&problem, &tau0, args.iters)?;
            std::fs::write(&report_path, report.to_json() + "\n")?;
            tau
        }
        Method::Primal | Method::Dual => {
            #[derive(Serialize)]
            struct ClosedFormReport {
                method: Method,
                final_loss: f64,
                normal_residual: f64,
                elapsed_ns: u128,
                flop_estimate: u128,
            }
            let start = Instant::now();
            let mat = matrixize(&problem)?;
            let tau = if method == Method::Primal {
                mat.solve_primal()?
            } else {
                mat.solve_dual()?
            };
            let elapsed_ns = start.elapsed().as_nanos();
            let (h, w, c, d) = problem.samples()[0].dims();
            let cfg = ComplexityConfig::new(h, w, k, c, d, problem.samples().len(), 1, method);
            write_json(
                &report_path,
                &ClosedFormReport {
                    method,
                    final_loss: mat.loss(&tau),
                    normal_residual: mat.normal_residual(&tau).0,
                    elapsed_ns,
                    flop_estimate: bench::flop_estimate(&cfg),
                },
            )?;
            tau
        }
    };
    ltt::save(&args.out, tau.as_tensor())?;
    manifest.output(&args.out);
    manifest.output(&report_path);
    manifest.write()?;
    println!("wrote {} and {}", args.out.display(), report_path.display());
    Ok(())
}

fn verify(args: VerifyArgs) -> anyhow::Result<()> {
    let suites: Vec<Suite> = match args.suite {
        SuiteArg::Adjoint => vec![Suite::Adjoint],
        SuiteArg::Oracle => vec![Suite::Oracle],
        SuiteArg::Gradcheck => vec![Suite::Gradcheck],
        SuiteArg::Woodbury => vec![Suite::Woodbury],
        SuiteArg::All => Suite::ALL.to_vec(),
    };
    let mut reports = Vec::with_capacity(suites.len());
    for suite in suites {
        let r = run_suite(suite, args.seed, args.cases)?;
        println!(
            "{:<10} {}  {}/{} passed  worst {:.3e} (tol {:.0e})",
            suite.name(),
            if r.ok() { "PASS" } else { "FAIL" },
            r.passed,
            r.cases,
            r.worst_error,
            r.tolerance
        );
        for note in &r.notes {
            println!("           {note}");
        }
        reports.push(r);
    }
    if let Some(out) = &args.out {
        write_json(out, &reports)?;
        let mut manifest = RunManifest::new("verify", Some(args.seed));
        manifest.set("cases", args.cases);
        manifest.output(out);
        manifest.write()?;
    }
    let failed = reports.iter().filter(|r| !r.ok()).count();
    if failed > 0 {
        return Err(VerifyFailed(failed).into());
    }
    Ok(())
}

fn run_bench(args: BenchArgs) -> anyhow::Result<()> {
    let axis: Axis = args.axis.parse()?;
    let values = parse_usizes(&args.values)?;
    let mut base = ComplexityConfig::new(args.h, args.w, args.k, args.c, args.d, args.m, args.n_sd, args.method.into());
    base.repetitions = args.repetitions;
    base.warmup = args.warmup;
    base.precision = match args.precision {
        PrecisionArg::F64 => Precision::F64,
        PrecisionArg::F32 => Precision::F32,
    };
    base.validate()?;
    let result = bench::run_sweep_with_budget(&base, axis, &values, args.seed, args.budget)?;
    print!("{}", result.to_csv());
    match result.time_slope {
        Some(s) => println!("time slope along {axis}: {s:.3}"),
        None => println!("time slope along {axis}: n/a"),
    }
    if let Some(s) = result.flop_slope {
        println!("flop slope along {axis}: {s:.3}");
    }
    println!("primal/dual parity: {:.3e}", result.parity_error);
    let mut manifest = RunManifest::new("bench", Some(args.seed));
    manifest.set("axis", axis);
    manifest.set("values", &args.values);
    manifest.set("base", serde_json::to_string(&base)?);
    manifest.set("budget", args.budget);
    if let Some(p) = &args.csv {
        std::fs::write(p, result.to_csv())?;
        manifest.output(p);
    }
    if let Some(p) = &args.json {
        std::fs::write(p, result.to_json() + "\n")?;
        manifest.output(p);
    }
    manifest.write()?;
    Ok(())
}

fn toy_train(args: ToyArgs) -> anyhow::Result<()> {
    let cfg = ToyConfig {
        d: if args.fixed_labels { 1 } else { args.d },
        k: args.k,
        lambda: args.lambda,
        n_init_train: args.n_init,
        n_update_train: args.n_update,
        q: args.q,
        steps: args.steps,
        learning_rate: args.learning_rate,
        seed: args.seed,
        h: args.h,
        w: args.w,
        c: args.c,
        fixed_labels: args.fixed_labels,
        eval_every: args.eval_every,
        ..ToyConfig::default()
    };
    let result = toy::train_toy(&cfg)?;
    std::fs::write(&args.metrics, result.metrics_csv())?;
    let files = result.modules.save_dir(&args.modules_dir)?;
    println!(
        "final test IoU: mean {:.4}, median {:.4}",
        result.final_test.mean, result.final_test.median
    );
    let mut manifest = RunManifest::new("toy-train", Some(args.seed));
    manifest.set("config", serde_json::to_string(&cfg)?);
    manifest.output(&args.metrics);
    for f in &files {
        manifest.output(f);
    }
    manifest.write()?;
    Ok(())
}

fn parse_prev_size(s: &str) -> anyhow::Result<[f64; 2]> {
    let v = parse_floats(s)?;
    match v.as_slice() {
        [w, h] | [_, _, w, h] => Ok([*w, *h]),
        _ => bail!(Error::InvalidArgument(format!(
            "--prev-box expects w,h or x,y,w,h, got {s:?}"
        ))),
    }
}

#[derive(Serialize)]
struct TrackOutput {
    #[serde(flatten)]
    estimate: BoxEstimate,
    #[serde(skip_serializing_if = "Option::is_none")]
    search_region: Option<SearchRegion>,
}

#[derive(Serialize)]
struct FrameTrack {
    frame: usize,
    iou: f64,
    /// `None` when the predicted mask is empty and the previous box is kept.
    estimate: Option<BoxEstimate>,
}

#[derive(Serialize)]
struct VideoTrack {
    frames: Vec<FrameTrack>,
    mean_iou: f64,
    memory: MemoryState,
}

fn track(args: TrackArgs) -> anyhow::Result<()> {
    let prev = parse_prev_size(&args.prev_box)?;
    let mut manifest = RunManifest::new("track", Some(args.seed));
    manifest.set("prev_box", &args.prev_box);
    let text = if let Some(n) = args.synthetic_frames {
        let cfg = ToyConfig { seed: args.seed, ..ToyConfig::default() };
        let modules = match &args.modules_dir {
            Some(dir) => {
                manifest.inputs.push(dir.display().to_string());
                ToyModules::load_dir(dir)?
            }
            None => cfg.init_modules()?,
        };
        let seq = toy::generate_sequence(args.seed, cfg.h, cfg.w, modules.feature_channels(), n)?;
        let cfg = ToyConfig { c: modules.feature_channels(), ..cfg };
        let run = toy::run_inference(&modules, &seq, &cfg)?;
        let mut size = prev;
        let mut frames = Vec::with_capacity(run.iou.len());
        for (i, p) in run.probabilities.iter().enumerate() {
            let estimate = match mask_to_box(p, size) {
                Ok(b) => {
                    size = b.size;
                    Some(b)
                }
                Err(Error::EmptyTarget) => None,
                Err(e) => return Err(e.into()),
            };
            frames.push(FrameTrack {
                frame: i + 1,
                iou: run.iou[i],
                estimate,
            });
        }
        if let Some(p) = &args.memory_out {
            write_json(p, &run.memory)?;
            manifest.output(p);
        }
        manifest.set("synthetic_frames", n);
        serde_json::to_string_pretty(&VideoTrack {
            mean_iou: run.iou.iter().sum::<f64>() / run.iou.len().max(1) as f64,
            frames,
            memory: run.memory,
        })?
    } else {
        let path = args.mask.as_ref().expect("clap enforces --mask");
        manifest.inputs.push(path.display().to_string());
        let mask = load(path)?;
        let estimate = mask_to_box(&mask, prev)?;
        let search_region = match &args.image_size {
            Some(s) => {
                let v = parse_floats(s)?;
                let [iw, ih] = v[..] else {
                    bail!(Error::InvalidArgument(format!("--image-size expects W,H, got {s:?}")));
                };
                let r = parse_usizes(&args.out_resolution)?;
                let [rw, rh] = r[..] else {
                    bail!(Error::InvalidArgument(format!(
                        "--out-resolution expects W,H, got {:?}",
                        args.out_resolution
                    )));
                };
                Some(search_region(&estimate, [iw, ih], SEARCH_SCALE, [rw, rh])?)
            }
            None => None,
        };
        serde_json::to_string_pretty(&TrackOutput {
            estimate,
            search_region,
        })?
    };
    println!("{text}");
    if let Some(out) = &args.out {
        std::fs::write(out, text + "\n")?;
        manifest.output(out);
    }
    manifest.write()?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerifyFailed>().is_some() {
        return EXIT_VERIFY;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::EmptyTarget) => EXIT_EMPTY,
        Some(e) if e.is_numeric() => EXIT_NUMERIC,
        _ => EXIT_INPUT,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(a) => solve(a),
        Command::Verify(a) => verify(a),
        Command::Bench(a) => run_bench(a),
        Command::ToyTrain(a) => toy_train(a),
        Command::Track(a) => track(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
