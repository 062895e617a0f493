//! End-to-end training of the toy modules through the unrolled learner.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{DEFAULT_LAMBDA, LearnerProblem, TrainingSample};
use crate::memory::{decay_weights, should_update, MemoryConfig, MemoryState, SampleMemory};
use crate::par::map_range;
use crate::tensor::{conv2d, conv2d_transpose, FilterWeights, Tensor};
use crate::unroll::{backward, solve_sd_traced, LearnerTape};

use super::data::{generate_sequence, ToySequence};
use super::modules::ToyModules;
use super::{iou, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Label channels; ignored when `fixed_labels` is set.
    pub d: usize,
    /// Learner kernel size.
    pub k: usize,
    pub lambda: f64,
    pub n_init_train: usize,
    pub n_update_train: usize,
    /// Frames per training sequence.
    pub q: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Kernel of the label generator and weight predictor.
    pub label_kernel: usize,
    /// Single-channel labels equal to the mask with uniform weights.
    pub fixed_labels: bool,
    /// Evaluate on the held-out set every this many steps (0: final only).
    pub eval_every: usize,
    pub test_sequences: usize,
    pub test_length: usize,
    pub memory: MemoryConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            d: 4,
            k: 3,
            lambda: DEFAULT_LAMBDA,
            n_init_train: 5,
            n_update_train: 2,
            q: 4,
            steps: 500,
            learning_rate: 1e-2,
            momentum: 0.9,
            seed: 0,
            h: 16,
            w: 16,
            c: 8,
            label_kernel: 3,
            fixed_labels: false,
            eval_every: 0,
            test_sequences: 8,
            test_length: 8,
            memory: MemoryConfig::default(),
        }
    }
}

impl ToyConfig {
    /// The single-channel fixed-label ablation of `self`.
    pub fn baseline(&self) -> Self {
        ToyConfig {
            d: 1,
            fixed_labels: true,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q < 2 {
            return Err(Error::InvalidArgument(format!("Q must be at least 2, got {}", self.q)));
        }
        if self.d == 0 {
            return Err(Error::InvalidArgument("D must be positive".into()));
        }
        if self.k.is_multiple_of(2) || self.label_kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument("kernel sizes must be odd".into()));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("learning rate must be >= 0 and momentum in [0, 1)".into()));
        }
        if self.test_length < 2 {
            return Err(Error::InvalidArgument("test sequences need at least 2 frames".into()));
        }
        self.memory.validate()
    }

    pub fn init_modules(&self) -> Result<ToyModules> {
        if self.fixed_labels {
            ToyModules::fixed(self.c, derive_seed(self.seed, 2, 0))
        } else {
            ToyModules::learned(self.d, self.c, self.label_kernel, derive_seed(self.seed, 2, 0))
        }
    }

    pub fn train_sequence(&self, step: usize) -> Result<ToySequence> {
        generate_sequence(derive_seed(self.seed, 0, step as u64), self.h, self.w, self.c, self.q)
    }

    pub fn test_set(&self) -> Result<Vec<ToySequence>> {
        (0..self.test_sequences)
            .map(|i| {
                generate_sequence(derive_seed(self.seed, 1, i as u64), self.h, self.w, self.c, self.test_length)
            })
            .collect()
    }
}

/// Independent seed streams for training data, test data and initialisation.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean binary cross-entropy on logits and its gradient.
fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    logits.same_shape(target)?;
    let n = logits.len() as f64;
    let loss: f64 = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    let grad = logits.zip_map(target, |z, y| (sigmoid(z) - y) / n)?;
    Ok((loss / n, grad))
}

struct Entry {
    frame: usize,
    mask: Tensor,
    pre_labels: Option<Tensor>,
    sample: TrainingSample,
}

fn make_entry(modules: &ToyModules, frame: usize, features: &Tensor, mask: Tensor) -> Result<Entry> {
    let (labels, pre_labels) = modules.labels(&mask)?;
    let importance = modules.importance(&mask)?;
    Ok(Entry {
        frame,
        sample: TrainingSample::new(features.clone(), labels, importance, 1.0)?,
        mask,
        pre_labels,
    })
}

fn entries_problem(entries: &[Entry], current: usize, cfg: &ToyConfig) -> Result<LearnerProblem> {
    let frames: Vec<usize> = entries.iter().map(|e| e.frame).collect();
    let gamma = decay_weights(&frames, current, cfg.memory.eta);
    let samples = entries
        .iter()
        .zip(gamma)
        .map(|(e, g)| e.sample.clone().with_global_weight(g))
        .collect::<Result<Vec<_>>>()?;
    LearnerProblem::new(samples, cfg.lambda, cfg.k)
}

/// Per-sequence loss and its gradient with respect to every module parameter.
///
/// Frame 0 is fitted from a zero kernel with `n_init_train` iterations using
/// the ground-truth mask; every later frame is predicted with the current
/// kernel, then appended with its predicted mask and the kernel is
/// refined with `n_update_train` warm-started iterations.
pub fn sequence_loss_and_grad(
    modules: &ToyModules,
    seq: &ToySequence,
    cfg: &ToyConfig,
) -> Result<(f64, ToyModules)> {
    let frames = &seq.frames;
    let q = frames.len();
    if q < 2 {
        return Err(Error::InvalidArgument("sequence needs at least 2 frames".into()));
    }
    let d = modules.label_channels();
    let mut entries = vec![make_entry(modules, 0, &frames[0].features, frames[0].mask.clone())?];
    let first = entries_problem(&entries, 0, cfg)?;
    let (mut tau, tape) = solve_sd_traced(&first, &first.zero_filter(), cfg.n_init_train)?;
    let mut tapes: Vec<LearnerTape> = vec![tape];
    let mut scores = Vec::with_capacity(q - 1);
    let mut logit_grads = Vec::with_capacity(q - 1);
    let mut total = 0.0;
    for (t, frame) in frames.iter().enumerate().skip(1) {
        let s = conv2d(&frame.features, &tau)?;
        let z = modules.decode(&s, &frame.features)?;
        let (l, gz) = bce_with_logits(&z, &frame.mask)?;
        total += l;
        scores.push(s);
        logit_grads.push(gz.scale(1.0 / (q - 1) as f64));
        if t + 1 < q {
            let pseudo = z.map(sigmoid);
            entries.push(make_entry(modules, t, &frame.features, pseudo)?);
            let problem = entries_problem(&entries, t, cfg)?;
            let (next, tape) = solve_sd_traced(&problem, &tau, cfg.n_update_train)?;
            tau = next;
            tapes.push(tape);
        }
    }
    let loss = total / (q - 1) as f64;

    // Pseudo-masks are differentiated through: the gradient reaching the
    // mask of entry `t - 1` is complete once tape `t - 1` has been undone,
    // which is exactly before frame `t - 1`'s decoder is visited.
    let mut grad = modules.zeros_like();
    let mut tau_bar = FilterWeights::zeros(cfg.k, frames[0].features.shape()[2], d)?;
    let mut mask_bar: Vec<Tensor> = entries.iter().map(|e| Tensor::zeros(e.mask.shape())).collect();
    for t in (1..q).rev() {
        let frame = &frames[t];
        let mut gz = logit_grads[t - 1].clone();
        if t < entries.len() {
            let p = &entries[t].mask;
            gz.axpy(1.0, &mask_bar[t].zip_map(p, |g, p| g * p * (1.0 - p))?)?;
        }
        let gs = modules.decode_backward(&mut grad, &scores[t - 1], &frame.features, &gz);
        tau_bar.axpy(1.0, &conv2d_transpose(&gs, &frame.features, cfg.k)?)?;
        let g = backward(&tapes[t - 1], &tau_bar)?;
        for (i, e) in entries.iter().take(g.labels.len()).enumerate() {
            let m1 = modules.labels_backward(&mut grad, &e.mask, e.pre_labels.as_ref(), &g.labels[i])?;
            let m2 = modules.importance_backward(&mut grad, &e.mask, &g.importance[i])?;
            mask_bar[i].axpy(1.0, &m1)?;
            mask_bar[i].axpy(1.0, &m2)?;
        }
        tau_bar = g.tau0;
    }
    Ok((loss, grad))
}

/// Per-sequence loss only.
pub fn sequence_loss(modules: &ToyModules, seq: &ToySequence, cfg: &ToyConfig) -> Result<f64> {
    sequence_loss_and_grad(modules, seq, cfg).map(|(l, _)| l)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyMetric {
    pub step: usize,
    pub train_loss: f64,
    pub test_iou: Option<f64>,
    pub grad_norm_e: f64,
    pub grad_norm_w: f64,
}

impl ToyMetric {
    pub fn csv_header() -> &'static str {
        "step,train_loss,test_iou,grad_norm_E,grad_norm_W"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step,
            self.train_loss,
            self.test_iou.map(|v| v.to_string()).unwrap_or_default(),
            self.grad_norm_e,
            self.grad_norm_w
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyEvaluation {
    /// Mean IoU over frames `1..` of each sequence.
    pub per_sequence: Vec<f64>,
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone)]
pub struct ToyTrainResult {
    pub modules: ToyModules,
    pub metrics: Vec<ToyMetric>,
    pub final_test: ToyEvaluation,
}

impl ToyTrainResult {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(ToyMetric::csv_header());
        out.push('\n');
        for m in &self.metrics {
            out.push_str(&m.csv_row());
            out.push('\n');
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-frame predictions of the inference loop on one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackRun {
    /// Foreground probabilities for frames `1..`.
    pub probabilities: Vec<Tensor>,
    pub iou: Vec<f64>,
    /// Memory size after each frame.
    pub memory_len: Vec<usize>,
    pub memory: MemoryState,
}

/// Run the inference loop with the sample memory: frame 0 is solved from a
/// zero kernel, later frames are predicted, stored with their predicted mask
/// and the kernel is refined on the memory schedule.
pub fn run_inference(modules: &ToyModules, seq: &ToySequence, cfg: &ToyConfig) -> Result<TrackRun> {
    let mut memory = SampleMemory::new(cfg.memory)?;
    let mut tau = FilterWeights::zeros(cfg.k, cfg.c, modules.label_channels())?;
    let mut probabilities = Vec::new();
    let mut ious = Vec::new();
    let mut memory_len = Vec::new();
    for (t, frame) in seq.frames.iter().enumerate() {
        let mask = if t == 0 {
            frame.mask.clone()
        } else {
            let s = conv2d(&frame.features, &tau)?;
            let p = modules.decode(&s, &frame.features)?.map(sigmoid);
            ious.push(iou(&p.map(|v| f64::from(v > 0.5)), &frame.mask));
            probabilities.push(p.clone());
            p
        };
        let (labels, _) = modules.labels(&mask)?;
        let importance = modules.importance(&mask)?;
        memory.insert(t, TrainingSample::new(frame.features.clone(), labels, importance, 1.0)?)?;
        let plan = should_update(&cfg.memory, t);
        if plan.update {
            let problem = memory.problem(cfg.lambda, cfg.k)?;
            tau = crate::learner::solve_sd(&problem, &tau, plan.iterations)?.0;
        }
        memory_len.push(memory.len());
    }
    Ok(TrackRun {
        probabilities,
        iou: ious,
        memory_len,
        memory: memory.state(),
    })
}

/// IoU statistics of the inference loop over held-out sequences.
pub fn evaluate_toy(modules: &ToyModules, sequences: &[ToySequence], cfg: &ToyConfig) -> Result<ToyEvaluation> {
    let per_sequence = map_range(sequences.len(), |i| {
        run_inference(modules, &sequences[i], cfg).map(|r| r.iou.iter().sum::<f64>() / r.iou.len() as f64)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let mean = per_sequence.iter().sum::<f64>() / per_sequence.len().max(1) as f64;
    Ok(ToyEvaluation {
        median: median(&per_sequence),
        mean,
        per_sequence,
    })
}

/// Momentum gradient descent over freshly generated sequences.
pub fn train_toy(cfg: &ToyConfig) -> Result<ToyTrainResult> {
    cfg.validate()?;
    let mut modules = cfg.init_modules()?;
    let mut velocity = modules.zeros_like();
    let test = cfg.test_set()?;
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let seq = cfg.train_sequence(step)?;
        let (loss, grad) = sequence_loss_and_grad(&modules, &seq, cfg)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("training loss {loss}"),
            });
        }
        velocity.scale_in_place(cfg.momentum);
        velocity.scale_add(1.0, &grad)?;
        modules.scale_add(-cfg.learning_rate, &velocity)?;
        let test_iou = if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            Some(evaluate_toy(&modules, &test, cfg)?.mean)
        } else {
            None
        };
        metrics.push(ToyMetric {
            step,
            train_loss: loss,
            test_iou,
            grad_norm_e: grad.label_generator_norm(),
            grad_norm_w: grad.weight_predictor_norm(),
        });
    }
    let final_test = evaluate_toy(&modules, &test, cfg)?;
    if let Some(last) = metrics.last_mut() {
        last.test_iou = Some(final_test.mean);
    }
    Ok(ToyTrainResult {
        modules,
        metrics,
        final_test,
    })
}
