//! A desk-scale end-to-end setup around the learner: a label generator and
//! an importance-weight predictor produce the learner's targets from a mask,
//! a 1×1 decoder turns the learner's output into a segmentation, and all
//! three are trained by differentiating through the unrolled solver.

pub mod data;
pub mod modules;
pub mod train;

pub use data::{generate_sequence, ToyFrame, ToySequence};
pub use modules::{MaskConv, ToyModules};
pub use train::{
    evaluate_toy, median, run_inference, sequence_loss, sequence_loss_and_grad, train_toy, ToyConfig, ToyEvaluation,
    ToyMetric, ToyTrainResult, TrackRun,
};

use crate::tensor::Tensor;

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Intersection over union of two binary maps; two empty maps score 1.
pub fn iou(pred: &Tensor, truth: &Tensor) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (p, t) = (p > 0.5, t > 0.5);
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
