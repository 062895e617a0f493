//! A convolutional few-shot learner for video object segmentation.
//!
//! The target model is a single linear convolution `x ⊛ τ`; its kernel is
//! fitted per video by minimising a weighted ridge least-squares loss with a
//! few iterations of steepest descent with exact line search. Around that
//! learner this crate provides closed-form oracles (primal and Woodbury
//! dual), reverse-mode differentiation through the unrolled iterations, the
//! inference-time sample memory, mask-to-box estimation, a small
//! end-to-end trainable label generator / weight predictor, and FLOP models
//! with wall-clock sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod error;
pub mod exact;
pub mod instances;
pub mod learner;
pub mod memory;
pub mod par;
pub mod tensor;
pub mod toy;
pub mod tracking;
pub mod unroll;
pub mod verify;

pub use error::{Error, Result};
pub use exact::{matrixize, solve_dual, solve_primal, MatrixizedProblem};
pub use learner::{
    gradient, loss, solve_sd, solve_sd_with, step_length, LearnerProblem, SolveOptions, SolveReport,
    TrainingSample,
};
pub use tensor::{conv2d, conv2d_transpose, FilterWeights, Tensor};
pub use unroll::{backward, solve_sd_traced, LearnerGradients, LearnerTape};
