use thiserror::Error;

/// Errors produced anywhere in the learner stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, got {actual}")]
    Dimension {
        axis: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    Shape { shape: Vec<usize>, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix of {rows}x{cols} ({entries} entries) exceeds the budget of {budget} entries")]
    Capacity {
        rows: usize,
        cols: usize,
        entries: usize,
        budget: usize,
    },

    #[error("numeric failure at iteration {iteration}: {reason}")]
    NonFinite { iteration: usize, reason: String },

    #[error("linear solve failed (condition estimate {condition:.3e}): {reason}")]
    IllConditioned { condition: f64, reason: String },

    #[error("frame index {index} is not greater than the newest stored frame {newest}")]
    FrameOrder { index: usize, newest: usize },

    #[error("empty target: mask has no positive mass")]
    EmptyTarget,

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(axis: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            axis: axis.into(),
            expected,
            actual,
        }
    }

    /// True for errors caused by bad numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::IllConditioned { .. } | Error::Diverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
