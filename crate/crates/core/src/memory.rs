//! Inference-time sample memory: a bounded support set with exponentially
//! decayed per-frame weights, permanent retention of the first frame and a
//! fixed update schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{LearnerProblem, TrainingSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub k_max: usize,
    pub eta: f64,
    pub n_init: usize,
    pub n_update: usize,
    pub update_period: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            k_max: 32,
            eta: 0.9,
            n_init: 20,
            n_update: 3,
            update_period: 1,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::InvalidArgument("k_max must be at least 1".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidArgument(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if self.update_period == 0 {
            return Err(Error::InvalidArgument("update_period must be positive".into()));
        }
        Ok(())
    }
}

/// Whether the target model is refit on a frame, and with how many iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct UpdatePlan {
    pub update: bool,
    pub iterations: usize,
}

/// Frame 0 always runs the initial solve; later frames update every
/// `update_period` frames.
pub fn should_update(config: &MemoryConfig, frame_index: usize) -> UpdatePlan {
    if frame_index == 0 {
        UpdatePlan {
            update: true,
            iterations: config.n_init,
        }
    } else if frame_index.is_multiple_of(config.update_period) {
        UpdatePlan {
            update: true,
            iterations: config.n_update,
        }
    } else {
        UpdatePlan {
            update: false,
            iterations: 0,
        }
    }
}

/// `γ_t ∝ η^(current − t)`, normalised to sum to one.
pub fn decay_weights(frames: &[usize], current_frame: usize, eta: f64) -> Vec<f64> {
    let raw: Vec<f64> = frames
        .iter()
        .map(|&t| eta.powf(current_frame as f64 - t as f64))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

#[derive(Debug, Clone)]
pub struct SampleMemory {
    config: MemoryConfig,
    entries: Vec<(usize, TrainingSample)>,
}

/// Serializable snapshot of the memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryState {
    pub config: MemoryConfig,
    pub frames: Vec<usize>,
    pub gamma: Vec<f64>,
}

impl SampleMemory {
    pub fn new(config: MemoryConfig) -> Result<Self> {
        config.validate()?;
        Ok(SampleMemory {
            config,
            entries: Vec::new(),
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frames(&self) -> Vec<usize> {
        self.entries.iter().map(|(f, _)| *f).collect()
    }

    pub fn newest(&self) -> Option<usize> {
        self.entries.last().map(|(f, _)| *f)
    }

    /// Append a sample; when over capacity the oldest entry other than the
    /// first one is dropped.
    pub fn insert(&mut self, frame_index: usize, sample: TrainingSample) -> Result<()> {
        if let Some(newest) = self.newest() {
            if frame_index <= newest {
                return Err(Error::FrameOrder {
                    index: frame_index,
                    newest,
                });
            }
        }
        self.entries.push((frame_index, sample));
        if self.entries.len() > self.config.k_max {
            self.entries.remove(1);
        }
        Ok(())
    }

    pub fn weights(&self, current_frame: usize) -> Vec<f64> {
        decay_weights(&self.frames(), current_frame, self.config.eta)
    }

    /// Weights relative to the newest stored frame.
    pub fn current_weights(&self) -> Vec<f64> {
        self.weights(self.newest().unwrap_or(0))
    }

    /// The few-shot training problem with decayed global weights applied.
    pub fn problem(&self, lambda: f64, kernel_size: usize) -> Result<LearnerProblem> {
        if self.entries.is_empty() {
            return Err(Error::InvalidArgument("memory is empty".into()));
        }
        let gamma = self.current_weights();
        let samples = self
            .entries
            .iter()
            .zip(gamma)
            .map(|((_, s), g)| s.clone().with_global_weight(g))
            .collect::<Result<Vec<_>>>()?;
        LearnerProblem::new(samples, lambda, kernel_size)
    }

    pub fn state(&self) -> MemoryState {
        MemoryState {
            config: self.config,
            frames: self.frames(),
            gamma: self.current_weights(),
        }
    }
}
