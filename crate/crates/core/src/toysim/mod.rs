//! Desk-scale simulator for the clipped group objective.
//!
//! A tabular softmax policy writes responses over a ~40 symbol vocabulary;
//! the responses are rendered to text and scored by the real parser and
//! reward code. The same objective code drives training, the analytic
//! gradient and the finite-difference check.

mod env;
mod grad;
mod policy;
mod train;

use thiserror::Error;

use crate::objective::ObjectiveError;

pub use env::{chart_policy, token_classes, SyntheticTask, Token, N_KEYS, VOCAB_SIZE};
pub use grad::{
    analytic_gradient, batch_objective, finite_difference_gradient, gradcheck, random_instance,
    relative_error, sample_rollouts, GradcheckConfig, GradcheckReport, GradientOptions,
    SampledGroup, SampledResponse, GRADCHECK_FLOOR, GRADCHECK_STEP, GRADCHECK_TOLERANCE,
};
pub use policy::ToyPolicy;
pub use train::{
    cold_start, derive_seed, prepare, train, IterationRecord, TrainConfig, TrainMetrics,
    TrainOutcome, WindowSummary,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToySimError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("training diverged at iteration {iteration} (last finite iteration: {last_finite:?})")]
    Diverged {
        iteration: usize,
        last_finite: Option<usize>,
    },
}
