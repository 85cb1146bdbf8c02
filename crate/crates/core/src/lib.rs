//! Rewards, group-relative objective and data-curation tooling for
//! focus-anchored chart reasoning.
//!
//! - [`trace`] parses tagged responses into focus traces
//! - [`similarity`] gestalt string similarity and box IoU
//! - [`rewards`] per-response reward breakdown
//! - [`objective`] advantages, adaptive KL and the clipped surrogate
//! - [`toysim`] tabular softmax policy used to check the objective end to end
//! - [`pipeline`] pass@k bucketing, RL-set sampling, quality filters,
//!   chart density scores and provider-backed stages
//! - [`cli`] batch entry points behind the `focusrl` binary

pub mod cli;
pub mod objective;
pub mod pipeline;
pub mod toysim;
pub mod rewards;
pub mod similarity;
pub mod trace;

pub use objective::{
    adaptive_beta, clipped_term, cold_start_loss, focus_grpo_objective, group_advantages, kl_k3,
    ObjectiveConfig, ObjectiveError, Rollout, RolloutGroup,
};
pub use rewards::{score_response, AnswerSpec, AnswerType, RewardBreakdown, RewardConfig};
pub use similarity::{gestalt_ratio, iou};
pub use trace::{classify_format, count_cues, parse_response, BoundingBox, CueCounts, FocusTrace, FormatClass};
