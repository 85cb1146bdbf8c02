//! Data-curation mechanics: pass@k bucketing, RL-set sampling, quality
//! filtering, chart density scores, and resumable provider-backed stages
//! over line-delimited record files.

mod chart;
mod curation;
mod provider;
mod record;
mod stage;

use std::io;

use thiserror::Error;

use crate::rewards::RewardError;

pub use chart::{chart_id, filter_hid, ChartIdScores, ChartRecord, DEFAULT_HID_THRESHOLD};
pub use curation::{
    bucket_samples, pass_at_k, quality_filter, rule_filter, sample_rl_set, BucketOutcome,
    BucketThresholds, FilterConfig, LlmVerdict, QualityVerdict, RejectReason, RlSplit,
    RL_RATIO,
};
pub use provider::{
    HttpProvider, Message, Provider, ProviderError, ProviderRequest, ProviderResponse,
    RetryingProvider, StubProvider, ENV_PROVIDER_KEY, ENV_PROVIDER_MODEL, ENV_PROVIDER_URL,
};
pub use record::{
    read_records, Bucket, JsonlAppender, ReasoningPath, SampleRecord, Split,
};
pub use stage::{calls_path, errors_path, run_stage, CallLogEntry, FailureKind, Prompts, Stage, StageFailure, StageOptions, StageReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("pass@k needs at least one judgement")]
    EmptyJudgements,
    #[error("score `{name}` must be an integer in [1, 5], got {value}")]
    ScoreOutOfRange { name: &'static str, value: i64 },
    #[error("invalid record `{id}`: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bucket {bucket:?} needs {needed} records but only {available} are available")]
    InsufficientRecords {
        bucket: Bucket,
        needed: usize,
        available: usize,
    },
    #[error("no records in any bucket")]
    NoRecords,
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl PipelineError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        PipelineError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
