use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::record::{Bucket, SampleRecord};
use super::PipelineError;
use crate::rewards::{score_response, AnswerSpec, RewardBreakdown, RewardConfig};
use crate::trace::FormatClass;

/// Easy : Medium : Hard proportions of the RL set.
pub const RL_RATIO: [(Bucket, u64); 3] = [(Bucket::Easy, 1), (Bucket::Medium, 7), (Bucket::Hard, 2)];

/// Number of correct reasoning paths among the `k` sampled for a question.
pub fn pass_at_k(judgements: &[bool]) -> Result<usize, PipelineError> {
    if judgements.is_empty() {
        return Err(PipelineError::EmptyJudgements);
    }
    Ok(judgements.iter().filter(|&&j| j).count())
}

/// Easy iff `pass_count >= hi`, Hard iff `pass_count <= lo`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketThresholds {
    pub hi: usize,
    pub lo: usize,
}

impl Default for BucketThresholds {
    fn default() -> Self {
        Self { hi: 7, lo: 0 }
    }
}

impl BucketThresholds {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.lo >= self.hi {
            return Err(PipelineError::Config(format!(
                "bucket thresholds need lo < hi, got lo={} hi={}",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn bucket(&self, pass_count: usize) -> Bucket {
        if pass_count >= self.hi {
            Bucket::Easy
        } else if pass_count <= self.lo {
            Bucket::Hard
        } else {
            Bucket::Medium
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BucketOutcome {
    pub records: Vec<SampleRecord>,
    /// Ids of records without a pass count; left out of `records`.
    pub skipped: Vec<String>,
}

pub fn bucket_samples(
    records: Vec<SampleRecord>,
    thresholds: BucketThresholds,
) -> Result<BucketOutcome, PipelineError> {
    thresholds.validate()?;
    let mut out = BucketOutcome::default();
    for mut rec in records {
        match rec.pass_count {
            Some(n) => {
                rec.bucket = Some(thresholds.bucket(n));
                out.records.push(rec);
            }
            None => out.skipped.push(rec.id),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RlSplit {
    pub easy: Vec<String>,
    pub medium: Vec<String>,
    pub hard: Vec<String>,
    /// Easy and Hard records not drawn into the RL set.
    pub cold_start: Vec<String>,
    pub warnings: Vec<String>,
}

impl RlSplit {
    pub fn rl_ids(&self) -> impl Iterator<Item = &String> {
        self.easy.iter().chain(&self.medium).chain(&self.hard)
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.easy.len(), self.medium.len(), self.hard.len()]
    }
}

/// Largest-remainder apportionment of `total` over integer `weights`;
/// remainder ties go to the earlier entry.
fn apportion(total: usize, weights: &[u64]) -> Vec<usize> {
    let sum: u64 = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let total = total as u128;
    let mut quotas: Vec<usize> = weights
        .iter()
        .map(|&w| (total * w as u128 / sum as u128) as usize)
        .collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // remainders compared exactly as integers over the common denominator
    order.sort_by_key(|&i| std::cmp::Reverse(total * weights[i] as u128 % sum as u128));
    let short = total as usize - quotas.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        quotas[i] += 1;
    }
    quotas
}

/// Draws `total_n` ids at Easy:Medium:Hard = 1:7:2. Buckets are passed as
/// id lists; an empty bucket drops out and the ratio is renormalised over
/// the rest. Selection is a seeded shuffle per bucket, so identical inputs
/// and seed give identical output.
pub fn sample_rl_set(
    easy: &[String],
    medium: &[String],
    hard: &[String],
    total_n: usize,
    seed: u64,
) -> Result<RlSplit, PipelineError> {
    let pools = [easy, medium, hard];
    let mut split = RlSplit::default();
    if pools.iter().all(|p| p.is_empty()) {
        return Err(PipelineError::NoRecords);
    }
    let weights: Vec<u64> = RL_RATIO
        .iter()
        .zip(pools)
        .map(|(&(bucket, w), pool)| {
            if pool.is_empty() {
                split
                    .warnings
                    .push(format!("{bucket:?} bucket is empty; ratio renormalised over the others"));
                0
            } else {
                w
            }
        })
        .collect();
    let quotas = apportion(total_n, &weights);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ((&(bucket, _), pool), need) in RL_RATIO.iter().zip(pools).zip(quotas) {
        if need > pool.len() {
            return Err(PipelineError::InsufficientRecords {
                bucket,
                needed: need,
                available: pool.len(),
            });
        }
        let mut ids = pool.to_vec();
        ids.shuffle(&mut rng);
        let rest = ids.split_off(need);
        match bucket {
            Bucket::Easy => split.easy = ids,
            Bucket::Medium => split.medium = ids,
            Bucket::Hard => split.hard = ids,
        }
        if bucket != Bucket::Medium {
            split.cold_start.extend(rest);
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub reward: RewardConfig,
    /// Largest redundancy penalty a kept chain may carry.
    pub max_penalty: f64,
    pub require_correct: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            reward: RewardConfig::default(),
            max_penalty: 0.5,
            require_correct: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.reward.validate()?;
        if !(0.0..=1.0).contains(&self.max_penalty) {
            return Err(PipelineError::Config(format!(
                "max_penalty must lie in [0, 1], got {}",
                self.max_penalty
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// No reconstructed chain to check.
    Missing,
    Format,
    Accuracy,
    Redundancy,
    /// The LLM judge answered "fail".
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmVerdict {
    Pass,
    Fail,
    /// The judge could not be reached or gave no usable answer.
    Unjudged,
    /// Not asked because the rule-based checks already rejected the chain.
    Skipped,
}

impl LlmVerdict {
    /// Reads a judge reply: the first of `pass` / `fail` (also `reject`)
    /// to appear, case-insensitively.
    pub fn from_reply(reply: &str) -> Self {
        let lower = reply.to_lowercase();
        let pos = |w: &str| lower.find(w);
        let pass = pos("pass");
        let fail = [pos("fail"), pos("reject")].into_iter().flatten().min();
        match (pass, fail) {
            (Some(p), Some(f)) if p < f => LlmVerdict::Pass,
            (Some(_), None) => LlmVerdict::Pass,
            (_, Some(_)) => LlmVerdict::Fail,
            (None, None) => LlmVerdict::Unjudged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub kept: bool,
    pub reasons: Vec<RejectReason>,
    pub llm: LlmVerdict,
    pub p_redundancy: Option<f64>,
}

/// Rule-based pass: Focus-CoT format, correct answer (when required) and
/// redundancy at most `max_penalty`. A pure function of its inputs.
pub fn rule_filter(text: &str, spec: &AnswerSpec, cfg: &FilterConfig) -> (Vec<RejectReason>, RewardBreakdown) {
    let b = score_response(text, spec, &cfg.reward);
    let mut reasons = Vec::new();
    if b.format != FormatClass::FocusCot {
        reasons.push(RejectReason::Format);
    }
    if cfg.require_correct && b.r_relaxed_acc < 1.0 {
        reasons.push(RejectReason::Accuracy);
    }
    if b.p_redundancy > cfg.max_penalty {
        reasons.push(RejectReason::Redundancy);
    }
    (reasons, b)
}

/// Rule-based checks followed, for survivors, by the LLM judge. `judge`
/// returns the judge's reply or an error; an error leaves the record
/// unjudged but kept.
pub fn quality_filter<E>(
    text: Option<&str>,
    spec: &AnswerSpec,
    cfg: &FilterConfig,
    judge: impl FnOnce(&str) -> Result<String, E>,
) -> QualityVerdict {
    let Some(text) = text else {
        return QualityVerdict {
            kept: false,
            reasons: vec![RejectReason::Missing],
            llm: LlmVerdict::Skipped,
            p_redundancy: None,
        };
    };
    let (mut reasons, b) = rule_filter(text, spec, cfg);
    let llm = if reasons.is_empty() {
        judge(text).map_or(LlmVerdict::Unjudged, |r| LlmVerdict::from_reply(&r))
    } else {
        LlmVerdict::Skipped
    };
    if llm == LlmVerdict::Fail {
        reasons.push(RejectReason::Llm);
    }
    QualityVerdict {
        kept: reasons.is_empty(),
        reasons,
        llm,
        p_redundancy: Some(b.p_redundancy),
    }
}
