//! Group-relative advantages, the cue-adaptive KL coefficient and the
//! clipped surrogate objective, plus the supervised cold-start loss.
//!
//! For a group of `G` responses with sequence log-probabilities under the
//! current, sampling and reference policies:
//!
//! ```text
//! A_i   = (R_i - mean R) / max(std R, std_floor)          (population std)
//! rho_i = exp(logp_theta_i - logp_old_i)
//! beta_i = beta / (1 + ln(1 + n_info_i))
//! k3_i  = exp(d_i) - d_i - 1,   d_i = logp_ref_i - logp_theta_i
//! J     = mean_i min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i) - mean_i beta_i k3_i
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::CueCounts;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("degenerate group: need at least 2 rewards, got {0}")]
    DegenerateGroup(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("response {index}: log-prob sequences are not aligned ({theta} / {old} / {reference} tokens)")]
    Misaligned {
        index: usize,
        theta: usize,
        old: usize,
        reference: usize,
    },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("invalid objective config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Base KL coefficient.
    pub beta: f64,
    /// Clip radius of the probability ratio.
    pub epsilon: f64,
    /// Lower bound on the reward standard deviation.
    pub std_floor: f64,
    /// Shrink the KL coefficient with the number of focused cues. When
    /// false every response uses `beta` as is.
    pub adaptive_kl: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            beta: 1e-2,
            epsilon: 0.2,
            std_floor: 1e-8,
            adaptive_kl: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(ObjectiveError::InvalidConfig(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.std_floor >= 0.0 && self.std_floor.is_finite()) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "std_floor must be >= 0, got {}",
                self.std_floor
            )));
        }
        Ok(())
    }

    /// KL coefficient applied to a response with the given cues.
    pub fn beta_for(&self, cues: &CueCounts) -> f64 {
        if self.adaptive_kl {
            adaptive_beta(self.beta, cues.n_info)
        } else {
            self.beta
        }
    }
}

/// One sampled response with its reward and per-token log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub reward: f64,
    pub logp_theta: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub cues: CueCounts,
}

impl Rollout {
    pub fn seq_logp_theta(&self) -> f64 {
        self.logp_theta.iter().sum()
    }

    pub fn seq_logp_old(&self) -> f64 {
        self.logp_old.iter().sum()
    }

    pub fn seq_logp_ref(&self) -> f64 {
        self.logp_ref.iter().sum()
    }

    /// `pi_theta(o) / pi_old(o)` at sequence level.
    pub fn ratio(&self) -> f64 {
        (self.seq_logp_theta() - self.seq_logp_old()).exp()
    }

    /// `log pi_ref(o) - log pi_theta(o)` at sequence level.
    pub fn ref_logratio(&self) -> f64 {
        self.seq_logp_ref() - self.seq_logp_theta()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub question_id: String,
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.rollouts.len() < 2 {
            return Err(ObjectiveError::DegenerateGroup(self.rollouts.len()));
        }
        for (index, r) in self.rollouts.iter().enumerate() {
            let (theta, old, reference) = (r.logp_theta.len(), r.logp_old.len(), r.logp_ref.len());
            if theta != old || theta != reference {
                return Err(ObjectiveError::Misaligned {
                    index,
                    theta,
                    old,
                    reference,
                });
            }
            if !r.reward.is_finite() {
                return Err(ObjectiveError::NonFinite("reward"));
            }
            let all_finite = r
                .logp_theta
                .iter()
                .chain(&r.logp_old)
                .chain(&r.logp_ref)
                .all(|v| v.is_finite());
            if !all_finite {
                return Err(ObjectiveError::NonFinite("log-probabilities"));
            }
        }
        Ok(())
    }
}

pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>, ObjectiveError> {
    if rewards.len() < 2 {
        return Err(ObjectiveError::DegenerateGroup(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(ObjectiveError::NonFinite("rewards"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt().max(std_floor);
    if denom == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// `beta / (1 + ln(1 + n_info))`.
pub fn adaptive_beta(beta: f64, n_info: f64) -> f64 {
    beta / (1.0 + n_info.ln_1p())
}

/// Non-negative KL estimate `r - ln r - 1` written in terms of `ln r`.
pub fn kl_k3(logratio: f64) -> Result<f64, ObjectiveError> {
    if !logratio.is_finite() {
        return Err(ObjectiveError::NonFinite("log-ratio"));
    }
    Ok(logratio.exp_m1() - logratio)
}

pub fn clipped_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Per-response pieces of the objective, kept around for diagnostics and
/// for the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveTerms {
    pub advantages: Vec<f64>,
    pub ratios: Vec<f64>,
    pub betas: Vec<f64>,
    pub kl: Vec<f64>,
    pub policy_term: f64,
    pub kl_term: f64,
    pub value: f64,
}

pub fn objective_terms(group: &RolloutGroup, cfg: &ObjectiveConfig) -> Result<ObjectiveTerms, ObjectiveError> {
    group.validate()?;
    let advantages = group_advantages(&group.rewards(), cfg.std_floor)?;
    let g = group.rollouts.len() as f64;
    let mut ratios = Vec::with_capacity(group.rollouts.len());
    let mut betas = Vec::with_capacity(group.rollouts.len());
    let mut kl = Vec::with_capacity(group.rollouts.len());
    let mut policy_sum = 0.0;
    let mut kl_sum = 0.0;
    for (r, &adv) in group.rollouts.iter().zip(&advantages) {
        let ratio = r.ratio();
        let beta = cfg.beta_for(&r.cues);
        let k3 = kl_k3(r.ref_logratio())?;
        policy_sum += clipped_term(ratio, adv, cfg.epsilon);
        kl_sum += beta * k3;
        ratios.push(ratio);
        betas.push(beta);
        kl.push(k3);
    }
    let policy_term = policy_sum / g;
    let kl_term = kl_sum / g;
    let value = policy_term - kl_term;
    if !value.is_finite() {
        return Err(ObjectiveError::NonFinite("objective"));
    }
    Ok(ObjectiveTerms {
        advantages,
        ratios,
        betas,
        kl,
        policy_term,
        kl_term,
        value,
    })
}

pub fn focus_grpo_objective(group: &RolloutGroup, cfg: &ObjectiveConfig) -> Result<f64, ObjectiveError> {
    objective_terms(group, cfg).map(|t| t.value)
}

/// Negative log-likelihood of one target sequence.
pub fn cold_start_loss(token_logprobs: &[f64]) -> Result<f64, ObjectiveError> {
    if token_logprobs.is_empty() {
        return Err(ObjectiveError::EmptySequence);
    }
    if token_logprobs.iter().any(|v| !v.is_finite()) {
        return Err(ObjectiveError::NonFinite("log-probabilities"));
    }
    Ok(-token_logprobs.iter().sum::<f64>())
}

/// Mean of [`cold_start_loss`] over a batch of sequences.
pub fn cold_start_loss_batch<S: AsRef<[f64]>>(batch: &[S]) -> Result<f64, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptySequence);
    }
    let mut total = 0.0;
    for seq in batch {
        total += cold_start_loss(seq.as_ref())?;
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[1.0, 1.0, 0.0, 0.0], 1e-8).unwrap(), vec![1.0, 1.0, -1.0, -1.0]);
        assert_eq!(group_advantages(&[0.3; 4], 1e-8).unwrap(), vec![0.0; 4]);
        assert_eq!(group_advantages(&[0.3; 4], 0.0).unwrap(), vec![0.0; 4]);
        let a = group_advantages(&[1.2, 0.1667], 1e-8).unwrap();
        assert_close(a[0], 1.0, 1e-12);
        assert_close(a[1], -1.0, 1e-12);
        assert_eq!(group_advantages(&[1.0], 1e-8), Err(ObjectiveError::DegenerateGroup(1)));
        assert_eq!(group_advantages(&[], 1e-8), Err(ObjectiveError::DegenerateGroup(0)));
    }

    #[test]
    fn adaptive_beta_examples() {
        assert_eq!(adaptive_beta(0.01, 0.0), 0.01);
        assert_close(adaptive_beta(0.01, 3.0), 0.01 / (1.0 + 4f64.ln()), 1e-18);
        assert_close(adaptive_beta(0.01, 3.0), 0.004_190_597_841_964_052, 1e-15);
        let mut prev = adaptive_beta(0.01, 0.0);
        for n in 1..200 {
            let b = adaptive_beta(0.01, n as f64 * 0.5);
            assert!(b < prev);
            prev = b;
        }
        assert!(adaptive_beta(0.01, 1e300) < 1e-4);
    }

    #[test]
    fn k3_examples() {
        assert_eq!(kl_k3(0.0).unwrap(), 0.0);
        assert_close(kl_k3(2f64.ln()).unwrap(), 1.0 - 2f64.ln(), 1e-15);
        assert_close(kl_k3(0.5f64.ln()).unwrap(), 2f64.ln() - 0.5, 1e-15);
        assert!(kl_k3(f64::NAN).is_err());
        assert!(kl_k3(f64::INFINITY).is_err());
        for x in [-30.0, -1.0, -1e-9, 1e-9, 0.3, 5.0] {
            assert!(kl_k3(x).unwrap() > 0.0, "{x}");
        }
    }

    #[test]
    fn clipped_term_examples() {
        assert_eq!(clipped_term(1.0, 2.0, 0.2), 2.0);
        assert_close(clipped_term(1.5, 1.0, 0.2), 1.2, 1e-15);
        // below 1 - eps with a negative advantage the clipped branch is the
        // smaller one
        assert_close(clipped_term(0.5, -1.0, 0.2), -0.8, 1e-15);
        assert_close(clipped_term(0.5, 1.0, 0.2), 0.5, 1e-15);
        assert_close(clipped_term(1.5, -1.0, 0.2), -1.5, 1e-15);
    }

    fn rollout(reward: f64, theta: &[f64], old: &[f64], reference: &[f64], cues: CueCounts) -> Rollout {
        Rollout {
            reward,
            logp_theta: theta.to_vec(),
            logp_old: old.to_vec(),
            logp_ref: reference.to_vec(),
            cues,
        }
    }

    #[test]
    fn on_policy_objective_is_zero() {
        let lp = [-0.5, -1.0];
        let group = RolloutGroup {
            question_id: "q".into(),
            rollouts: vec![
                rollout(1.0, &lp, &lp, &lp, CueCounts::new(0, 0)),
                rollout(0.0, &lp, &lp, &lp, CueCounts::new(2, 1)),
            ],
        };
        assert_eq!(focus_grpo_objective(&group, &ObjectiveConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn equal_rewards_leave_only_kl() {
        let group = RolloutGroup {
            question_id: "q".into(),
            rollouts: vec![
                rollout(0.5, &[-0.2, -0.3], &[-0.25, -0.3], &[-0.4, -0.1], CueCounts::new(1, 1)),
                rollout(0.5, &[-1.0, -0.1], &[-1.0, -0.2], &[-0.6, -0.6], CueCounts::new(0, 0)),
            ],
        };
        let cfg = ObjectiveConfig::default();
        let t = objective_terms(&group, &cfg).unwrap();
        assert_eq!(t.policy_term, 0.0);
        assert!(t.kl_term > 0.0);
        assert_eq!(t.value, -t.kl_term);
    }

    // Every quantity evaluated by hand from the formula with plain f64
    // arithmetic, written out term by term.
    #[test]
    fn hand_evaluated_two_token_group() {
        let group = RolloutGroup {
            question_id: "q".into(),
            rollouts: vec![
                rollout(1.2, &[-0.1, -0.4], &[-0.3, -0.5], &[-0.2, -0.2], CueCounts::new(2, 2)),
                rollout(0.1, &[-1.2, -0.7], &[-1.0, -0.6], &[-1.5, -0.9], CueCounts::new(1, 0)),
                rollout(0.6, &[-2.0, -0.05], &[-1.1, -0.05], &[-2.0, -0.05], CueCounts::new(0, 0)),
            ],
        };
        let cfg = ObjectiveConfig::default();
        let mean = (1.2 + 0.1 + 0.6) / 3.0;
        let std = (((1.2f64 - mean).powi(2) + (0.1f64 - mean).powi(2) + (0.6f64 - mean).powi(2)) / 3.0).sqrt();
        let adv = [(1.2 - mean) / std, (0.1 - mean) / std, (0.6 - mean) / std];
        // ratios: exp(-0.5 + 0.8) = e^0.3 (clipped at 1.2 for A>0),
        // exp(-1.9 + 1.6) = e^-0.3 (A<0 so unclipped is smaller), exp(-2.05 + 1.15) = e^-0.9
        let p1 = (0.3f64.exp() * adv[0]).min(1.2 * adv[0]);
        let p2 = ((-0.3f64).exp() * adv[1]).min(0.8 * adv[1]);
        let p3 = ((-0.9f64).exp() * adv[2]).min(0.8 * adv[2]);
        let k = |d: f64| d.exp() - d - 1.0;
        let kl = 0.01 / (1.0 + 3f64.ln()) * k(-0.4 - -0.5)
            + 0.01 / (1.0 + 1.5f64.ln()) * k(-2.4 - -1.9)
            + 0.01 * k(0.0);
        let expected = (p1 + p2 + p3) / 3.0 - kl / 3.0;
        let got = focus_grpo_objective(&group, &cfg).unwrap();
        assert_close(got, expected, 1e-12);
    }

    #[test]
    fn fixed_kl_ignores_cues() {
        let cfg = ObjectiveConfig { adaptive_kl: false, ..Default::default() };
        assert_eq!(cfg.beta_for(&CueCounts::new(10, 10)), cfg.beta);
        let cfg = ObjectiveConfig::default();
        assert!(cfg.beta_for(&CueCounts::new(1, 0)) < cfg.beta);
    }

    #[test]
    fn group_validation_errors() {
        let cfg = ObjectiveConfig::default();
        let single = RolloutGroup {
            question_id: "q".into(),
            rollouts: vec![rollout(1.0, &[-1.0], &[-1.0], &[-1.0], CueCounts::new(0, 0))],
        };
        assert_eq!(focus_grpo_objective(&single, &cfg), Err(ObjectiveError::DegenerateGroup(1)));
        let misaligned = RolloutGroup {
            question_id: "q".into(),
            rollouts: vec![
                rollout(1.0, &[-1.0], &[-1.0, -2.0], &[-1.0], CueCounts::new(0, 0)),
                rollout(0.0, &[-1.0], &[-1.0], &[-1.0], CueCounts::new(0, 0)),
            ],
        };
        assert!(matches!(
            focus_grpo_objective(&misaligned, &cfg),
            Err(ObjectiveError::Misaligned { index: 0, .. })
        ));
    }

    #[test]
    fn cold_start_examples() {
        assert_eq!(cold_start_loss(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_close(cold_start_loss(&[0.5f64.ln(), 0.5f64.ln()]).unwrap(), 1.386_294_361_119_890_6, 1e-15);
        assert_eq!(cold_start_loss(&[]), Err(ObjectiveError::EmptySequence));
        assert!(cold_start_loss(&[f64::NEG_INFINITY]).is_err());
        let batch = [vec![0.5f64.ln()], vec![0.25f64.ln(), 0.0]];
        assert_close(cold_start_loss_batch(&batch).unwrap(), 1.5 * 2f64.ln(), 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(ObjectiveConfig::default().validate().is_ok());
        assert!(ObjectiveConfig { beta: 0.0, ..Default::default() }.validate().is_err());
        assert!(ObjectiveConfig { epsilon: -0.1, ..Default::default() }.validate().is_err());
        assert!(ObjectiveConfig { std_floor: -1.0, ..Default::default() }.validate().is_err());
    }
}
