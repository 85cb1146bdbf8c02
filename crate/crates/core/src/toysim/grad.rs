//! Sampled groups on the toy policy, the exact gradient of the clipped
//! objective with respect to the logit table, and a central-difference check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::objective::{
    focus_grpo_objective, group_advantages, ObjectiveConfig, Rollout, RolloutGroup,
};
use crate::rewards::{score_response, RewardBreakdown, RewardConfig};
use crate::trace::CueCounts;

use super::env::SyntheticTask;
use super::policy::ToyPolicy;
use super::ToySimError;

/// One sampled sequence with the quantities fixed at sampling time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledResponse {
    pub tokens: Vec<usize>,
    pub text: String,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub reward: f64,
    pub cues: CueCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<RewardBreakdown>,
}

/// Toy counterpart of [`RolloutGroup`] that also keeps the token ids, so the
/// current-policy log-probabilities can be recomputed after each update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledGroup {
    pub question_id: String,
    pub responses: Vec<SampledResponse>,
}

impl SampledGroup {
    /// Rollout group with `logp_theta` evaluated under `policy`.
    pub fn rollout_group(&self, policy: &ToyPolicy) -> Result<RolloutGroup, ToySimError> {
        let rollouts = self
            .responses
            .iter()
            .map(|r| {
                Ok(Rollout {
                    reward: r.reward,
                    logp_theta: policy.token_logprobs(&r.tokens)?,
                    logp_old: r.logp_old.clone(),
                    logp_ref: r.logp_ref.clone(),
                    cues: r.cues,
                })
            })
            .collect::<Result<_, ToySimError>>()?;
        Ok(RolloutGroup {
            question_id: self.question_id.clone(),
            rollouts,
        })
    }
}

/// Samples `group_size` responses to `task` from `policy` and scores them
/// through the parser and reward stack.
pub fn sample_rollouts(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    task: &SyntheticTask,
    group_size: usize,
    reward_cfg: &RewardConfig,
    seed: u64,
) -> Result<SampledGroup, ToySimError> {
    if group_size < 2 {
        return Err(ToySimError::Config(format!("group size must be >= 2, got {group_size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = task.answer_spec();
    let responses = (0..group_size)
        .map(|_| {
            let (tokens, logp_old) = policy.sample(&mut rng);
            let logp_ref = reference.token_logprobs(&tokens)?;
            let text = task.render(&tokens);
            let breakdown = score_response(&text, &spec, reward_cfg);
            Ok(SampledResponse {
                tokens,
                text,
                logp_old,
                logp_ref,
                reward: breakdown.total,
                cues: breakdown.cues,
                breakdown: Some(breakdown),
            })
        })
        .collect::<Result<_, ToySimError>>()?;
    Ok(SampledGroup {
        question_id: task.id.clone(),
        responses,
    })
}

/// Objective averaged over groups, evaluated at `policy`.
pub fn batch_objective(
    policy: &ToyPolicy,
    groups: &[SampledGroup],
    cfg: &ObjectiveConfig,
) -> Result<f64, ToySimError> {
    if groups.is_empty() {
        return Err(ToySimError::Config("empty batch".into()));
    }
    let mut total = 0.0;
    for g in groups {
        total += focus_grpo_objective(&g.rollout_group(policy)?, cfg)?;
    }
    Ok(total / groups.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradientOptions {
    /// Negates the result. Only used as a negative control for the check.
    pub flip_sign: bool,
}

/// Exact gradient of [`batch_objective`] with respect to the logit table.
///
/// With `l_i = log pi_theta(o_i)`:
///
/// ```text
/// dJ/dl_i = (A_i rho_i [unclipped branch active] - beta_i (1 - exp(d_i))) / G
/// dl_i/dlogit[s, v] = sum over steps t in state s of (1[v = o_it] - pi(v | s))
/// ```
pub fn analytic_gradient(
    policy: &ToyPolicy,
    groups: &[SampledGroup],
    cfg: &ObjectiveConfig,
    opts: GradientOptions,
) -> Result<Vec<f64>, ToySimError> {
    if groups.is_empty() {
        return Err(ToySimError::Config("empty batch".into()));
    }
    let mut grad = vec![0.0; policy.logits().len()];
    let batch_scale = 1.0 / groups.len() as f64;
    for g in groups {
        let group = g.rollout_group(policy)?;
        group.validate()?;
        let advantages = group_advantages(&group.rewards(), cfg.std_floor)?;
        let scale = batch_scale / group.rollouts.len() as f64;
        for ((resp, rollout), adv) in g.responses.iter().zip(&group.rollouts).zip(advantages) {
            let ratio = rollout.ratio();
            let clipped_out = (adv > 0.0 && ratio > 1.0 + cfg.epsilon)
                || (adv < 0.0 && ratio < 1.0 - cfg.epsilon);
            let policy_part = if clipped_out { 0.0 } else { adv * ratio };
            let kl_part = cfg.beta_for(&rollout.cues) * (1.0 - rollout.ref_logratio().exp());
            let weight = scale * (policy_part - kl_part);
            policy.accumulate_logprob_grad(&resp.tokens, weight, &mut grad)?;
        }
    }
    if opts.flip_sign {
        grad.iter_mut().for_each(|g| *g = -*g);
    }
    Ok(grad)
}

/// Central finite differences of [`batch_objective`], one coordinate at a time.
pub fn finite_difference_gradient(
    policy: &ToyPolicy,
    groups: &[SampledGroup],
    cfg: &ObjectiveConfig,
    h: f64,
) -> Result<Vec<f64>, ToySimError> {
    let mut probe = policy.clone();
    let mut grad = vec![0.0; policy.logits().len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.logits()[i];
        probe.logits_mut()[i] = orig + h;
        let plus = batch_objective(&probe, groups, cfg)?;
        probe.logits_mut()[i] = orig - h;
        let minus = batch_objective(&probe, groups, cfg)?;
        probe.logits_mut()[i] = orig;
        *g = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps coordinates whose true
/// gradient is zero from dividing roundoff by roundoff.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub vocab: usize,
    pub max_len: usize,
    pub groups: usize,
    pub group_size: usize,
    pub h: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            vocab: 5,
            max_len: 6,
            groups: 2,
            group_size: 4,
            h: GRADCHECK_STEP,
            tolerance: GRADCHECK_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub parameters: usize,
    pub nonzero: usize,
    pub clipped_responses: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

/// Builds a random small instance where the current policy is a perturbation
/// of the sampling policy and the reference is a further perturbation, so
/// ratios and KL terms are all non-trivial. Responses whose ratio sits
/// within reach of a clip boundary are resampled, since the objective is not
/// differentiable there.
pub fn random_instance(
    seed: u64,
    cfg: &GradcheckConfig,
    objective: &ObjectiveConfig,
) -> Result<(ToyPolicy, Vec<SampledGroup>), ToySimError> {
    if cfg.vocab < 2 || cfg.max_len == 0 || cfg.groups == 0 || cfg.group_size < 2 {
        return Err(ToySimError::Config(format!("invalid gradcheck shape {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eos = Some(cfg.vocab - 1);
    let old = ToyPolicy::uniform_identity(cfg.vocab, cfg.max_len, eos).randomized(&mut rng, 1.0);
    let perturb = |base: &ToyPolicy, rng: &mut ChaCha8Rng, scale: f64| {
        let noise = ToyPolicy::uniform_identity(cfg.vocab, cfg.max_len, eos).randomized(rng, scale);
        let mut p = base.clone();
        p.step(noise.logits(), 1.0).expect("same shape");
        p
    };
    let theta = perturb(&old, &mut rng, 0.25);
    let reference = perturb(&theta, &mut rng, 0.4);
    let margin = 1e-3;
    let mut groups = Vec::with_capacity(cfg.groups);
    for gi in 0..cfg.groups {
        let mut responses = Vec::with_capacity(cfg.group_size);
        while responses.len() < cfg.group_size {
            let (tokens, logp_old) = old.sample(&mut rng);
            let logp_theta: f64 = theta.token_logprobs(&tokens)?.iter().sum();
            let ratio = (logp_theta - logp_old.iter().sum::<f64>()).exp();
            let near_kink = [1.0 - objective.epsilon, 1.0 + objective.epsilon]
                .iter()
                .any(|b| (ratio - b).abs() < margin);
            if near_kink {
                continue;
            }
            let n_ocr = rng.gen_range(0..4);
            let n_box = rng.gen_range(0..4);
            responses.push(SampledResponse {
                logp_ref: reference.token_logprobs(&tokens)?,
                tokens,
                text: String::new(),
                logp_old,
                reward: rng.gen_range(0.0..1.2),
                cues: CueCounts::new(n_ocr, n_box),
                breakdown: None,
            });
        }
        groups.push(SampledGroup {
            question_id: format!("g{gi}"),
            responses,
        });
    }
    Ok((theta, groups))
}

pub fn gradcheck(
    seed: u64,
    cfg: &GradcheckConfig,
    objective: &ObjectiveConfig,
    opts: GradientOptions,
) -> Result<GradcheckReport, ToySimError> {
    let (policy, groups) = random_instance(seed, cfg, objective)?;
    let analytic = analytic_gradient(&policy, &groups, objective, opts)?;
    let numeric = finite_difference_gradient(&policy, &groups, objective, cfg.h)?;
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        max_rel = max_rel.max(relative_error(*a, *n, GRADCHECK_FLOOR));
        max_abs = max_abs.max((a - n).abs());
    }
    let mut clipped = 0;
    for g in &groups {
        let rg = g.rollout_group(&policy)?;
        let adv = group_advantages(&rg.rewards(), objective.std_floor)?;
        clipped += rg
            .rollouts
            .iter()
            .zip(adv)
            .filter(|(r, a)| {
                let rho = r.ratio();
                (*a > 0.0 && rho > 1.0 + objective.epsilon) || (*a < 0.0 && rho < 1.0 - objective.epsilon)
            })
            .count();
    }
    Ok(GradcheckReport {
        seed,
        parameters: analytic.len(),
        nonzero: analytic.iter().filter(|g| **g != 0.0).count(),
        clipped_responses: clipped,
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        passed: max_rel < cfg.tolerance,
    })
}
