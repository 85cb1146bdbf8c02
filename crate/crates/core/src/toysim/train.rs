use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::objective::{cold_start_loss_batch, ObjectiveConfig};
use crate::rewards::RewardConfig;

use super::env::{chart_policy, SyntheticTask};
use super::grad::{analytic_gradient, batch_objective, sample_rollouts, GradientOptions, SampledGroup};
use super::policy::ToyPolicy;
use super::ToySimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub group_size: usize,
    pub groups_per_iteration: usize,
    /// Gradient-ascent step on the logits.
    pub lr: f64,
    /// Updates taken on each sampled batch before resampling.
    pub inner_epochs: usize,
    pub max_len: usize,
    pub seed: u64,
    pub cold_start_steps: usize,
    pub cold_start_lr: f64,
    pub cold_start_demos: usize,
    pub reward: RewardConfig,
    pub objective: ObjectiveConfig,
    /// When false the efficiency term is dropped from the total reward.
    pub efficiency_reward: bool,
    /// When false every response uses the base KL coefficient.
    pub adaptive_kl: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            group_size: 8,
            groups_per_iteration: 4,
            lr: 1.0,
            inner_epochs: 1,
            max_len: 40,
            seed: 0,
            cold_start_steps: 200,
            cold_start_lr: 5.0,
            cold_start_demos: 64,
            reward: RewardConfig::default(),
            objective: ObjectiveConfig::default(),
            efficiency_reward: true,
            adaptive_kl: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ToySimError> {
        let bad = |m: String| Err(ToySimError::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be > 0".into());
        }
        if self.group_size < 2 {
            return bad(format!("group size must be >= 2, got {}", self.group_size));
        }
        if self.groups_per_iteration == 0 || self.inner_epochs == 0 {
            return bad("groups per iteration and inner epochs must be > 0".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.cold_start_lr >= 0.0 && self.cold_start_lr.is_finite()) {
            return bad("learning rates must be positive and finite".into());
        }
        if !(8..=64).contains(&self.max_len) {
            return bad(format!("max_len must lie in [8, 64], got {}", self.max_len));
        }
        self.reward
            .validate()
            .map_err(|e| ToySimError::Config(e.to_string()))?;
        self.objective.validate()?;
        Ok(())
    }

    /// Reward settings with the ablation applied.
    pub fn effective_reward(&self) -> RewardConfig {
        RewardConfig {
            w2: if self.efficiency_reward { self.reward.w2 } else { 0.0 },
            ..self.reward
        }
    }

    pub fn effective_objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            adaptive_kl: self.adaptive_kl,
            ..self.objective
        }
    }
}

/// Per-iteration series; every vector has one entry per iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub mean_reward: Vec<f64>,
    pub mean_p_redundancy: Vec<f64>,
    pub mean_n_info: Vec<f64>,
    pub mean_beta: Vec<f64>,
    pub objective: Vec<f64>,
    pub mean_accuracy: Vec<f64>,
    pub focus_rate: Vec<f64>,
}

impl TrainMetrics {
    pub fn len(&self) -> usize {
        self.mean_reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_reward.is_empty()
    }

    pub fn record(&self, i: usize) -> IterationRecord {
        IterationRecord {
            iteration: i,
            mean_reward: self.mean_reward[i],
            mean_p_redundancy: self.mean_p_redundancy[i],
            mean_n_info: self.mean_n_info[i],
            mean_beta: self.mean_beta[i],
            objective: self.objective[i],
            mean_accuracy: self.mean_accuracy[i],
            focus_rate: self.focus_rate[i],
        }
    }

    pub fn push(&mut self, r: &IterationRecord) {
        self.mean_reward.push(r.mean_reward);
        self.mean_p_redundancy.push(r.mean_p_redundancy);
        self.mean_n_info.push(r.mean_n_info);
        self.mean_beta.push(r.mean_beta);
        self.objective.push(r.objective);
        self.mean_accuracy.push(r.mean_accuracy);
        self.focus_rate.push(r.focus_rate);
    }

    pub fn records(&self) -> impl Iterator<Item = IterationRecord> + '_ {
        (0..self.len()).map(|i| self.record(i))
    }

    /// Mean of each series over `range`.
    pub fn window(&self, range: std::ops::Range<usize>) -> WindowSummary {
        let avg = |v: &[f64]| {
            let s = &v[range.clone()];
            s.iter().sum::<f64>() / s.len().max(1) as f64
        };
        WindowSummary {
            start: range.start,
            end: range.end,
            mean_reward: avg(&self.mean_reward),
            mean_p_redundancy: avg(&self.mean_p_redundancy),
            mean_n_info: avg(&self.mean_n_info),
            mean_beta: avg(&self.mean_beta),
            objective: avg(&self.objective),
            mean_accuracy: avg(&self.mean_accuracy),
            focus_rate: avg(&self.focus_rate),
        }
    }

    pub fn first_window(&self, width: usize) -> WindowSummary {
        self.window(0..width.min(self.len()))
    }

    pub fn last_window(&self, width: usize) -> WindowSummary {
        self.window(self.len().saturating_sub(width)..self.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_p_redundancy: f64,
    pub mean_n_info: f64,
    pub mean_beta: f64,
    pub objective: f64,
    pub mean_accuracy: f64,
    pub focus_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub start: usize,
    pub end: usize,
    pub mean_reward: f64,
    pub mean_p_redundancy: f64,
    pub mean_n_info: f64,
    pub mean_beta: f64,
    pub objective: f64,
    pub mean_accuracy: f64,
    pub focus_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub task: SyntheticTask,
    pub cold_start_losses: Vec<f64>,
    pub metrics: TrainMetrics,
    pub policy: ToyPolicy,
}

/// SplitMix64 step, used to derive independent per-group seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, iteration: usize, group: usize) -> u64 {
    mix(mix(mix(seed) ^ iteration as u64) ^ group as u64)
}

/// Supervised warm-up on teacher demonstrations; returns the loss before
/// each step.
pub fn cold_start(
    policy: &mut ToyPolicy,
    demos: &[Vec<usize>],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>, ToySimError> {
    let mut losses = Vec::with_capacity(steps);
    let weight = 1.0 / demos.len().max(1) as f64;
    for _ in 0..steps {
        let logps = demos
            .iter()
            .map(|d| policy.token_logprobs(d))
            .collect::<Result<Vec<_>, _>>()?;
        losses.push(cold_start_loss_batch(&logps)?);
        // ascent on mean log-likelihood = descent on the loss
        let mut grad = vec![0.0; policy.logits().len()];
        for d in demos {
            policy.accumulate_logprob_grad(d, weight, &mut grad)?;
        }
        policy.step(&grad, lr)?;
    }
    Ok(losses)
}

/// Builds the task and the warmed-up policy for a run.
pub fn prepare(cfg: &TrainConfig) -> Result<(SyntheticTask, ToyPolicy, Vec<f64>), ToySimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ 0x5EED));
    let task = SyntheticTask::generate(&mut rng, format!("toy-{}", cfg.seed));
    let demos: Vec<Vec<usize>> = (0..cfg.cold_start_demos)
        .map(|_| task.demonstration(&mut rng))
        .collect();
    let mut policy = chart_policy(cfg.max_len);
    let losses = if demos.is_empty() {
        Vec::new()
    } else {
        cold_start(&mut policy, &demos, cfg.cold_start_steps, cfg.cold_start_lr)?
    };
    Ok((task, policy, losses))
}

fn summarize(groups: &[SampledGroup], objective: &ObjectiveConfig) -> IterationRecord {
    let responses: Vec<_> = groups.iter().flat_map(|g| &g.responses).collect();
    let n = responses.len() as f64;
    let avg = |f: &dyn Fn(&super::grad::SampledResponse) -> f64| responses.iter().map(|r| f(r)).sum::<f64>() / n;
    let breakdown_field = |f: fn(&crate::rewards::RewardBreakdown) -> f64| {
        move |r: &super::grad::SampledResponse| r.breakdown.as_ref().map_or(0.0, f)
    };
    IterationRecord {
        iteration: 0,
        mean_reward: avg(&|r| r.reward),
        mean_p_redundancy: avg(&breakdown_field(|b| b.p_redundancy)),
        mean_n_info: avg(&|r| r.cues.n_info),
        mean_beta: avg(&|r| objective.beta_for(&r.cues)),
        objective: f64::NAN,
        mean_accuracy: avg(&breakdown_field(|b| b.r_relaxed_acc)),
        focus_rate: avg(&breakdown_field(|b| {
            if b.format == crate::trace::FormatClass::FocusCot {
                1.0
            } else {
                0.0
            }
        })),
    }
}

/// Runs cold start followed by `cfg.iterations` rounds of sample, score,
/// and clipped-objective gradient ascent.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, ToySimError> {
    cfg.validate()?;
    let reward_cfg = cfg.effective_reward();
    let objective = cfg.effective_objective();
    let (task, mut policy, cold_start_losses) = prepare(cfg)?;
    let reference = policy.clone();
    let mut metrics = TrainMetrics::default();

    for it in 0..cfg.iterations {
        let sampler = policy.clone();
        let groups = (0..cfg.groups_per_iteration)
            .into_par_iter()
            .map(|g| {
                sample_rollouts(
                    &sampler,
                    &reference,
                    &task,
                    cfg.group_size,
                    &reward_cfg,
                    derive_seed(cfg.seed, it, g),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;

        for _ in 0..cfg.inner_epochs {
            let grad = analytic_gradient(&policy, &groups, &objective, GradientOptions::default())?;
            policy.step(&grad, cfg.lr)?;
        }

        let value = match batch_objective(&policy, &groups, &objective) {
            Ok(v) if v.is_finite() && policy.is_finite() => v,
            _ => {
                return Err(ToySimError::Diverged {
                    iteration: it,
                    last_finite: it.checked_sub(1),
                })
            }
        };
        let mut rec = summarize(&groups, &objective);
        rec.iteration = it;
        rec.objective = value;
        metrics.push(&rec);
    }

    Ok(TrainOutcome {
        task,
        cold_start_losses,
        metrics,
        policy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig {
            iterations: 12,
            ..Default::default()
        }
    }

    #[test]
    fn reproducible_bit_for_bit() {
        let a = train(&small()).unwrap();
        let b = train(&small()).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn metric_series_have_equal_length() {
        let out = train(&small()).unwrap();
        let m = &out.metrics;
        for len in [
            m.mean_p_redundancy.len(),
            m.mean_n_info.len(),
            m.mean_beta.len(),
            m.objective.len(),
            m.mean_accuracy.len(),
            m.focus_rate.len(),
        ] {
            assert_eq!(len, m.mean_reward.len());
        }
        assert_eq!(m.len(), 12);
    }

    #[test]
    fn cold_start_reduces_loss() {
        let out = train(&TrainConfig { iterations: 1, ..Default::default() }).unwrap();
        let l = &out.cold_start_losses;
        assert!(l.last().unwrap() < l.first().unwrap());
    }

    #[test]
    fn fixed_kl_records_base_beta() {
        let cfg = TrainConfig {
            adaptive_kl: false,
            ..small()
        };
        let out = train(&cfg).unwrap();
        assert!(out.metrics.mean_beta.iter().all(|b| (b - cfg.objective.beta).abs() < 1e-15));
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            lr: 1e308,
            ..small()
        };
        match train(&cfg) {
            Err(ToySimError::Diverged { iteration, .. }) => assert!(iteration < 12),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            TrainConfig { group_size: 1, ..small() },
            TrainConfig { max_len: 100, ..small() },
            TrainConfig { lr: 0.0, ..small() },
            TrainConfig { iterations: 0, ..small() },
        ] {
            assert!(matches!(train(&cfg), Err(ToySimError::Config(_))));
        }
    }
}
