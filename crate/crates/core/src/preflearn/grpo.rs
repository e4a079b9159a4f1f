//! Group relative policy optimization for a tabular softmax policy.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bandit::{Query, TabularPolicy};
use super::PrefError;
use crate::hash::derive_seed;
use crate::par::{self, Parallelism};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub clip: f64,
    pub kl_coeff: f64,
    pub group_size: usize,
    pub std_floor: f64,
    /// Initial step of each backtracking line search.
    pub learning_rate: f64,
    pub epochs: usize,
    /// Ascent steps per epoch before the old policy is refreshed.
    pub inner_steps: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            kl_coeff: 0.001,
            group_size: 8,
            std_floor: 1e-8,
            learning_rate: 1.0,
            epochs: 40,
            inner_steps: 8,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), PrefError> {
        let ok = self.clip > 0.0
            && self.clip < 1.0
            && self.kl_coeff >= 0.0
            && self.group_size >= 2
            && self.std_floor > 0.0
            && self.learning_rate > 0.0;
        if ok {
            Ok(())
        } else {
            Err(PrefError::Config(format!("{self:?}")))
        }
    }
}

/// G sampled actions for one query with their rewards and log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub query: String,
    pub responses: Vec<usize>,
    pub rewards: Vec<f64>,
    pub old_logprobs: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
}

impl GroupSample {
    fn check(&self, actions: usize) -> Result<(), PrefError> {
        let g = self.responses.len();
        if g < 2 || self.rewards.len() != g || self.old_logprobs.len() != g || self.ref_logprobs.len() != g {
            return Err(PrefError::MalformedGroup);
        }
        match self.responses.iter().find(|a| **a >= actions) {
            Some(a) => Err(PrefError::UnknownAction { action: *a, size: actions }),
            None => Ok(()),
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Standardized rewards with population statistics; all zeros when the
/// spread is below `std_floor`.
pub fn grpo_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std.is_nan() || std < std_floor {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Exact `KL(softmax(theta) || softmax(reference))`.
pub fn kl_divergence(theta: &[f64], reference: &[f64]) -> f64 {
    let lp = log_softmax(theta);
    let lq = log_softmax(reference);
    lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum()
}

/// Clipped surrogate minus the KL penalty, and its gradient in `theta`.
pub fn grpo_objective(
    theta: &[f64],
    reference: &[f64],
    group: &GroupSample,
    config: &GrpoConfig,
) -> Result<(f64, Vec<f64>), PrefError> {
    group.check(theta.len())?;
    if reference.len() != theta.len() {
        return Err(PrefError::MalformedGroup);
    }
    let lp = log_softmax(theta);
    let pi: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
    let adv = grpo_advantages(&group.rewards, config.std_floor);
    let g = group.responses.len() as f64;
    let mut grad = vec![0.0; theta.len()];
    let mut surrogate = 0.0;
    for ((&a, &old), &adv_i) in group.responses.iter().zip(&group.old_logprobs).zip(&adv) {
        let rho = (lp[a] - old).exp();
        let unclipped = rho * adv_i;
        let clipped = rho.clamp(1.0 - config.clip, 1.0 + config.clip) * adv_i;
        if unclipped <= clipped {
            surrogate += unclipped;
            // d rho / d theta_k = rho * (1[k = a] - pi_k)
            for (k, gk) in grad.iter_mut().enumerate() {
                let ind = if k == a { 1.0 } else { 0.0 };
                *gk += adv_i * rho * (ind - pi[k]) / g;
            }
        } else {
            surrogate += clipped;
        }
    }
    surrogate /= g;
    let lq = log_softmax(reference);
    let kl: f64 = pi.iter().zip(lp.iter().zip(&lq)).map(|(p, (a, b))| p * (a - b)).sum();
    if config.kl_coeff > 0.0 {
        for (k, gk) in grad.iter_mut().enumerate() {
            *gk -= config.kl_coeff * pi[k] * (lp[k] - lq[k] - kl);
        }
    }
    Ok((surrogate - config.kl_coeff * kl, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoRun {
    pub policy: TabularPolicy,
    pub mean_reward_per_epoch: Vec<f64>,
}

fn sample_group(
    policy: &TabularPolicy,
    query: &Query,
    reward: &(dyn Fn(&Query, usize) -> f64 + Sync),
    reference: &TabularPolicy,
    size: usize,
    seed: u64,
) -> Result<GroupSample, PrefError> {
    let lp = log_softmax(policy.row(&query.key)?);
    let lr = log_softmax(reference.row(&query.key)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let responses: Vec<usize> = (0..size).map(|_| sample_index(&lp, &mut rng)).collect();
    Ok(GroupSample {
        query: query.id.clone(),
        rewards: responses.iter().map(|a| reward(query, *a)).collect(),
        old_logprobs: responses.iter().map(|a| lp[*a]).collect(),
        ref_logprobs: responses.iter().map(|a| lr[*a]).collect(),
        responses,
    })
}

/// Draw an index from log-probabilities by inverse CDF.
pub fn sample_index(logprobs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in logprobs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logprobs.len() - 1
}

type Rows = BTreeMap<String, Vec<f64>>;

fn total_objective(
    rows: &Rows,
    reference: &TabularPolicy,
    groups: &[(String, GroupSample)],
    config: &GrpoConfig,
) -> Result<(f64, Rows), PrefError> {
    let mut grad: Rows = rows.iter().map(|(k, v)| (k.clone(), vec![0.0; v.len()])).collect();
    let n = groups.len() as f64;
    let mut total = 0.0;
    for (key, group) in groups {
        let theta = rows.get(key).ok_or_else(|| PrefError::UnknownKey(key.clone()))?;
        let (j, g) = grpo_objective(theta, reference.row(key)?, group, config)?;
        total += j / n;
        let slot = grad.get_mut(key).expect("same keys");
        for (s, x) in slot.iter_mut().zip(g) {
            *s += x / n;
        }
    }
    Ok((total, grad))
}

/// On-policy GRPO. Each epoch samples one group per query from the current
/// policy, which then serves as the old policy for `inner_steps` ascent
/// steps chosen by backtracking line search. The initial policy is the
/// KL reference.
pub fn train_policy_grpo(
    initial: &TabularPolicy,
    reward: &(dyn Fn(&Query, usize) -> f64 + Sync),
    queries: &[Query],
    config: &GrpoConfig,
    seed: u64,
    parallelism: Parallelism,
) -> Result<GrpoRun, PrefError> {
    config.validate()?;
    if queries.is_empty() {
        return Err(PrefError::Empty("queries"));
    }
    let reference = initial.clone();
    let mut policy = initial.clone();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let sampled = par::map(parallelism, queries, |q| {
            let s = derive_seed(seed, &format!("grpo/{epoch}/{}", q.id));
            sample_group(&policy, q, reward, &reference, config.group_size, s).map(|g| (q.key.clone(), g))
        });
        let groups: Vec<(String, GroupSample)> = sampled.into_iter().collect::<Result<_, _>>()?;
        let rewards: Vec<f64> = groups.iter().flat_map(|(_, g)| g.rewards.iter().copied()).collect();
        log.push(rewards.iter().sum::<f64>() / rewards.len() as f64);
        for _ in 0..config.inner_steps {
            let (j, grad) = total_objective(&policy.rows, &reference, &groups, config)?;
            let sq: f64 = grad.values().flatten().map(|g| g * g).sum();
            if sq == 0.0 {
                break;
            }
            let mut step = config.learning_rate;
            let mut accepted = None;
            for _ in 0..40 {
                let trial: Rows = policy
                    .rows
                    .iter()
                    .map(|(k, row)| (k.clone(), row.iter().zip(&grad[k]).map(|(t, g)| t + step * g).collect()))
                    .collect();
                let (jt, _) = total_objective(&trial, &reference, &groups, config)?;
                if jt >= j + 1e-4 * step * sq {
                    accepted = Some(trial);
                    break;
                }
                step *= 0.5;
            }
            let Some(rows) = accepted else { break };
            if rows.values().flatten().any(|x| !x.is_finite()) {
                return Err(PrefError::NonFinite { what: "policy", step: epoch });
            }
            policy.rows = rows;
        }
    }
    Ok(GrpoRun { policy, mean_reward_per_epoch: log })
}
