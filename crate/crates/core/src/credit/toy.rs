//! Horizon-one joint bandits with tabular softmax policies.
//!
//! Every agent sees one fixed local observation and picks from its own
//! finite action set; the joint action is scored by a reward table. The
//! joint space is small enough to enumerate, which makes expected rewards and
//! their gradients exact.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CreditError, MAX_JOINT_SPACE};
use crate::par;

/// A joint bandit: per-agent action counts and a reward for every joint action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEnv {
    pub name: String,
    pub action_counts: Vec<usize>,
    /// Local observation of each agent; constant for a bandit.
    pub observations: Vec<String>,
    /// Rewards in row-major order over the joint space (last agent fastest).
    pub rewards: Vec<f64>,
}

impl ToyEnv {
    pub fn from_fn(
        name: impl Into<String>,
        action_counts: Vec<usize>,
        reward: impl Fn(&[usize]) -> f64,
    ) -> Result<Self, CreditError> {
        let size = joint_space_size(&action_counts)?;
        let observations = (0..action_counts.len()).map(|i| format!("o{}", i + 1)).collect();
        let mut env = Self {
            name: name.into(),
            action_counts,
            observations,
            rewards: Vec::with_capacity(size),
        };
        let mut joint = vec![0; env.num_agents()];
        for idx in 0..size {
            env.decode_into(idx, &mut joint);
            env.rewards.push(reward(&joint));
        }
        Ok(env)
    }

    /// Two agents with `actions` choices each; reward 1 when they pick the same action.
    pub fn coordination(actions: usize) -> Self {
        Self::from_fn("coordination", vec![actions, actions], |a| {
            if a[0] == a[1] {
                1.0
            } else {
                0.0
            }
        })
        .expect("two-agent space is enumerable")
    }

    /// Reward 1 on the single joint action `target`, 0 elsewhere.
    pub fn needle(action_counts: Vec<usize>, target: &[usize]) -> Result<Self, CreditError> {
        let target = target.to_vec();
        Self::from_fn("needle", action_counts, move |a| {
            if a == target.as_slice() {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Rewards drawn uniformly from `[-1, 1)`.
    pub fn random(action_counts: Vec<usize>, rng: &mut impl Rng) -> Result<Self, CreditError> {
        let size = joint_space_size(&action_counts)?;
        let rewards: Vec<f64> = (0..size).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut env = Self::from_fn("random", action_counts, |_| 0.0)?;
        env.rewards = rewards;
        Ok(env)
    }

    pub fn num_agents(&self) -> usize {
        self.action_counts.len()
    }

    pub fn joint_size(&self) -> usize {
        self.rewards.len()
    }

    pub fn index(&self, joint: &[usize]) -> usize {
        joint
            .iter()
            .zip(&self.action_counts)
            .fold(0, |acc, (&a, &n)| acc * n + a)
    }

    pub fn decode_into(&self, mut idx: usize, joint: &mut [usize]) {
        for (slot, &n) in joint.iter_mut().zip(&self.action_counts).rev() {
            *slot = idx % n;
            idx /= n;
        }
    }

    pub fn decode(&self, idx: usize) -> Vec<usize> {
        let mut joint = vec![0; self.num_agents()];
        self.decode_into(idx, &mut joint);
        joint
    }

    pub fn reward(&self, joint: &[usize]) -> f64 {
        self.rewards[self.index(joint)]
    }

    pub fn optimum(&self) -> f64 {
        self.rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn reward_range(&self) -> f64 {
        let min = self.rewards.iter().copied().fold(f64::INFINITY, f64::min);
        self.optimum() - min
    }
}

fn joint_space_size(action_counts: &[usize]) -> Result<usize, CreditError> {
    let size = action_counts
        .iter()
        .try_fold(1u128, |acc, &n| acc.checked_mul(n as u128))
        .unwrap_or(u128::MAX);
    if action_counts.is_empty() || action_counts.contains(&0) {
        return Err(CreditError::InvalidHyper(
            "every agent needs at least one action".into(),
        ));
    }
    if size > MAX_JOINT_SPACE {
        return Err(CreditError::SpaceTooLarge { size });
    }
    Ok(size as usize)
}

/// Per-agent softmax policies keyed by local observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub logits: Vec<BTreeMap<String, Vec<f64>>>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl PolicyTable {
    /// All-zero logits, i.e. uniform policies, for `env`.
    pub fn uniform(env: &ToyEnv) -> Self {
        Self::from_params(env, env.action_counts.iter().map(|&n| vec![0.0; n]).collect())
    }

    /// Logits drawn uniformly from `[-scale, scale)`.
    pub fn random(env: &ToyEnv, scale: f64, rng: &mut impl Rng) -> Self {
        let params = env
            .action_counts
            .iter()
            .map(|&n| (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
            .collect();
        Self::from_params(env, params)
    }

    /// Binds one logit vector per agent to that agent's observation in `env`.
    pub fn from_params(env: &ToyEnv, params: Vec<Vec<f64>>) -> Self {
        Self {
            logits: env
                .observations
                .iter()
                .zip(params)
                .map(|(o, z)| BTreeMap::from([(o.clone(), z)]))
                .collect(),
        }
    }

    pub fn agent_logits(&self, env: &ToyEnv, agent: usize) -> Result<&Vec<f64>, CreditError> {
        let observation = &env.observations[agent];
        let z = self
            .logits
            .get(agent)
            .and_then(|m| m.get(observation))
            .ok_or_else(|| CreditError::MissingObservation {
                agent,
                observation: observation.clone(),
            })?;
        if z.len() != env.action_counts[agent] {
            return Err(CreditError::DimensionMismatch {
                left: z.len(),
                right: env.action_counts[agent],
            });
        }
        Ok(z)
    }

    /// Logits of every agent at its observation in `env`.
    pub fn params(&self, env: &ToyEnv) -> Result<Vec<Vec<f64>>, CreditError> {
        (0..env.num_agents())
            .map(|i| self.agent_logits(env, i).cloned())
            .collect()
    }

    pub fn set_params(&mut self, env: &ToyEnv, params: Vec<Vec<f64>>) {
        for ((m, o), z) in self.logits.iter_mut().zip(&env.observations).zip(params) {
            m.insert(o.clone(), z);
        }
    }

    /// Action probabilities of every agent at its observation in `env`.
    pub fn probs(&self, env: &ToyEnv) -> Result<Vec<Vec<f64>>, CreditError> {
        (0..env.num_agents())
            .map(|i| self.agent_logits(env, i).map(|z| softmax(z)))
            .collect()
    }
}

pub(crate) fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}

pub(crate) fn sample_joint(probs: &[Vec<f64>], rng: &mut impl Rng) -> Vec<usize> {
    probs.iter().map(|p| sample_categorical(p, rng)).collect()
}

fn check_enumerable(env: &ToyEnv) -> Result<(), CreditError> {
    joint_space_size(&env.action_counts).map(|_| ())
}

/// `E[R]` under the product policy, by enumeration.
pub fn expected_reward(policies: &PolicyTable, env: &ToyEnv) -> Result<f64, CreditError> {
    check_enumerable(env)?;
    let probs = policies.probs(env)?;
    let mut joint = vec![0; env.num_agents()];
    let mut total = 0.0;
    for (idx, &r) in env.rewards.iter().enumerate() {
        env.decode_into(idx, &mut joint);
        let pi: f64 = joint.iter().zip(&probs).map(|(&a, p)| p[a]).product();
        total += pi * r;
    }
    Ok(total)
}

/// Exact gradient of `E[R]` with respect to every logit, by enumeration.
///
/// `∂E/∂z_{i,k} = Σ_a Π(a) R(a) (1[a_i = k] − π_i(k))`.
pub fn exact_policy_gradient(
    policies: &PolicyTable,
    env: &ToyEnv,
) -> Result<Vec<Vec<f64>>, CreditError> {
    check_enumerable(env)?;
    let probs = policies.probs(env)?;
    // Accumulate Σ Π R 1[a_i=k] per component plus E[R], then subtract π·E[R].
    let mut hits: Vec<Vec<f64>> = probs.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut joint = vec![0; env.num_agents()];
    let mut mean = 0.0;
    for (idx, &r) in env.rewards.iter().enumerate() {
        env.decode_into(idx, &mut joint);
        let weight = joint.iter().zip(&probs).map(|(&a, p)| p[a]).product::<f64>() * r;
        mean += weight;
        for (i, &a) in joint.iter().enumerate() {
            hits[i][a] += weight;
        }
    }
    Ok(hits
        .into_iter()
        .zip(&probs)
        .map(|(h, p)| h.into_iter().zip(p).map(|(hk, pk)| hk - pk * mean).collect())
        .collect())
}

/// Per-component bound `range(R) · π_i(k) (1 − π_i(k))` on the exact gradient.
///
/// Each component is the covariance of the reward with a Bernoulli indicator,
/// so it cannot exceed the indicator variance times the reward range.
pub fn gradient_bound(policies: &PolicyTable, env: &ToyEnv) -> Result<Vec<Vec<f64>>, CreditError> {
    let range = env.reward_range();
    Ok(policies
        .probs(env)?
        .into_iter()
        .map(|p| p.into_iter().map(|pk| range * pk * (1.0 - pk)).collect())
        .collect())
}

/// Monte Carlo policy-gradient estimate with per-component standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGradient {
    pub mean: Vec<Vec<f64>>,
    pub std_error: Vec<Vec<f64>>,
    pub samples: usize,
}

const SAMPLE_CHUNK: usize = 4096;

// At ratio 1 the clip never binds, so any epsilon gives the same gradient.
const ON_POLICY_EPSILON: f64 = 0.999;

/// Unbiased estimate of `∇E[R]` from `samples` on-policy rollouts.
///
/// Each rollout contributes the clipped-surrogate gradient at ratio 1 with the
/// raw reward as its advantage, which is `R(a) ∇ log Π(a)`. Rollouts are drawn
/// in fixed chunks with one RNG stream per chunk, so the estimate does not
/// depend on the worker budget.
pub fn sampled_policy_gradient(
    policies: &PolicyTable,
    env: &ToyEnv,
    samples: usize,
    seed: u64,
    workers: usize,
) -> Result<SampledGradient, CreditError> {
    let probs = policies.probs(env)?;
    let dims: Vec<usize> = probs.iter().map(Vec::len).collect();
    let chunks = par::chunk_ranges(samples, SAMPLE_CHUNK);
    let indexed: Vec<(usize, usize)> = chunks.iter().map(|&(_, len)| len).enumerate().collect();

    let partials = par::map_ordered(&indexed, workers, |&(chunk, len)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chunk as u64);
        let mut sum: Vec<Vec<f64>> = dims.iter().map(|&n| vec![0.0; n]).collect();
        let mut sq = sum.clone();
        for _ in 0..len {
            let joint = sample_joint(&probs, &mut rng);
            let g = super::grpo::sample_gradient(&probs, &joint, env.reward(&joint), 1.0, ON_POLICY_EPSILON);
            for i in 0..dims.len() {
                for k in 0..dims[i] {
                    sum[i][k] += g[i][k];
                    sq[i][k] += g[i][k] * g[i][k];
                }
            }
        }
        (sum, sq)
    });

    let mut sum: Vec<Vec<f64>> = dims.iter().map(|&n| vec![0.0; n]).collect();
    let mut sq = sum.clone();
    for (s, q) in partials {
        for i in 0..dims.len() {
            for k in 0..dims[i] {
                sum[i][k] += s[i][k];
                sq[i][k] += q[i][k];
            }
        }
    }
    let n = samples.max(1) as f64;
    let mean: Vec<Vec<f64>> = sum.iter().map(|v| v.iter().map(|s| s / n).collect()).collect();
    let std_error = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            q.iter()
                .zip(m)
                .map(|(qk, mk)| {
                    let var = (qk / n - mk * mk).max(0.0) * n / (n - 1.0).max(1.0);
                    (var / n).sqrt()
                })
                .collect()
        })
        .collect();
    Ok(SampledGradient {
        mean,
        std_error,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        let env = ToyEnv::from_fn("t", vec![2, 3, 4], |_| 0.0).unwrap();
        for idx in 0..env.joint_size() {
            assert_eq!(env.index(&env.decode(idx)), idx);
        }
        assert_eq!(env.decode(5), vec![0, 1, 1]);
    }

    #[test]
    fn too_large_space_is_refused() {
        assert!(matches!(
            ToyEnv::from_fn("big", vec![1001, 1001], |_| 0.0),
            Err(CreditError::SpaceTooLarge { .. })
        ));
    }

    #[test]
    fn uniform_policy_on_symmetric_env_has_equal_components() {
        let env = ToyEnv::coordination(3);
        let g = exact_policy_gradient(&PolicyTable::uniform(&env), &env).unwrap();
        for row in &g {
            for &x in row {
                assert!((x - g[0][0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expected_reward_of_needle() {
        let env = ToyEnv::needle(vec![4, 4], &[1, 2]).unwrap();
        let e = expected_reward(&PolicyTable::uniform(&env), &env).unwrap();
        assert!((e - 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn missing_observation_is_reported() {
        let env = ToyEnv::coordination(2);
        let mut p = PolicyTable::uniform(&env);
        p.logits[1].clear();
        assert!(matches!(
            p.probs(&env),
            Err(CreditError::MissingObservation { agent: 1, .. })
        ));
    }
}
