use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::toy::{sample_joint, PolicyTable, ToyEnv};
use super::CreditError;

/// Centralized action-value table over the joint action space of a bandit.
///
/// The toy environments have a single global state, so cells are indexed by
/// joint action alone. Fitting is least squares with one indicator feature
/// per cell, whose solution is the running mean of the returns observed in
/// that cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralCritic {
    pub action_counts: Vec<usize>,
    q: Vec<Option<f64>>,
    visits: Vec<u64>,
}

impl CentralCritic {
    /// A critic defined on every cell of `env`, initialized to 0.
    pub fn new(env: &ToyEnv) -> Self {
        Self {
            action_counts: env.action_counts.clone(),
            q: vec![Some(0.0); env.joint_size()],
            visits: vec![0; env.joint_size()],
        }
    }

    /// A critic defined only on the listed cells.
    pub fn from_entries(env: &ToyEnv, entries: &BTreeMap<Vec<usize>, f64>) -> Self {
        let mut q = vec![None; env.joint_size()];
        for (joint, &v) in entries {
            q[env.index(joint)] = Some(v);
        }
        Self {
            action_counts: env.action_counts.clone(),
            q,
            visits: vec![0; env.joint_size()],
        }
    }

    fn index(&self, joint: &[usize]) -> usize {
        joint
            .iter()
            .zip(&self.action_counts)
            .fold(0, |acc, (&a, &n)| acc * n + a)
    }

    pub fn q(&self, joint: &[usize]) -> Result<f64, CreditError> {
        let in_range = joint.len() == self.action_counts.len()
            && joint.iter().zip(&self.action_counts).all(|(&a, &n)| a < n);
        in_range
            .then(|| self.q[self.index(joint)])
            .flatten()
            .ok_or_else(|| CreditError::MissingQValue {
                joint: joint.to_vec(),
            })
    }

    pub fn set(&mut self, joint: &[usize], value: f64) {
        let idx = self.index(joint);
        self.q[idx] = Some(value);
    }

    /// Folds observed `(joint action, return)` pairs into the per-cell means.
    pub fn fit(&mut self, samples: &[(Vec<usize>, f64)]) {
        for (joint, r) in samples {
            let idx = self.index(joint);
            self.visits[idx] += 1;
            let prev = if self.visits[idx] == 1 {
                0.0
            } else {
                self.q[idx].unwrap_or(0.0)
            };
            self.q[idx] = Some(prev + (r - prev) / self.visits[idx] as f64);
        }
    }

    pub fn visits(&self, joint: &[usize]) -> u64 {
        self.visits[self.index(joint)]
    }
}

/// `Q(a) − Σ_{a'} π_i(a') Q([a', a_{−i}])` for agent `agent`.
pub fn counterfactual_advantage(
    critic: &CentralCritic,
    policies: &PolicyTable,
    env: &ToyEnv,
    joint: &[usize],
    agent: usize,
) -> Result<f64, CreditError> {
    let pi = crate::credit::toy::softmax(policies.agent_logits(env, agent)?);
    counterfactual_advantage_with(critic, &pi, joint, agent)
}

pub(crate) fn counterfactual_advantage_with(
    critic: &CentralCritic,
    pi: &[f64],
    joint: &[usize],
    agent: usize,
) -> Result<f64, CreditError> {
    let chosen = critic.q(joint)?;
    let mut alt = joint.to_vec();
    let mut baseline = 0.0;
    for (k, &pk) in pi.iter().enumerate() {
        alt[agent] = k;
        baseline += pk * critic.q(&alt)?;
    }
    Ok(chosen - baseline)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CtdeHyper {
    /// Rollouts sampled per step.
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for CtdeHyper {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtdeDiagnostics {
    pub mean_reward: f64,
    pub grad_norm: f64,
}

/// One centralized-training update.
///
/// Samples a batch of joint actions, refits the critic on their returns, then
/// moves each agent's logits along `mean_b Â_i(b) ∇ log π_i(a_{b,i})` with the
/// counterfactual advantage. Each agent's policy reads only its own
/// observation; the critic is used for training alone.
pub fn ctde_step(
    policies: &PolicyTable,
    critic: &CentralCritic,
    env: &ToyEnv,
    hyper: &CtdeHyper,
    seed: u64,
) -> Result<(PolicyTable, CentralCritic, CtdeDiagnostics), CreditError> {
    if hyper.batch_size == 0 {
        return Err(CreditError::InvalidHyper("batch_size must be at least 1".into()));
    }
    let probs = policies.probs(env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<(Vec<usize>, f64)> = (0..hyper.batch_size)
        .map(|_| {
            let joint = sample_joint(&probs, &mut rng);
            let r = env.reward(&joint);
            (joint, r)
        })
        .collect();

    let mut critic = critic.clone();
    critic.fit(&samples);

    let mut grad: Vec<Vec<f64>> = probs.iter().map(|p| vec![0.0; p.len()]).collect();
    let scale = 1.0 / samples.len() as f64;
    for (joint, _) in &samples {
        for (i, p) in probs.iter().enumerate() {
            let adv = counterfactual_advantage_with(&critic, p, joint, i)?;
            for (k, &pk) in p.iter().enumerate() {
                let score = f64::from(u8::from(k == joint[i])) - pk;
                grad[i][k] += scale * adv * score;
            }
        }
    }
    let grad_norm = grad.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();

    let mut updated = policies.clone();
    if hyper.learning_rate != 0.0 {
        let params = policies
            .params(env)?
            .into_iter()
            .zip(&grad)
            .map(|(z, g)| z.iter().zip(g).map(|(zk, gk)| zk + hyper.learning_rate * gk).collect())
            .collect();
        updated.set_params(env, params);
    }
    let mean_reward = samples.iter().map(|(_, r)| r).sum::<f64>() * scale;
    Ok((updated, critic, CtdeDiagnostics { mean_reward, grad_norm }))
}
