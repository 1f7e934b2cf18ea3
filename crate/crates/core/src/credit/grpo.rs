use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::toy::{sample_joint, softmax, PolicyTable, ToyEnv};
use super::CreditError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoHyper {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub std_floor: f64,
    /// Optimization passes over each sampled group.
    pub inner_epochs: usize,
}

impl Default for GrpoHyper {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_beta: 0.04,
            learning_rate: 0.05,
            std_floor: 1e-8,
            inner_epochs: 1,
        }
    }
}

impl GrpoHyper {
    pub fn validate(&self) -> Result<(), CreditError> {
        if self.group_size < 2 {
            return Err(CreditError::GroupTooSmall {
                size: self.group_size,
            });
        }
        let bad = |msg: String| Err(CreditError::InvalidHyper(msg));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad(format!("clip_epsilon must be in (0,1), got {}", self.clip_epsilon));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return bad(format!("kl_beta must be finite and non-negative, got {}", self.kl_beta));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if !(self.std_floor > 0.0) {
            return bad(format!("std_floor must be positive, got {}", self.std_floor));
        }
        if self.inner_epochs == 0 {
            return bad("inner_epochs must be at least 1".into());
        }
        Ok(())
    }
}

/// Group-relative advantages `(R_i − mean) / std` with the population std.
///
/// Rewards are first shifted by the group's first element. Standardization
/// is shift-invariant in exact arithmetic; the pivot keeps it so in floating
/// point whenever the shifted differences are exact, and keeps magnitudes
/// small otherwise. Groups whose std falls below `std_floor` get all zeros.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>, CreditError> {
    let g = rewards.len();
    if g < 2 {
        return Err(CreditError::GroupTooSmall { size: g });
    }
    let pivot = rewards[0];
    let shifted: Vec<f64> = rewards.iter().map(|r| r - pivot).collect();
    let mean = shifted.iter().sum::<f64>() / g as f64;
    let dev: Vec<f64> = shifted.iter().map(|d| d - mean).collect();
    let std = (dev.iter().map(|d| d * d).sum::<f64>() / g as f64).sqrt();
    if !(std >= std_floor) {
        return Ok(vec![0.0; g]);
    }
    Ok(dev.into_iter().map(|d| d / std).collect())
}

/// `min(ρ·Â, clip(ρ, 1−ε, 1+ε)·Â)`.
pub fn clip_surrogate(rho: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon);
    (rho * advantage).min(clipped * advantage)
}

/// Derivative of [`clip_surrogate`] with respect to `ρ`: `Â` while the
/// unclipped term is the active minimum, 0 once the clip binds.
fn clip_surrogate_slope(rho: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon);
    if rho * advantage <= clipped * advantage {
        advantage
    } else {
        0.0
    }
}

/// `Σ p·ln(p/q)` with `0·ln(0/q) = 0`.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64, CreditError> {
    if p.len() != q.len() {
        return Err(CreditError::DimensionMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let mut kl = 0.0;
    for (index, (&pk, &qk)) in p.iter().zip(q).enumerate() {
        if pk > 0.0 {
            if qk <= 0.0 {
                return Err(CreditError::SupportMismatch { index });
            }
            kl += pk * (pk / qk).ln();
        }
    }
    Ok(kl)
}

/// `∂KL(softmax(z) ‖ q)/∂z_k = p_k (ln(p_k/q_k) − KL)`.
fn kl_logit_gradient(p: &[f64], q: &[f64]) -> Result<Vec<f64>, CreditError> {
    let kl = kl_categorical(p, q)?;
    Ok(p.iter()
        .zip(q)
        .map(|(&pk, &qk)| if pk > 0.0 { pk * ((pk / qk).ln() - kl) } else { 0.0 })
        .collect())
}

fn summed_kl(current: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64, CreditError> {
    current
        .iter()
        .zip(reference)
        .map(|(p, q)| kl_categorical(p, q))
        .sum()
}

fn joint_ratio(current: &[Vec<f64>], old: &[Vec<f64>], joint: &[usize]) -> f64 {
    joint
        .iter()
        .enumerate()
        .map(|(i, &a)| current[i][a] / old[i][a])
        .product()
}

/// Surrogate gradient of one rollout with respect to every logit.
///
/// `∂ρ/∂z_{i,k} = ρ (1[a_i = k] − π_i(k))` for the joint ratio of a product policy.
pub(crate) fn sample_gradient(
    probs: &[Vec<f64>],
    joint: &[usize],
    advantage: f64,
    rho: f64,
    epsilon: f64,
) -> Vec<Vec<f64>> {
    let coeff = clip_surrogate_slope(rho, advantage, epsilon) * rho;
    probs
        .iter()
        .zip(joint)
        .map(|(p, &a)| {
            p.iter()
                .enumerate()
                .map(|(k, &pk)| coeff * (f64::from(u8::from(k == a)) - pk))
                .collect()
        })
        .collect()
}

/// Gradient of `mean_g clip_surrogate(ρ_g, Â_g) − β Σ_i KL(π_i ‖ π_ref,i)`.
pub fn surrogate_gradient(
    current: &[Vec<f64>],
    old: &[Vec<f64>],
    reference: &[Vec<f64>],
    batch: &[Vec<usize>],
    advantages: &[f64],
    hyper: &GrpoHyper,
) -> Result<Vec<Vec<f64>>, CreditError> {
    let mut grad: Vec<Vec<f64>> = current.iter().map(|p| vec![0.0; p.len()]).collect();
    let scale = 1.0 / batch.len() as f64;
    for (joint, &adv) in batch.iter().zip(advantages) {
        let rho = joint_ratio(current, old, joint);
        let g = sample_gradient(current, joint, adv, rho, hyper.clip_epsilon);
        for (acc, gi) in grad.iter_mut().zip(g) {
            for (a, x) in acc.iter_mut().zip(gi) {
                *a += scale * x;
            }
        }
    }
    if hyper.kl_beta > 0.0 {
        for (acc, (p, q)) in grad.iter_mut().zip(current.iter().zip(reference)) {
            for (a, d) in acc.iter_mut().zip(kl_logit_gradient(p, q)?) {
                *a -= hyper.kl_beta * d;
            }
        }
    }
    Ok(grad)
}

fn objective(
    current: &[Vec<f64>],
    old: &[Vec<f64>],
    reference: &[Vec<f64>],
    batch: &[Vec<usize>],
    advantages: &[f64],
    hyper: &GrpoHyper,
) -> Result<f64, CreditError> {
    let surrogate = batch
        .iter()
        .zip(advantages)
        .map(|(joint, &adv)| clip_surrogate(joint_ratio(current, old, joint), adv, hyper.clip_epsilon))
        .sum::<f64>()
        / batch.len() as f64;
    let penalty = if hyper.kl_beta > 0.0 {
        hyper.kl_beta * summed_kl(current, reference)?
    } else {
        0.0
    };
    Ok(surrogate - penalty)
}

fn probs_of(params: &[Vec<f64>]) -> Vec<Vec<f64>> {
    params.iter().map(|z| softmax(z)).collect()
}

fn norm(g: &[Vec<f64>]) -> f64 {
    g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoDiagnostics {
    /// Mean reward of the sampled group.
    pub mean_reward: f64,
    /// Summed per-agent KL to the reference at the start of the step.
    pub kl: f64,
    /// Norm of the first objective gradient of the step.
    pub grad_norm: f64,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

/// One GRPO update on a joint bandit.
///
/// Samples `group_size` joint actions from the current policies, standardizes
/// their rewards within the group, and ascends the clipped surrogate minus
/// `β·KL` to `reference`. Each ascent step starts at `learning_rate` and is
/// halved until the sampled objective improves by the Armijo margin, which
/// keeps the update stable when `β` is large.
pub fn grpo_step(
    policies: &PolicyTable,
    env: &ToyEnv,
    hyper: &GrpoHyper,
    reference: &PolicyTable,
    seed: u64,
) -> Result<(PolicyTable, GrpoDiagnostics), CreditError> {
    hyper.validate()?;
    let old_params = policies.params(env)?;
    let old = probs_of(&old_params);
    let reference = reference.probs(env)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<Vec<usize>> = (0..hyper.group_size).map(|_| sample_joint(&old, &mut rng)).collect();
    let rewards: Vec<f64> = batch.iter().map(|j| env.reward(j)).collect();
    let advantages = group_advantages(&rewards, hyper.std_floor)?;
    let kl = summed_kl(&old, &reference)?;

    let mut params = old_params;
    let mut grad_norm = None;
    for _ in 0..hyper.inner_epochs {
        let current = probs_of(&params);
        let grad = surrogate_gradient(&current, &old, &reference, &batch, &advantages, hyper)?;
        let g2 = norm(&grad).powi(2);
        grad_norm.get_or_insert(g2.sqrt());
        if hyper.learning_rate == 0.0 || g2 == 0.0 {
            break;
        }
        let base = objective(&current, &old, &reference, &batch, &advantages, hyper)?;
        let mut eta = hyper.learning_rate;
        for _ in 0..MAX_HALVINGS {
            let candidate: Vec<Vec<f64>> = params
                .iter()
                .zip(&grad)
                .map(|(z, g)| z.iter().zip(g).map(|(zk, gk)| zk + eta * gk).collect())
                .collect();
            let value = objective(&probs_of(&candidate), &old, &reference, &batch, &advantages, hyper)?;
            if value >= base + ARMIJO_C * eta * g2 {
                params = candidate;
                break;
            }
            eta *= 0.5;
        }
    }

    let mut updated = policies.clone();
    updated.set_params(env, params);
    let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok((
        updated,
        GrpoDiagnostics {
            mean_reward,
            kl,
            grad_norm: grad_norm.unwrap_or(0.0),
            rewards,
            advantages,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantage_examples() {
        let a = group_advantages(&[1.0, 2.0, 3.0], 1e-8).unwrap();
        let expected = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((a[0] + expected).abs() < 1e-12);
        assert_eq!(a[1], 0.0);
        assert!((a[2] - expected).abs() < 1e-12);
        assert_eq!(group_advantages(&[4.2; 3], 1e-8).unwrap(), vec![0.0; 3]);
        assert_eq!(group_advantages(&[11.0, 12.0, 13.0], 1e-8).unwrap(), a);
        assert_eq!(
            group_advantages(&[1.0], 1e-8),
            Err(CreditError::GroupTooSmall { size: 1 })
        );
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(clip_surrogate(1.0, 2.0, 0.2), 2.0);
        assert!((clip_surrogate(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clip_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_categorical(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let v = kl_categorical(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(
            kl_categorical(&[0.5, 0.5], &[1.0, 0.0]),
            Err(CreditError::SupportMismatch { index: 1 })
        );
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let z = [0.3, -0.2, 0.9];
        let q = [0.2, 0.5, 0.3];
        let g = kl_logit_gradient(&softmax(&z), &q).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut up = z;
            up[k] += h;
            let mut dn = z;
            dn[k] -= h;
            let fd = (kl_categorical(&softmax(&up), &q).unwrap()
                - kl_categorical(&softmax(&dn), &q).unwrap())
                / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let env = ToyEnv::coordination(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PolicyTable::random(&env, 1.0, &mut rng);
        let hyper = GrpoHyper {
            learning_rate: 0.0,
            ..GrpoHyper::default()
        };
        let (q, _) = grpo_step(&p, &env, &hyper, &p, 3).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn step_is_reproducible() {
        let env = ToyEnv::coordination(3);
        let p = PolicyTable::uniform(&env);
        let h = GrpoHyper::default();
        assert_eq!(grpo_step(&p, &env, &h, &p, 9).unwrap(), grpo_step(&p, &env, &h, &p, 9).unwrap());
    }
}
