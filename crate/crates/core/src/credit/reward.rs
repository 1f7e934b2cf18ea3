use serde::{Deserialize, Serialize};

use crate::model::{Answer, RewardComponents, Role, SafetyFlag, Trajectory};

/// Weights of the joint reward and the linear per-round cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub w_acc: f64,
    pub w_knw: f64,
    pub w_safe: f64,
    pub w_cons: f64,
    pub gamma: f64,
    pub cost_per_round: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_acc: 1.0,
            w_knw: 0.2,
            w_safe: 0.5,
            w_cons: 0.3,
            gamma: 0.05,
            cost_per_round: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("w_acc", self.w_acc),
            ("w_knw", self.w_knw),
            ("w_safe", self.w_safe),
            ("w_cons", self.w_cons),
            ("gamma", self.gamma),
            ("cost_per_round", self.cost_per_round),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// `w·r − γ·cost_per_round·rounds`.
///
/// `r_cons` enters with the sign of its weight, exactly like the other terms.
pub fn joint_reward(c: &RewardComponents, rounds: u32, w: &RewardWeights) -> f64 {
    w.w_acc * c.r_acc + w.w_knw * c.r_knw + w.w_safe * c.r_safe + w.w_cons * c.r_cons
        - w.gamma * w.cost_per_round * f64::from(rounds)
}

fn modal(votes: impl Iterator<Item = Answer>) -> Option<Answer> {
    let mut tally = std::collections::BTreeMap::new();
    for v in votes {
        *tally.entry(v).or_insert(0usize) += 1;
    }
    let mut best: Option<(Answer, usize)> = None;
    for (a, n) in tally {
        if best.as_ref().map_or(true, |(_, b)| n > *b) {
            best = Some((a, n));
        }
    }
    best.map(|(a, _)| a)
}

/// Reward components of a finished debate.
///
/// * `r_acc`: 1 when the final answer equals `gold`.
/// * `r_knw`: share of knowledge-agent citations made in messages whose answer
///   equals the final answer (0 without citations).
/// * `r_safe`: 1 unless a `Violation` flag was raised and the final answer is
///   not a refusal.
/// * `r_cons`: 1 when reasoning and safety agents conflict in the last round:
///   a safety flag of at least `Concern`, or differing modal answers.
pub fn score_trajectory(traj: &Trajectory, gold: Option<&str>) -> RewardComponents {
    let final_answer = traj.final_answer.clone().unwrap_or(Answer::Refusal);
    let messages = traj.all_messages();

    let r_acc = match (final_answer.label(), gold) {
        (Some(f), Some(g)) if f == g => 1.0,
        _ => 0.0,
    };

    let (supporting, total) = messages
        .iter()
        .filter(|m| m.role == Role::Knowledge)
        .fold((0usize, 0usize), |(s, t), m| {
            let n = m.citations.len();
            if m.as_answer() == final_answer {
                (s + n, t + n)
            } else {
                (s, t + n)
            }
        });
    let r_knw = if total == 0 {
        0.0
    } else {
        supporting as f64 / total as f64
    };

    let violated = messages.iter().any(|m| m.safety_flag == SafetyFlag::Violation);
    let r_safe = if violated && !final_answer.is_refusal() {
        0.0
    } else {
        1.0
    };

    let last = traj.rounds_used;
    let in_last = |role: Role| messages.iter().filter(move |m| m.round == last && m.role == role);
    let reasoning = modal(in_last(Role::Reasoning).map(|m| m.as_answer()));
    let safety = modal(in_last(Role::Safety).map(|m| m.as_answer()));
    let flagged = in_last(Role::Safety).any(|m| m.safety_flag >= SafetyFlag::Concern);
    let conflict = match (&reasoning, &safety) {
        (Some(r), Some(s)) => flagged || r != s,
        _ => false,
    };

    RewardComponents {
        r_acc,
        r_knw,
        r_safe,
        r_cons: if conflict { 1.0 } else { 0.0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn comps(r_acc: f64, r_knw: f64, r_safe: f64, r_cons: f64) -> RewardComponents {
        RewardComponents {
            r_acc,
            r_knw,
            r_safe,
            r_cons,
        }
    }

    #[test]
    fn reward_examples() {
        let only_acc = RewardWeights {
            w_acc: 1.0,
            w_knw: 0.0,
            w_safe: 0.0,
            w_cons: 0.0,
            gamma: 0.0,
            cost_per_round: 1.0,
        };
        assert_eq!(joint_reward(&comps(1.0, 0.0, 0.0, 0.0), 1, &only_acc), 1.0);

        let w = RewardWeights::default();
        // 1 + 0.2*0.5 + 0.5*1 + 0 - 0.05*3
        let r = joint_reward(&comps(1.0, 0.5, 1.0, 0.0), 3, &w);
        assert!((r - 1.45).abs() < 1e-12);
        let cost = joint_reward(&comps(0.0, 0.0, 0.0, 0.0), 2, &w);
        assert!((cost + 0.10).abs() < 1e-12);
    }

    #[test]
    fn negative_weight_rejected() {
        let w = RewardWeights {
            gamma: -1.0,
            ..RewardWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
