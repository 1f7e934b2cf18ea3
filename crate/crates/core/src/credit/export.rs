use std::io::Write;

use serde::{Deserialize, Serialize};

use super::grpo::{group_advantages, GrpoHyper};
use super::reward::{joint_reward, RewardWeights};
use super::CreditError;
use crate::model::{RewardComponents, Trajectory};

/// One line of the advantage dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub item_id: String,
    pub trajectory: Trajectory,
    pub reward_total: f64,
    pub components: RewardComponents,
    pub advantage: f64,
    pub group_id: usize,
}

/// Groups scored trajectories by item and attaches group-relative advantages.
///
/// Groups keep the order in which their items first appear; `group_id` is that
/// position. Every group needs at least `hyper.group_size` members.
pub fn export_advantage_dataset(
    trajectories: &[Trajectory],
    weights: &RewardWeights,
    hyper: &GrpoHyper,
) -> Result<Vec<AdvantageRecord>, CreditError> {
    let mut groups: Vec<(&str, Vec<&Trajectory>)> = Vec::new();
    for t in trajectories {
        match groups.iter_mut().find(|(id, _)| *id == t.item_ref) {
            Some((_, members)) => members.push(t),
            None => groups.push((&t.item_ref, vec![t])),
        }
    }

    let mut out = Vec::with_capacity(trajectories.len());
    for (group_id, (item_id, members)) in groups.into_iter().enumerate() {
        if members.len() < hyper.group_size.max(2) {
            return Err(CreditError::InsufficientGroup {
                item_id: item_id.to_string(),
                size: members.len(),
                required: hyper.group_size.max(2),
            });
        }
        let scored = members
            .iter()
            .map(|t| {
                let c = t.reward_components.ok_or_else(|| CreditError::Unscored {
                    item_id: item_id.to_string(),
                })?;
                Ok((c, joint_reward(&c, t.rounds_used, weights)))
            })
            .collect::<Result<Vec<_>, CreditError>>()?;
        let rewards: Vec<f64> = scored.iter().map(|(_, r)| *r).collect();
        let advantages = group_advantages(&rewards, hyper.std_floor)?;
        for ((t, (components, reward_total)), advantage) in members.into_iter().zip(scored).zip(advantages) {
            out.push(AdvantageRecord {
                item_id: item_id.to_string(),
                trajectory: t.clone(),
                reward_total,
                components,
                advantage,
                group_id,
            });
        }
    }
    Ok(out)
}

/// Writes records as JSON lines.
pub fn write_advantage_dataset(records: &[AdvantageRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
