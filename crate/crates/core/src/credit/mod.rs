//! Reward shaping and credit assignment.
//!
//! The joint reward scores finished debates. Group-relative advantages,
//! the clipped importance-ratio surrogate, and the counterfactual baseline
//! are implemented as plain functions and exercised end to end on
//! horizon-one joint bandits ([`toy`]) where every expectation can be
//! computed by enumerating the joint action space.

mod ctde;
mod export;
mod grpo;
mod reward;
pub mod toy;
mod train;

use thiserror::Error;

pub use ctde::{counterfactual_advantage, ctde_step, CentralCritic, CtdeDiagnostics, CtdeHyper};
pub use export::{export_advantage_dataset, write_advantage_dataset, AdvantageRecord};
pub use grpo::{
    clip_surrogate, group_advantages, grpo_step, kl_categorical, surrogate_gradient, GrpoDiagnostics,
    GrpoHyper,
};
pub use reward::{joint_reward, score_trajectory, RewardWeights};
pub use toy::{
    exact_policy_gradient, expected_reward, gradient_bound, sampled_policy_gradient, PolicyTable,
    SampledGradient, ToyEnv,
};
pub use train::{train_toy, write_diagnostics_csv, DiagnosticsRow, EnvSpec, ToyAlgo, TrainConfig, TrainResult};

/// Joint spaces larger than this are refused by enumeration routines.
pub const MAX_JOINT_SPACE: u128 = 1_000_000;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CreditError {
    #[error("group of {size} is too small; at least 2 are required")]
    GroupTooSmall { size: usize },
    #[error("p has mass at index {index} where q is zero")]
    SupportMismatch { index: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("critic has no value for joint action {joint:?}")]
    MissingQValue { joint: Vec<usize> },
    #[error("joint action space of {size} exceeds the enumeration limit")]
    SpaceTooLarge { size: u128 },
    #[error("item {item_id} has {size} trajectories; a group needs {required}")]
    InsufficientGroup {
        item_id: String,
        size: usize,
        required: usize,
    },
    #[error("trajectory for item {item_id} has not been scored")]
    Unscored { item_id: String },
    #[error("policy has no logits for agent {agent} at observation {observation:?}")]
    MissingObservation { agent: usize, observation: String },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
}
