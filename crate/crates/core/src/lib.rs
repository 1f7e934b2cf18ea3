//! Small-agent-group debate engine, credit assignment math, and evaluation harness.
//!
//! * [`model`]: agents, configurations, messages, and trajectories.
//! * [`backends`]: scripted and HTTP chat agents, output parsing, tf-idf retrieval.
//! * [`engine`]: the multi-round debate protocol and majority-vote baseline.
//! * [`credit`]: joint reward, group-relative advantages, counterfactual credit, toy trainers.
//! * [`metrics`]: accuracy, fairness, safety, consistency, and cost statistics.
//! * [`bench`]: datasets, perturbations, and the evaluation run matrix.

pub mod backends;
pub mod bench;
pub mod credit;
pub mod engine;
pub mod metrics;
pub mod model;
pub mod par;
