use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{AgentMessage, SafetyFlag};

#[derive(Debug, Clone, Copy, Error, PartialEq, Eq)]
pub enum VoteError {
    #[error("every message is a refusal")]
    AllRefused,
}

/// Modal answer among non-refusals; ties go to the lexicographically smallest label.
pub fn majority_vote(messages: &[AgentMessage]) -> Result<String, VoteError> {
    modal(messages.iter().filter_map(AgentMessage::vote)).ok_or(VoteError::AllRefused)
}

fn modal<'a>(votes: impl Iterator<Item = &'a str>) -> Option<String> {
    let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
    for v in votes {
        *tally.entry(v).or_insert(0) += 1;
    }
    // BTreeMap iterates labels ascending; keep the first maximum.
    let mut best: Option<(&str, usize)> = None;
    for (label, count) in tally {
        if best.map_or(true, |(_, c)| count > c) {
            best = Some((label, count));
        }
    }
    best.map(|(l, _)| l.to_string())
}

/// Combines the judges' messages into the panel decision.
///
/// A `Violation` from any audit forces a refusal. Otherwise the modal judge
/// answer wins (lexicographic tie-break). Confidence is the mean judge
/// confidence; rationale and citations come from the first judge holding the
/// winning answer.
///
/// # Panics
///
/// If `judge_messages` is empty; callers fall back to [`majority_vote`].
pub fn adjudicate(judge_messages: &[AgentMessage], audits: &[AgentMessage]) -> AgentMessage {
    let first = judge_messages
        .first()
        .expect("adjudicate needs at least one judge message");
    let confidence =
        judge_messages.iter().map(|m| m.confidence).sum::<f64>() / judge_messages.len() as f64;
    let halted = audits.iter().any(|a| a.safety_flag == SafetyFlag::Violation);
    let winner = if halted {
        None
    } else {
        modal(judge_messages.iter().filter_map(AgentMessage::vote))
    };

    match winner {
        Some(answer) => {
            let source = judge_messages
                .iter()
                .find(|m| m.vote() == Some(answer.as_str()))
                .unwrap_or(first);
            AgentMessage {
                agent_id: source.agent_id,
                role: source.role,
                round: source.round,
                answer,
                rationale: source.rationale.clone(),
                confidence,
                citations: source.citations.clone(),
                safety_flag: judge_messages
                    .iter()
                    .map(|m| m.safety_flag)
                    .max()
                    .unwrap_or_default(),
                refusal: false,
            }
        }
        None => {
            let rationale = if halted {
                let flagged: Vec<String> = audits
                    .iter()
                    .filter(|a| a.safety_flag == SafetyFlag::Violation)
                    .map(|a| a.agent_id.to_string())
                    .collect();
                format!("safety violation flagged by {}", flagged.join(", "))
            } else {
                "all judges declined".to_string()
            };
            AgentMessage {
                agent_id: first.agent_id,
                role: first.role,
                round: first.round,
                answer: String::new(),
                rationale,
                confidence,
                citations: Vec::new(),
                safety_flag: if halted {
                    SafetyFlag::Violation
                } else {
                    SafetyFlag::None
                },
                refusal: true,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AgentId, Role};

    fn msg(role: Role, idx: u32, answer: &str) -> AgentMessage {
        AgentMessage {
            agent_id: AgentId::new(role, idx),
            role,
            round: 1,
            answer: answer.into(),
            rationale: format!("{role}{idx}"),
            confidence: 0.5,
            citations: vec![],
            safety_flag: SafetyFlag::None,
            refusal: answer.is_empty(),
        }
    }

    #[test]
    fn majority_examples() {
        let r = |a: &[&str]| {
            let msgs: Vec<_> = a
                .iter()
                .enumerate()
                .map(|(i, x)| msg(Role::Reasoning, i as u32 + 1, x))
                .collect();
            majority_vote(&msgs)
        };
        assert_eq!(r(&["B", "B", "A"]).unwrap(), "B");
        assert_eq!(r(&["B", "A"]).unwrap(), "A");
        assert_eq!(r(&["", ""]), Err(VoteError::AllRefused));
        assert_eq!(r(&["", "C"]).unwrap(), "C");
    }

    #[test]
    fn adjudication_examples() {
        let clean = vec![msg(Role::Safety, 1, "B")];
        let mut j1 = msg(Role::Judge, 1, "B");
        j1.confidence = 0.9;
        let mut j2 = msg(Role::Judge, 2, "B");
        j2.confidence = 0.7;
        let out = adjudicate(&[j1.clone(), j2.clone()], &clean);
        assert_eq!(out.answer, "B");
        assert!((out.confidence - 0.8).abs() < 1e-12);

        let split = adjudicate(&[msg(Role::Judge, 1, "C"), msg(Role::Judge, 2, "B")], &clean);
        assert_eq!(split.answer, "B");
        assert_eq!(split.agent_id, AgentId::new(Role::Judge, 2));

        let mut violation = msg(Role::Safety, 2, "B");
        violation.safety_flag = SafetyFlag::Violation;
        let halted = adjudicate(&[j1, j2], &[clean[0].clone(), violation]);
        assert!(halted.refusal);
        assert!(halted.answer.is_empty());
        assert_eq!(halted.safety_flag, SafetyFlag::Violation);
    }
}
