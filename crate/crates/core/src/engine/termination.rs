use std::collections::HashMap;

use crate::model::{AgentId, AgentMessage, Answer, DebateState, SafetyFlag, TerminationReason, ValidatedConfig};

use super::RoundResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationDecision {
    Continue,
    Stop(TerminationReason),
}

/// Unanimous debaters agreeing with the reference proposal.
///
/// The reference is the proposal adjudicated in the previous round; in the
/// first round, where no proposal exists yet, it is this round's adjudication.
fn unanimous_with_proposal(prev: Option<&RoundResult>, curr: &RoundResult) -> bool {
    let reference = match prev {
        Some(p) => p.proposal.as_ref(),
        None => curr.proposal.as_ref(),
    };
    let Some(Answer::Label(reference)) = reference else {
        return false;
    };
    let mut votes = curr.debater_messages.iter().map(AgentMessage::vote);
    match votes.next() {
        Some(Some(first)) => first == reference && votes.all(|v| v == Some(first)),
        _ => false,
    }
}

/// No answer changed since `prev` and no flag of at least `Concern` was newly raised.
fn fixed_point(prev: &RoundResult, curr: &RoundResult) -> bool {
    let before: HashMap<AgentId, &AgentMessage> =
        prev.all_messages().map(|m| (m.agent_id, m)).collect();
    curr.all_messages().all(|m| match before.get(&m.agent_id) {
        Some(p) => {
            let same_answer = p.as_answer() == m.as_answer();
            let newly_flagged = m.safety_flag >= SafetyFlag::Concern && m.safety_flag > p.safety_flag;
            same_answer && !newly_flagged
        }
        None => false,
    })
}

/// Decides whether the debate stops after `curr`.
pub fn check_termination(
    state: &DebateState,
    prev: Option<&RoundResult>,
    curr: &RoundResult,
    cfg: &ValidatedConfig,
) -> TerminationDecision {
    debug_assert!(curr.round >= 1);
    if unanimous_with_proposal(prev, curr) || prev.is_some_and(|p| fixed_point(p, curr)) {
        return TerminationDecision::Stop(TerminationReason::Converged);
    }
    if curr.round.max(state.round) >= cfg.max_rounds() {
        return TerminationDecision::Stop(TerminationReason::MaxRounds);
    }
    TerminationDecision::Continue
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_group_config, GroupConfig, Role};

    fn msg(agent: &str, round: u32, answer: &str) -> AgentMessage {
        let agent_id: AgentId = agent.parse().unwrap();
        AgentMessage {
            agent_id,
            role: agent_id.role,
            round,
            answer: answer.into(),
            rationale: String::new(),
            confidence: 0.5,
            citations: vec![],
            safety_flag: SafetyFlag::None,
            refusal: false,
        }
    }

    fn round(t: u32, debaters: &[(&str, &str)], proposal: &str) -> RoundResult {
        RoundResult {
            round: t,
            debater_messages: debaters.iter().map(|(a, x)| msg(a, t, x)).collect(),
            audit: vec![],
            judge_messages: vec![],
            adjudication: None,
            proposal: Some(Answer::Label(proposal.into())),
            converged: false,
        }
    }

    fn cfg(max_rounds: u32) -> ValidatedConfig {
        let mut c = GroupConfig::with_counts(2, 1, 0, 0);
        c.ablation = [Role::Safety, Role::Judge].into();
        c.max_rounds = max_rounds;
        validate_group_config(c).unwrap()
    }

    fn state(t: u32) -> DebateState {
        let mut s = DebateState::new("q");
        s.round = t;
        s
    }

    #[test]
    fn identical_rounds_converge() {
        let r1 = round(1, &[("R1", "B"), ("R2", "B"), ("K1", "B")], "B");
        let r2 = round(2, &[("R1", "B"), ("R2", "B"), ("K1", "B")], "B");
        assert_eq!(
            check_termination(&state(2), Some(&r1), &r2, &cfg(5)),
            TerminationDecision::Stop(TerminationReason::Converged)
        );
    }

    #[test]
    fn unanimous_first_round_converges() {
        let r1 = round(1, &[("R1", "B"), ("R2", "B"), ("K1", "B")], "B");
        assert_eq!(
            check_termination(&state(1), None, &r1, &cfg(5)),
            TerminationDecision::Stop(TerminationReason::Converged)
        );
    }

    #[test]
    fn budget_exhaustion() {
        let r4 = round(4, &[("R1", "A"), ("R2", "C"), ("K1", "B")], "A");
        let r5 = round(5, &[("R1", "C"), ("R2", "A"), ("K1", "B")], "A");
        assert_eq!(
            check_termination(&state(5), Some(&r4), &r5, &cfg(5)),
            TerminationDecision::Stop(TerminationReason::MaxRounds)
        );
    }

    #[test]
    fn a_flip_continues() {
        let r1 = round(1, &[("R1", "A"), ("R2", "A"), ("K1", "C")], "A");
        let r2 = round(2, &[("R1", "C"), ("R2", "A"), ("K1", "C")], "A");
        assert_eq!(
            check_termination(&state(2), Some(&r1), &r2, &cfg(5)),
            TerminationDecision::Continue
        );
    }

    #[test]
    fn new_concern_blocks_fixed_point() {
        let r1 = round(1, &[("R1", "A"), ("K1", "C")], "A");
        let mut r2 = round(2, &[("R1", "A"), ("K1", "C")], "A");
        let mut audit = msg("S1", 2, "A");
        audit.safety_flag = SafetyFlag::Concern;
        r2.audit.push(audit);
        let mut r1 = r1;
        r1.audit.push(msg("S1", 1, "A"));
        assert_eq!(
            check_termination(&state(2), Some(&r1), &r2, &cfg(5)),
            TerminationDecision::Continue
        );
    }
}
