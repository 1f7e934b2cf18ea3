//! The hybrid debate protocol.
//!
//! Each round: reasoning and knowledge agents argue in parallel over the
//! shared history, safety agents audit the round, judges adjudicate a new
//! proposal, and [`check_termination`] decides whether to go on. A
//! `Violation` audit halts the debate with a refusal. The majority-vote
//! baseline asks every agent once and tallies the answers.

mod prompts;
mod termination;
mod vote;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    parse_agent_output, BackendError, BackendSet, CompletionRequest, ParseError, RequestContext,
    RetrievalBackend,
};
use crate::bench::BenchmarkItem;
use crate::model::{
    new_trajectory, AgentId, AgentMessage, Answer, DebateState, InteractionMode, Role, SafetyFlag,
    Step, TerminationReason, Trajectory, TrajectoryError, ValidatedConfig,
};
use crate::par;

pub use prompts::{fill, PromptTemplates, RoleTemplate};
pub use termination::{check_termination, TerminationDecision};
pub use vote::{adjudicate, majority_vote, VoteError};

/// Everything that happened in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: u32,
    pub debater_messages: Vec<AgentMessage>,
    pub audit: Vec<AgentMessage>,
    pub judge_messages: Vec<AgentMessage>,
    /// Panel decision from the judges; `None` when judges are ablated.
    pub adjudication: Option<AgentMessage>,
    /// Proposal carried into the next round (adjudication or majority fallback).
    pub proposal: Option<Answer>,
    pub converged: bool,
}

impl RoundResult {
    pub fn all_messages(&self) -> impl Iterator<Item = &AgentMessage> {
        self.debater_messages
            .iter()
            .chain(&self.audit)
            .chain(&self.judge_messages)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebateOutcome {
    pub final_answer: Answer,
    pub trajectory: Trajectory,
    pub termination_reason: TerminationReason,
    pub per_round: Vec<RoundResult>,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("backend for {agent} unavailable: {source}")]
    BackendUnavailable {
        agent: AgentId,
        #[source]
        source: BackendError,
    },
    #[error("output of {agent} could not be parsed: {source}")]
    ProtocolViolation {
        agent: AgentId,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

/// How call durations are charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    /// Wall-clock measurement.
    #[default]
    Measured,
    /// Backend-reported latencies summed as if calls ran one after another;
    /// engine overhead is not charged. Makes trajectories reproducible.
    Simulated,
}

#[derive(Debug, Clone)]
pub struct DebateOptions {
    pub templates: PromptTemplates,
    pub timing: Timing,
    /// Worker budget for the concurrent debater calls of one round.
    pub workers: usize,
    pub run: u32,
    /// Key for per-conversation backend state; defaults to `{item id}#{run}`.
    pub conversation: Option<String>,
}

impl Default for DebateOptions {
    fn default() -> Self {
        Self {
            templates: PromptTemplates::default(),
            timing: Timing::Measured,
            workers: 1,
            run: 0,
            conversation: None,
        }
    }
}

struct CallRecord {
    message: AgentMessage,
    prompt_tokens: u64,
    completion_tokens: u64,
    elapsed: Duration,
}

/// Maps a free-form answer onto the item's option label when it names one.
fn normalize_answer(answer: &str, labels: &[String]) -> String {
    let trimmed = answer
        .trim()
        .trim_matches(|c: char| matches!(c, '(' | ')' | '[' | ']' | '.' | '*' | '"'))
        .trim();
    labels
        .iter()
        .find(|l| l.eq_ignore_ascii_case(trimmed))
        .cloned()
        .unwrap_or_else(|| trimmed.to_string())
}

fn format_messages<'a>(messages: impl Iterator<Item = &'a AgentMessage>) -> String {
    let mut out = String::new();
    for m in messages {
        let _ = write!(out, "[round {}] {} ({}): ", m.round, m.agent_id, m.role);
        if m.refusal {
            out.push_str("declines to answer");
        } else {
            let _ = write!(out, "answer {} (confidence {:.2})", m.answer, m.confidence);
        }
        if !m.citations.is_empty() {
            let _ = write!(out, " citing {}", m.citations.join(", "));
        }
        if m.safety_flag != SafetyFlag::None {
            let _ = write!(out, " [safety: {:?}]", m.safety_flag);
        }
        if !m.rationale.is_empty() {
            let _ = write!(out, " - {}", m.rationale.replace('\n', " "));
        }
        out.push('\n');
    }
    if out.is_empty() {
        out.push_str("(none)\n");
    }
    out
}

struct Debate<'a> {
    item: &'a BenchmarkItem,
    cfg: &'a ValidatedConfig,
    backends: &'a BackendSet,
    opts: &'a DebateOptions,
    conversation: String,
    labels: Vec<String>,
    question: String,
    options: String,
}

impl<'a> Debate<'a> {
    fn call(
        &self,
        agent: AgentId,
        state: &DebateState,
        round: u32,
        current_round: &[AgentMessage],
    ) -> Result<CallRecord, EngineError> {
        let backend = self
            .backends
            .get(agent)
            .map_err(|source| EngineError::BackendUnavailable { agent, source })?;

        let mut vars = BTreeMap::new();
        vars.insert("round", round.to_string());
        vars.insert("question", self.question.clone());
        vars.insert("options", self.options.clone());
        vars.insert(
            "proposal",
            state.proposal.clone().unwrap_or_else(|| "(none yet)".into()),
        );
        vars.insert("history", format_messages(state.history.iter()));
        vars.insert("current_round", format_messages(current_round.iter()));
        if agent.role == Role::Knowledge {
            let evidence = if state.evidence.is_empty() {
                "(no passages retrieved)".to_string()
            } else {
                state
                    .evidence
                    .iter()
                    .map(|p| format!("[{}] ({}) {}", p.doc_id, p.source_tag, p.text))
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            vars.insert("evidence", evidence);
        }
        let (system, prompt) = self.opts.templates.render(agent.role, &vars);

        let request = CompletionRequest {
            agent,
            role: agent.role,
            system,
            prompt,
            decoding: self.cfg.decoding().clone(),
            context: RequestContext {
                conversation: self.conversation.clone(),
                item_id: self.item.id.clone(),
                run: self.opts.run,
                round,
                gold: self.item.gold.clone(),
                option_labels: self.labels.clone(),
            },
        };
        let started = Instant::now();
        let completion = backend
            .complete(&request)
            .map_err(|source| EngineError::BackendUnavailable { agent, source })?;
        let measured = started.elapsed();
        let elapsed = match self.opts.timing {
            Timing::Measured => measured,
            Timing::Simulated => completion.simulated_latency.unwrap_or(measured),
        };

        let body = parse_agent_output(&completion.text, agent.role)
            .map_err(|source| EngineError::ProtocolViolation { agent, source })?;
        let mut message = body.into_message(agent, round);
        if !message.refusal {
            message.answer = normalize_answer(&message.answer, &self.labels);
        }
        // Citations must point at passages present in the trajectory.
        message
            .citations
            .retain(|c| state.evidence.iter().any(|p| &p.doc_id == c));

        Ok(CallRecord {
            message,
            prompt_tokens: completion.prompt_tokens,
            completion_tokens: completion.completion_tokens,
            elapsed,
        })
    }
}

struct Ledger {
    trajectory: Trajectory,
    call_time: Duration,
}

impl Ledger {
    fn record(&mut self, calls: Vec<CallRecord>) -> Vec<AgentMessage> {
        calls
            .into_iter()
            .map(|c| {
                self.trajectory
                    .token_usage
                    .entry(c.message.agent_id)
                    .or_default()
                    .add(c.prompt_tokens, c.completion_tokens);
                self.call_time += c.elapsed;
                c.message
            })
            .collect()
    }
}

/// Runs one debate over `item`.
pub fn run_debate(
    item: &BenchmarkItem,
    cfg: &ValidatedConfig,
    backends: &BackendSet,
    retrieval: &dyn RetrievalBackend,
    opts: &DebateOptions,
) -> Result<DebateOutcome, EngineError> {
    let started = Instant::now();
    if let Some(agent) = backends.missing_for(cfg) {
        return Err(EngineError::BackendUnavailable {
            agent,
            source: BackendError::Unbound(agent),
        });
    }

    let debate = Debate {
        item,
        cfg,
        backends,
        opts,
        conversation: opts
            .conversation
            .clone()
            .unwrap_or_else(|| format!("{}#{}", item.id, opts.run)),
        labels: item.option_labels(),
        question: item.question_text(),
        options: item.options_text(),
    };

    let mut trajectory = new_trajectory(&item.stem, cfg)?;
    trajectory.item_ref = item.id.clone();
    let mut ledger = Ledger {
        trajectory,
        call_time: Duration::ZERO,
    };

    let mut state = DebateState::new(item.stem.clone());
    if cfg.is_enabled(Role::Knowledge) {
        let query = format!(
            "{}\n{}",
            item.stem,
            item.options.iter().map(|o| o.text.as_str()).collect::<Vec<_>>().join(" ")
        );
        state.evidence = retrieval.retrieve(&query, cfg.config().retrieval_k);
    }

    let (final_answer, reason, per_round) = match cfg.mode() {
        InteractionMode::MajorityVote => majority_round(&debate, &mut state, &mut ledger)?,
        InteractionMode::Debate => debate_rounds(&debate, &mut state, &mut ledger)?,
    };

    state.terminated = true;
    state.termination_reason = Some(reason);
    let mut trajectory = ledger.trajectory;
    trajectory.rounds_used = state.round;
    trajectory.final_answer = Some(final_answer.clone());
    trajectory.state = state;
    trajectory.call_time = ledger.call_time.as_secs_f64();
    trajectory.wall_time = match opts.timing {
        Timing::Measured => started.elapsed().as_secs_f64(),
        Timing::Simulated => trajectory.call_time,
    };

    Ok(DebateOutcome {
        final_answer,
        trajectory,
        termination_reason: reason,
        per_round,
    })
}

type RoundsOutcome = (Answer, TerminationReason, Vec<RoundResult>);

fn majority_round(
    debate: &Debate<'_>,
    state: &mut DebateState,
    ledger: &mut Ledger,
) -> Result<RoundsOutcome, EngineError> {
    state.round = 1;
    let snapshot = state.clone();
    let agents = debate.cfg.agents().to_vec();
    let calls = par::map_ordered(&agents, debate.opts.workers, |&a| {
        debate.call(a, &snapshot, 1, &[])
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let messages = ledger.record(calls);

    let final_answer = match majority_vote(&messages) {
        Ok(label) => Answer::Label(label),
        Err(VoteError::AllRefused) => Answer::Refusal,
    };
    state.proposal = final_answer.label().map(str::to_string);
    state.history.extend(messages.iter().cloned());
    ledger.trajectory.states_and_actions.push(Step {
        state: snapshot,
        joint_action: messages.clone(),
    });

    let (debaters, rest): (Vec<_>, Vec<_>) = messages.into_iter().partition(|m| m.role.is_debater());
    let (audit, judges): (Vec<_>, Vec<_>) = rest.into_iter().partition(|m| m.role == Role::Safety);
    let round = RoundResult {
        round: 1,
        debater_messages: debaters,
        audit,
        judge_messages: judges,
        adjudication: None,
        proposal: Some(final_answer.clone()),
        converged: false,
    };
    // Single shot: the one-round budget is spent.
    Ok((final_answer, TerminationReason::MaxRounds, vec![round]))
}

fn debate_rounds(
    debate: &Debate<'_>,
    state: &mut DebateState,
    ledger: &mut Ledger,
) -> Result<RoundsOutcome, EngineError> {
    let cfg = debate.cfg;
    let debaters: Vec<AgentId> = cfg.agents().iter().copied().filter(|a| a.role.is_debater()).collect();
    let auditors: Vec<AgentId> = cfg.agents_with_role(Role::Safety).collect();
    let judges: Vec<AgentId> = cfg.agents_with_role(Role::Judge).collect();

    let mut per_round: Vec<RoundResult> = Vec::new();
    loop {
        let t = state.round + 1;
        state.round = t;
        let snapshot = state.clone();

        // Flat exchange: every debater sees only history through round t-1.
        let calls = par::map_ordered(&debaters, debate.opts.workers, |&a| {
            debate.call(a, &snapshot, t, &[])
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        let debater_messages = ledger.record(calls);

        // Sequential audit, then adjudication.
        let mut round_so_far = debater_messages.clone();
        let mut audit = Vec::with_capacity(auditors.len());
        for &a in &auditors {
            let call = debate.call(a, &snapshot, t, &debater_messages)?;
            audit.extend(ledger.record(vec![call]));
        }
        round_so_far.extend(audit.iter().cloned());

        let mut judge_messages = Vec::with_capacity(judges.len());
        for &a in &judges {
            let call = debate.call(a, &snapshot, t, &round_so_far)?;
            judge_messages.extend(ledger.record(vec![call]));
        }

        let halted = audit.iter().any(|m| m.safety_flag == SafetyFlag::Violation);
        let (adjudication, proposal) = if !judge_messages.is_empty() {
            let adj = adjudicate(&judge_messages, &audit);
            let proposal = adj.as_answer();
            (Some(adj), proposal)
        } else if halted {
            (None, Answer::Refusal)
        } else {
            let proposal = match majority_vote(&debater_messages) {
                Ok(label) => Answer::Label(label),
                Err(VoteError::AllRefused) => Answer::Refusal,
            };
            (None, proposal)
        };

        let mut joint_action = debater_messages.clone();
        joint_action.extend(audit.iter().cloned());
        joint_action.extend(judge_messages.iter().cloned());
        state.history.extend(joint_action.iter().cloned());
        state.proposal = proposal.label().map(str::to_string);
        ledger.trajectory.states_and_actions.push(Step {
            state: snapshot,
            joint_action,
        });

        let mut result = RoundResult {
            round: t,
            debater_messages,
            audit,
            judge_messages,
            adjudication,
            proposal: Some(proposal.clone()),
            converged: false,
        };

        if halted {
            per_round.push(result);
            return Ok((Answer::Refusal, TerminationReason::SafetyHalt, per_round));
        }

        let decision = check_termination(state, per_round.last(), &result, cfg);
        if let TerminationDecision::Stop(reason) = decision {
            result.converged = reason == TerminationReason::Converged;
            per_round.push(result);
            return Ok((proposal, reason, per_round));
        }
        per_round.push(result);
    }
}

/// Plain-text transcript of a trajectory for human audit.
pub fn render_transcript(trajectory: &Trajectory) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "item: {}", trajectory.item_ref);
    let _ = writeln!(out, "query: {}", trajectory.state.query);
    if !trajectory.state.evidence.is_empty() {
        out.push_str("evidence:\n");
        for p in &trajectory.state.evidence {
            let _ = writeln!(out, "  [{}] score {:.4}: {}", p.doc_id, p.score, p.text);
        }
    }
    for step in &trajectory.states_and_actions {
        let round = step.joint_action.first().map_or(0, |m| m.round);
        let _ = writeln!(
            out,
            "-- round {round} (proposal: {}) --",
            step.state.proposal.as_deref().unwrap_or("none")
        );
        out.push_str(&format_messages(step.joint_action.iter()));
    }
    let _ = writeln!(
        out,
        "final: {} after {} round(s), {:?}",
        trajectory
            .final_answer
            .as_ref()
            .map_or_else(|| "-".to_string(), ToString::to_string),
        trajectory.rounds_used,
        trajectory.state.termination_reason
    );
    out
}
