mod common;

use std::sync::{Arc, Mutex};

use sag_core::backends::{AgentBackend, Document, FnBackend, NoRetrieval, TfIdfIndex};
use sag_core::engine::{run_debate, DebateOptions, EngineError};
use sag_core::model::{validate_group_config, Answer, GroupConfig, InteractionMode, Role, TerminationReason};

use common::*;

#[test]
fn unanimous_panel_stops_after_one_round() {
    let cfg = config(3, 3, 2, 2, 3);
    let backends = panel(&cfg, |a| match a.role {
        Role::Safety => script([audit_clean()]),
        _ => script([says("B")]),
    });
    let out = run_debate(&mcq("q", "Which drug?", "B"), &cfg, &backends, &NoRetrieval, &DebateOptions::default())
        .unwrap();
    assert_eq!(out.final_answer, Answer::Label("B".into()));
    assert_eq!(out.trajectory.rounds_used, 1);
    assert_eq!(out.termination_reason, TerminationReason::Converged);
    assert_eq!(out.per_round.len(), 1);
}

#[test]
fn judge_follows_cited_evidence_over_reasoning_majority() {
    let corpus = vec![
        Document {
            doc_id: "guideline".into(),
            text: "Anticoagulation is first line for this presentation.".into(),
            source_tag: "guideline".into(),
        },
        Document {
            doc_id: "other".into(),
            text: "Unrelated passage about vaccines.".into(),
            source_tag: "review".into(),
        },
    ];
    let index = TfIdfIndex::new(corpus);
    let cfg = config(3, 3, 2, 2, 3);
    let backends = panel(&cfg, |a| match a.role {
        Role::Reasoning => script([says("A")]),
        Role::Knowledge => script([says_citing("C", "guideline")]),
        Role::Safety => script([audit_clean()]),
        Role::Judge => script([says("C")]),
    });
    let item = mcq("q", "Which anticoagulation presentation is first line?", "C");
    let out = run_debate(&item, &cfg, &backends, &index, &DebateOptions::default()).unwrap();
    assert_eq!(out.final_answer, Answer::Label("C".into()));
    // Split debaters never reach unanimity; the unchanged second round is a fixed point.
    assert_eq!(out.trajectory.rounds_used, 2);
    assert!(out.trajectory.state.evidence.iter().any(|p| p.doc_id == "guideline"));
    let cited: Vec<_> = out
        .trajectory
        .all_messages()
        .iter()
        .filter(|m| m.role == Role::Knowledge)
        .map(|m| m.citations.clone())
        .collect();
    assert!(cited.iter().all(|c| c == &vec!["guideline".to_string()]));
}

#[test]
fn without_judges_the_majority_decides() {
    let mut cfg = GroupConfig::with_counts(3, 0, 0, 2);
    cfg.ablation.extend([Role::Judge, Role::Knowledge, Role::Safety]);
    let cfg = validate_group_config(cfg).unwrap();
    let backends = panel(&cfg, |a| match a.index {
        3 => script([says("B")]),
        _ => script([says("A")]),
    });
    let out = run_debate(&mcq("q", "Pick.", "A"), &cfg, &backends, &NoRetrieval, &DebateOptions::default()).unwrap();
    assert_eq!(out.final_answer, Answer::Label("A".into()));
    assert!(out.trajectory.all_messages().iter().all(|m| m.role == Role::Reasoning));
}

#[test]
fn knowledge_agents_see_retrieved_passages() {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let index = TfIdfIndex::new(vec![Document {
        doc_id: "d7".into(),
        text: "Thrombolysis window is four and a half hours.".into(),
        source_tag: "stroke".into(),
    }]);
    let cfg = config(1, 1, 1, 1, 2);
    let backends = panel(&cfg, |a| match a.role {
        Role::Knowledge => {
            let seen = Arc::clone(&seen);
            Arc::new(FnBackend::new(1, move |req| {
                seen.lock().unwrap().push(req.prompt.clone());
                Ok(says_citing("B", "d7"))
            })) as Arc<dyn AgentBackend>
        }
        Role::Safety => script([audit_clean()]),
        _ => script([says("B")]),
    });
    let item = mcq("q", "What is the thrombolysis window?", "B");
    run_debate(&item, &cfg, &backends, &index, &DebateOptions::default()).unwrap();
    let prompts = seen.lock().unwrap();
    assert!(!prompts.is_empty());
    assert!(prompts.iter().all(|p| p.contains("[d7]") && p.contains("four and a half hours")));
}

#[test]
fn citations_to_unknown_passages_are_dropped() {
    let cfg = config(1, 1, 1, 1, 2);
    let backends = panel(&cfg, |a| match a.role {
        Role::Knowledge => script([says_citing("B", "invented")]),
        Role::Safety => script([audit_clean()]),
        _ => script([says("B")]),
    });
    let out = run_debate(&mcq("q", "Pick.", "B"), &cfg, &backends, &NoRetrieval, &DebateOptions::default()).unwrap();
    assert!(out.trajectory.all_messages().iter().all(|m| m.citations.is_empty()));
}

#[test]
fn majority_vote_mode_is_a_single_round() {
    let mut cfg = GroupConfig::default();
    cfg.interaction_mode = InteractionMode::MajorityVote;
    let cfg = validate_group_config(cfg).unwrap();
    let backends = panel(&cfg, |a| match (a.role, a.index) {
        (Role::Reasoning, _) | (Role::Knowledge, 1 | 2) => script([says("D")]),
        (Role::Safety, _) => script([audit_clean()]),
        _ => script([says("A")]),
    });
    let out = run_debate(&mcq("q", "Pick.", "D"), &cfg, &backends, &NoRetrieval, &DebateOptions::default()).unwrap();
    assert_eq!(out.final_answer, Answer::Label("D".into()));
    assert_eq!(out.trajectory.rounds_used, 1);
    assert_eq!(out.trajectory.total_calls(), 10);
}

#[test]
fn history_is_ordered_by_round_then_role() {
    let cfg = config(2, 2, 1, 1, 3);
    let backends = panel(&cfg, |a| match (a.role, a.index) {
        (Role::Reasoning, 1) => script([says("A"), says("B")]),
        (Role::Safety, _) => script([audit_clean()]),
        _ => script([says("B")]),
    });
    let out = run_debate(&mcq("q", "Pick.", "B"), &cfg, &backends, &NoRetrieval, &DebateOptions::default()).unwrap();
    let keys: Vec<_> = out.trajectory.all_messages().iter().map(|m| (m.round, m.agent_id)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn exhausted_script_surfaces_as_backend_error() {
    let cfg = config(1, 1, 1, 1, 3);
    let backends = panel(&cfg, |a| match a.role {
        Role::Reasoning => Arc::new(sag_core::backends::ScriptedBackend::new([says("A")])),
        Role::Safety => script([audit_clean()]),
        _ => script([says("B")]),
    });
    let err = run_debate(&mcq("q", "Pick.", "B"), &cfg, &backends, &NoRetrieval, &DebateOptions::default())
        .unwrap_err();
    assert!(matches!(err, EngineError::BackendUnavailable { .. }), "{err}");
}

#[test]
fn unparseable_output_is_a_protocol_violation() {
    let cfg = config(1, 1, 1, 1, 2);
    let backends = panel(&cfg, |a| match a.role {
        Role::Reasoning => script(["no answer here at all"]),
        Role::Safety => script([audit_clean()]),
        _ => script([says("B")]),
    });
    let err = run_debate(&mcq("q", "Pick.", "B"), &cfg, &backends, &NoRetrieval, &DebateOptions::default())
        .unwrap_err();
    assert!(matches!(err, EngineError::ProtocolViolation { .. }), "{err}");
}
