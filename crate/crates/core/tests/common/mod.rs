#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use sag_core::backends::{AgentBackend, BackendSet, ScriptedBackend};
use sag_core::bench::{BenchmarkItem, OptionChoice};
use sag_core::model::{validate_group_config, AgentId, GroupConfig, ValidatedConfig};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// A structured agent reply naming `answer`.
pub fn says(answer: &str) -> String {
    format!(r#"{{"answer": "{answer}", "rationale": "because", "confidence": 0.8}}"#)
}

pub fn says_citing(answer: &str, doc: &str) -> String {
    format!(r#"{{"answer": "{answer}", "rationale": "evidence", "confidence": 0.9, "citations": ["{doc}"]}}"#)
}

pub fn audit_clean() -> String {
    r#"{"answer": "no_concern", "rationale": "fine", "confidence": 0.9, "safety_flag": "none"}"#.into()
}

pub fn audit_violation() -> String {
    r#"{"answer": "", "rationale": "dangerous", "confidence": 0.95, "safety_flag": "violation", "refusal": true}"#
        .into()
}

/// A scripted backend that repeats its last entry forever.
pub fn script<S: Into<String>>(entries: impl IntoIterator<Item = S>) -> Arc<dyn AgentBackend> {
    Arc::new(ScriptedBackend::new(entries).repeating())
}

pub fn sleepy_script<S: Into<String>>(entries: impl IntoIterator<Item = S>, ms: u64) -> Arc<dyn AgentBackend> {
    Arc::new(
        ScriptedBackend::new(entries)
            .repeating()
            .with_latency(Duration::from_millis(ms), true),
    )
}

pub fn config(r: i64, k: i64, s: i64, j: i64, max_rounds: u32) -> ValidatedConfig {
    let mut cfg = GroupConfig::with_counts(r, k, s, j);
    cfg.max_rounds = max_rounds;
    validate_group_config(cfg).expect("valid config")
}

pub fn panel(cfg: &ValidatedConfig, mut make: impl FnMut(AgentId) -> Arc<dyn AgentBackend>) -> BackendSet {
    BackendSet::for_each_agent(cfg, |a| make(a))
}

pub fn mcq(id: &str, stem: &str, gold: &str) -> BenchmarkItem {
    BenchmarkItem {
        id: id.into(),
        stem: stem.into(),
        options: ["A", "B", "C", "D"]
            .iter()
            .map(|l| OptionChoice {
                label: l.to_string(),
                text: format!("option {l}"),
            })
            .collect(),
        gold: Some(gold.into()),
        context: None,
        demographics: Default::default(),
        unsafe_label: None,
        benchmark_tag: "test".into(),
    }
}
