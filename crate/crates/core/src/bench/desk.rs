//! Rule-based stand-in agents for desk-scale runs.
//!
//! Each agent answers deterministically from the request: debaters pick the
//! gold label with a fixed probability (lowered when the prompt carries
//! injected noise or distractors), safety agents flag prompts that match a
//! harm lexicon, and judges side with the current round's debater majority.
//! "Random" draws are a hash of (conversation, agent, round, seed), so a run
//! is reproducible while repeated runs of one item differ.

use std::collections::BTreeMap;
use std::sync::{Arc, LazyLock};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::perturb::{distractor_sentences, filler_words};
use crate::backends::{
    word_count, AgentBackend, BackendError, BackendSet, Completion, CompletionRequest,
};
use crate::model::{AgentId, Role, ValidatedConfig};

static HARM: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(bleach|ammonia|overdose|lethal|poison\w*|without (a )?prescription|self-harm|suicide|untraceable|weapon\w*|kill\w*)\b")
        .unwrap()
});

static ROUND_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?m)^\[round (\d+)\] [RK]\d+ \((?:reasoning|knowledge)\): answer (\S+)").unwrap()
});

static EVIDENCE_ID: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^\[([^\]\s]+)\] \(").unwrap());

/// True when `text` mentions something from the harm lexicon.
pub fn mentions_harm(text: &str) -> bool {
    HARM.is_match(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskPanel {
    /// Chance that a debater names the gold label on a clean prompt.
    pub accuracy: f64,
    /// Accuracy lost when the prompt contains filler words.
    pub noise_penalty: f64,
    /// Accuracy lost when the prompt contains a distractor sentence.
    pub distractor_penalty: f64,
    pub param_count: u64,
    /// Reported latency per call.
    pub latency_ms: u64,
    /// Actually sleep for the latency.
    pub sleep: bool,
}

impl Default for DeskPanel {
    fn default() -> Self {
        Self {
            accuracy: 0.8,
            noise_penalty: 0.1,
            distractor_penalty: 0.2,
            param_count: 3_000_000_000,
            latency_ms: 0,
            sleep: false,
        }
    }
}

impl DeskPanel {
    /// One agent per enabled slot of `cfg`.
    pub fn backends(&self, cfg: &ValidatedConfig) -> BackendSet {
        BackendSet::for_each_agent(cfg, |_| Arc::new(DeskAgent { panel: *self }) as Arc<dyn AgentBackend>)
    }
}

struct DeskAgent {
    panel: DeskPanel,
}

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for &b in *p {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn block(answer: &str, rationale: &str, confidence: f64, citations: &[String], flag: &str, refusal: bool) -> String {
    let body = serde_json::json!({
        "answer": answer,
        "rationale": rationale,
        "confidence": confidence,
        "citations": citations,
        "safety_flag": flag,
        "refusal": refusal,
    });
    format!("```json\n{body}\n```")
}

fn question_part(prompt: &str) -> &str {
    // Every built-in template puts the question before the options; the
    // debate history after it must not influence these checks.
    prompt.split("\nOptions:").next().unwrap_or(prompt)
}

impl DeskAgent {
    fn majority_of_round(&self, request: &CompletionRequest) -> Option<String> {
        let round = request.context.round.to_string();
        let mut tally: BTreeMap<String, usize> = BTreeMap::new();
        for cap in ROUND_LINE.captures_iter(&request.prompt) {
            if cap[1] == round {
                *tally.entry(cap[2].to_string()).or_insert(0) += 1;
            }
        }
        let mut best: Option<(String, usize)> = None;
        for (label, n) in tally {
            if best.as_ref().map_or(true, |(_, b)| n > *b) {
                best = Some((label, n));
            }
        }
        best.map(|(l, _)| l)
    }

    fn respond(&self, request: &CompletionRequest) -> String {
        let ctx = &request.context;
        let agent = request.agent.to_string();
        let seed = request.decoding.seed.to_le_bytes();
        let h = fnv1a(&[ctx.conversation.as_bytes(), agent.as_bytes(), &ctx.round.to_le_bytes(), &seed]);
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let harmful = mentions_harm(question_part(&request.prompt));
        let labels = &ctx.option_labels;

        match request.role {
            Role::Safety => {
                if harmful {
                    block("", "The request could cause serious harm.", 0.9, &[], "violation", true)
                } else {
                    let answer = self
                        .majority_of_round(request)
                        .unwrap_or_else(|| "no_concern".into());
                    block(&answer, "No safety issue found.", 0.85, &[], "none", false)
                }
            }
            Role::Judge => {
                let answer = self
                    .majority_of_round(request)
                    .or_else(|| ctx.gold.clone())
                    .unwrap_or_else(|| "general_guidance".into());
                block(&answer, "Sides with the panel majority.", 0.7, &[], "none", false)
            }
            Role::Reasoning | Role::Knowledge => {
                if labels.is_empty() {
                    return if harmful {
                        "I cannot help with that request.".to_string()
                    } else {
                        block("general_guidance", "Offers general guidance.", 0.6, &[], "none", false)
                    };
                }
                let question = question_part(&request.prompt);
                let mut p = self.panel.accuracy;
                if filler_words().iter().any(|f| question.contains(&format!(" {f} "))) {
                    p -= self.panel.noise_penalty;
                }
                if distractor_sentences().iter().any(|s| question.contains(s.as_str())) {
                    p -= self.panel.distractor_penalty;
                }
                let gold = ctx.gold.clone().unwrap_or_else(|| labels[0].clone());
                let answer = if rng.gen::<f64>() < p {
                    gold
                } else {
                    let wrong: Vec<&String> = labels.iter().filter(|l| **l != gold).collect();
                    if wrong.is_empty() {
                        gold
                    } else {
                        wrong[rng.gen_range(0..wrong.len())].clone()
                    }
                };
                let citations: Vec<String> = if request.role == Role::Knowledge {
                    EVIDENCE_ID
                        .captures(&request.prompt)
                        .map(|c| vec![c[1].to_string()])
                        .unwrap_or_default()
                } else {
                    Vec::new()
                };
                let confidence = (rng.gen_range(50..=95) as f64) / 100.0;
                block(&answer, "Weighed the findings against each option.", confidence, &citations, "none", false)
            }
        }
    }
}

impl AgentBackend for DeskAgent {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let text = self.respond(request);
        let latency = Duration::from_millis(self.panel.latency_ms);
        if self.panel.sleep && !latency.is_zero() {
            std::thread::sleep(latency);
        }
        Ok(Completion {
            prompt_tokens: word_count(&request.system) + word_count(&request.prompt),
            completion_tokens: word_count(&text),
            text,
            simulated_latency: Some(latency),
        })
    }

    fn param_count(&self) -> u64 {
        self.panel.param_count
    }
}

/// Parameter counts of a desk panel bound to `cfg`.
pub fn desk_param_counts(panel: &DeskPanel, cfg: &ValidatedConfig) -> BTreeMap<AgentId, u64> {
    cfg.agents().iter().map(|&a| (a, panel.param_count)).collect()
}
