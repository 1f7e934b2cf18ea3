use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use super::{
    word_count, AgentBackend, BackendDescriptor, BackendError, Completion, CompletionRequest,
    RequestContext,
};
use crate::model::AgentId;

/// Replays a fixed list of responses.
///
/// The cursor is kept per (conversation, agent), so concurrent debates over
/// different items never interleave and each debate replays the script from
/// the start.
pub struct ScriptedBackend {
    script: Vec<String>,
    repeat_last: bool,
    latency: Duration,
    sleep: bool,
    param_count: u64,
    cursors: Mutex<HashMap<(String, AgentId), usize>>,
}

impl ScriptedBackend {
    pub fn new<S: Into<String>>(script: impl IntoIterator<Item = S>) -> Self {
        Self::from_descriptor(&BackendDescriptor::scripted(script))
    }

    pub fn from_descriptor(d: &BackendDescriptor) -> Self {
        Self {
            script: d.script.clone(),
            repeat_last: d.repeat_last,
            latency: Duration::from_millis(d.latency_ms),
            sleep: d.sleep,
            param_count: d.param_count,
            cursors: Mutex::new(HashMap::new()),
        }
    }

    pub fn repeating(mut self) -> Self {
        self.repeat_last = true;
        self
    }

    pub fn with_latency(mut self, latency: Duration, sleep: bool) -> Self {
        self.latency = latency;
        self.sleep = sleep;
        self
    }

    pub fn with_param_count(mut self, params: u64) -> Self {
        self.param_count = params;
        self
    }

    fn next_entry(&self, request: &CompletionRequest) -> Result<&str, BackendError> {
        let key = (request.context.conversation.clone(), request.agent);
        let mut cursors = self.cursors.lock().expect("script cursor lock poisoned");
        let pos = cursors.entry(key).or_insert(0);
        let entry = match self.script.get(*pos) {
            Some(entry) => entry,
            None if self.repeat_last && !self.script.is_empty() => {
                return Ok(self.script.last().unwrap());
            }
            None => {
                return Err(BackendError::ScriptExhausted {
                    agent: request.agent,
                    served: *pos,
                })
            }
        };
        *pos += 1;
        Ok(entry)
    }
}

fn substitute(template: &str, ctx: &RequestContext) -> String {
    if !template.contains('{') {
        return template.to_string();
    }
    let mut out = template.replace("{round}", &ctx.round.to_string());
    if let Some(gold) = &ctx.gold {
        out = out.replace("{gold}", gold);
    }
    if !ctx.option_labels.is_empty() {
        let pick = &ctx.option_labels[ctx.run as usize % ctx.option_labels.len()];
        out = out.replace("{run_option}", pick);
    }
    out
}

impl AgentBackend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let text = substitute(self.next_entry(request)?, &request.context);
        if self.sleep && !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        Ok(Completion {
            prompt_tokens: word_count(&request.system) + word_count(&request.prompt),
            completion_tokens: word_count(&text),
            text,
            simulated_latency: Some(self.latency),
        })
    }

    fn param_count(&self) -> u64 {
        self.param_count
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecodingParams, Role};

    fn request(conversation: &str) -> CompletionRequest {
        CompletionRequest {
            agent: AgentId::new(Role::Reasoning, 1),
            role: Role::Reasoning,
            system: String::new(),
            prompt: "what is the answer".into(),
            decoding: DecodingParams::default(),
            context: RequestContext {
                conversation: conversation.into(),
                gold: Some("C".into()),
                option_labels: vec!["A".into(), "B".into()],
                run: 3,
                ..Default::default()
            },
        }
    }

    #[test]
    fn echoes_script_verbatim() {
        let b = ScriptedBackend::new(["{answer:B,confidence:0.9}"]);
        let out = b.complete(&request("c1")).unwrap();
        assert_eq!(out.text, "{answer:B,confidence:0.9}");
        assert_eq!(out.prompt_tokens, 4);
    }

    #[test]
    fn exhausts_after_script_end() {
        let b = ScriptedBackend::new(["only"]);
        b.complete(&request("c1")).unwrap();
        let err = b.complete(&request("c1")).unwrap_err();
        assert!(matches!(err, BackendError::ScriptExhausted { served: 1, .. }));
        // A different conversation starts from the top.
        assert_eq!(b.complete(&request("c2")).unwrap().text, "only");
    }

    #[test]
    fn repeat_last_never_exhausts() {
        let b = ScriptedBackend::new(["a", "b"]).repeating();
        let texts: Vec<String> = (0..4)
            .map(|_| b.complete(&request("c")).unwrap().text)
            .collect();
        assert_eq!(texts, ["a", "b", "b", "b"]);
    }

    #[test]
    fn placeholders_are_substituted() {
        let b = ScriptedBackend::new(["gold={gold} run={run_option} round={round}"]);
        assert_eq!(
            b.complete(&request("c")).unwrap().text,
            "gold=C run=B round=0"
        );
    }
}
