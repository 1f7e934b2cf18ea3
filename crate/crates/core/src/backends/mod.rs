//! Agent and retrieval backends.
//!
//! Agents talk to an [`AgentBackend`]: a deterministic [`ScriptedBackend`]
//! for tests and desk runs, an [`HttpChatBackend`] for any server speaking
//! the chat-completion JSON interface, or an [`FnBackend`] wrapping a
//! closure. Knowledge agents also query a [`RetrievalBackend`].

mod http;
mod parse;
mod retrieval;
mod scripted;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentId, DecodingParams, Role, ValidatedConfig};

pub use http::{HttpChatBackend, API_KEY_ENV};
pub use parse::{
    classify_response, is_refusal_text, parse_agent_output, MessageBody, ParseError, ResponseClass,
};
pub use retrieval::{
    load_corpus, Corpus, Document, NoRetrieval, RetrievalBackend, RetrievedPassage, TfIdfIndex,
};
pub use scripted::ScriptedBackend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    Scripted,
    HttpChat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 500,
            timeout_ms: 60_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based): doubles from the initial value.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(16);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor))
    }
}

fn default_param_count() -> u64 {
    3_000_000_000
}

/// How to reach one agent's model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: String,
    /// Model parameters, used for FLOPs estimates.
    #[serde(default = "default_param_count")]
    pub param_count: u64,
    /// Scripted responses, returned in order. `{gold}`, `{run_option}`
    /// and `{round}` are substituted from the request context.
    #[serde(default)]
    pub script: Vec<String>,
    /// Keep returning the last scripted entry instead of failing once exhausted.
    #[serde(default)]
    pub repeat_last: bool,
    /// Scripted call latency reported in simulated timing.
    #[serde(default)]
    pub latency_ms: u64,
    /// Actually sleep for `latency_ms` on each scripted call.
    #[serde(default)]
    pub sleep: bool,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl BackendDescriptor {
    pub fn scripted<S: Into<String>>(script: impl IntoIterator<Item = S>) -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint: None,
            model_name: "scripted".to_string(),
            param_count: default_param_count(),
            script: script.into_iter().map(Into::into).collect(),
            repeat_last: false,
            latency_ms: 0,
            sleep: false,
            retry: RetryPolicy::default(),
        }
    }

    pub fn http(endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::HttpChat,
            endpoint: Some(endpoint.into()),
            model_name: model_name.into(),
            param_count: default_param_count(),
            script: Vec::new(),
            repeat_last: false,
            latency_ms: 0,
            sleep: false,
            retry: RetryPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.param_count == 0 {
            return Err("param_count must be positive".into());
        }
        match self.kind {
            BackendKind::Scripted if self.script.is_empty() => {
                Err("scripted backend needs a non-empty script".into())
            }
            BackendKind::HttpChat
                if self.endpoint.as_deref().map_or(true, str::is_empty)
                    || self.model_name.is_empty() =>
            {
                Err("http backend needs endpoint and model_name".into())
            }
            BackendKind::HttpChat if self.retry.max_attempts == 0 => {
                Err("retry.max_attempts must be at least 1".into())
            }
            _ => Ok(()),
        }
    }
}

/// Per-call context. Scripted backends use it for placeholder substitution
/// and to keep one script cursor per (conversation, agent).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RequestContext {
    pub conversation: String,
    pub item_id: String,
    pub run: u32,
    pub round: u32,
    pub gold: Option<String>,
    pub option_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub agent: AgentId,
    pub role: Role,
    pub system: String,
    pub prompt: String,
    pub decoding: DecodingParams,
    pub context: RequestContext,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Latency to charge in simulated timing; `None` means use the measured time.
    pub simulated_latency: Option<Duration>,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("request timed out after {attempts} attempt(s): {detail}")]
    Timeout { attempts: u32, detail: String },
    #[error("server returned HTTP {code}: {body}")]
    HttpStatus { code: u16, body: String },
    #[error("script exhausted for {agent} after {served} response(s)")]
    ScriptExhausted { agent: AgentId, served: usize },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("no backend bound for {0}")]
    Unbound(AgentId),
    #[error("{0}")]
    Other(String),
}

/// A model endpoint that turns a rendered prompt into text.
pub trait AgentBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError>;

    /// Parameter count used for FLOPs accounting.
    fn param_count(&self) -> u64;
}

/// Whitespace-delimited word count, used as the synthetic token count.
pub fn word_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

type CompletionFn = dyn Fn(&CompletionRequest) -> Result<String, BackendError> + Send + Sync;

/// Backend wrapping a closure; token counts are word counts.
pub struct FnBackend {
    param_count: u64,
    f: Box<CompletionFn>,
}

impl FnBackend {
    pub fn new<F>(param_count: u64, f: F) -> Self
    where
        F: Fn(&CompletionRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        Self {
            param_count,
            f: Box::new(f),
        }
    }
}

impl AgentBackend for FnBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let text = (self.f)(request)?;
        Ok(Completion {
            prompt_tokens: word_count(&request.system) + word_count(&request.prompt),
            completion_tokens: word_count(&text),
            text,
            simulated_latency: Some(Duration::ZERO),
        })
    }

    fn param_count(&self) -> u64 {
        self.param_count
    }
}

/// Builds a live backend from its descriptor.
pub fn instantiate(descriptor: &BackendDescriptor) -> Result<Arc<dyn AgentBackend>, BackendError> {
    descriptor.validate().map_err(BackendError::Other)?;
    Ok(match descriptor.kind {
        BackendKind::Scripted => Arc::new(ScriptedBackend::from_descriptor(descriptor)),
        BackendKind::HttpChat => Arc::new(HttpChatBackend::from_descriptor(descriptor)?),
    })
}

/// Backends bound per agent.
#[derive(Clone, Default)]
pub struct BackendSet {
    agents: BTreeMap<AgentId, Arc<dyn AgentBackend>>,
}

impl BackendSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, agent: AgentId, backend: Arc<dyn AgentBackend>) {
        self.agents.insert(agent, backend);
    }

    pub fn with(mut self, agent: AgentId, backend: Arc<dyn AgentBackend>) -> Self {
        self.bind(agent, backend);
        self
    }

    /// Binds every enabled agent of `cfg` to the backend `make` returns for it.
    pub fn for_each_agent<F>(cfg: &ValidatedConfig, mut make: F) -> Self
    where
        F: FnMut(AgentId) -> Arc<dyn AgentBackend>,
    {
        let mut set = Self::new();
        for &agent in cfg.agents() {
            set.bind(agent, make(agent));
        }
        set
    }

    /// Instantiates the bindings carried in the configuration.
    pub fn from_config(cfg: &ValidatedConfig) -> Result<Self, BackendError> {
        let mut set = Self::new();
        for (&agent, descriptor) in cfg.bindings() {
            set.bind(agent, instantiate(descriptor)?);
        }
        Ok(set)
    }

    pub fn get(&self, agent: AgentId) -> Result<&Arc<dyn AgentBackend>, BackendError> {
        self.agents.get(&agent).ok_or(BackendError::Unbound(agent))
    }

    pub fn contains(&self, agent: AgentId) -> bool {
        self.agents.contains_key(&agent)
    }

    /// First enabled agent of `cfg` without a backend, if any.
    pub fn missing_for(&self, cfg: &ValidatedConfig) -> Option<AgentId> {
        cfg.agents().iter().copied().find(|a| !self.contains(*a))
    }

    pub fn param_counts(&self) -> BTreeMap<AgentId, u64> {
        self.agents
            .iter()
            .map(|(&a, b)| (a, b.param_count()))
            .collect()
    }
}

impl std::fmt::Debug for BackendSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendSet")
            .field("agents", &self.agents.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// One-shot completion against a descriptor.
///
/// Builds a fresh backend, so scripted descriptors always answer with the
/// first script entry; keep an instance from [`instantiate`] to advance a script.
pub fn complete(
    descriptor: &BackendDescriptor,
    prompt: &str,
    decoding: &DecodingParams,
) -> Result<Completion, BackendError> {
    let backend = instantiate(descriptor)?;
    backend.complete(&CompletionRequest {
        agent: AgentId::new(Role::Reasoning, 1),
        role: Role::Reasoning,
        system: String::new(),
        prompt: prompt.to_string(),
        decoding: decoding.clone(),
        context: RequestContext::default(),
    })
}
