use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    word_count, AgentBackend, BackendDescriptor, BackendError, Completion, CompletionRequest,
    RetryPolicy,
};

/// Environment variable holding the bearer token for HTTP backends.
pub const API_KEY_ENV: &str = "SAG_API_KEY";

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    top_p: f64,
    seed: i64,
    n: u32,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Client for servers exposing `POST {endpoint}/chat/completions`.
pub struct HttpChatBackend {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    param_count: u64,
}

enum Attempt {
    Done(Completion),
    Retry(BackendError),
    Fatal(BackendError),
}

impl HttpChatBackend {
    pub fn from_descriptor(d: &BackendDescriptor) -> Result<Self, BackendError> {
        let endpoint = d
            .endpoint
            .as_deref()
            .ok_or_else(|| BackendError::Other("http backend without endpoint".into()))?;
        let url = if endpoint.trim_end_matches('/').ends_with("/chat/completions") {
            endpoint.to_string()
        } else {
            format!("{}/chat/completions", endpoint.trim_end_matches('/'))
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(d.retry.timeout_ms))
            .build()
            .map_err(|e| BackendError::Other(format!("building http client: {e}")))?;
        Ok(Self {
            client,
            url,
            model: d.model_name.clone(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            retry: d.retry.clone(),
            param_count: d.param_count,
        })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn attempt(&self, request: &CompletionRequest) -> Attempt {
        let mut messages = Vec::with_capacity(2);
        if !request.system.is_empty() {
            messages.push(ChatMessage {
                role: "system",
                content: &request.system,
            });
        }
        messages.push(ChatMessage {
            role: "user",
            content: &request.prompt,
        });
        let body = ChatRequest {
            model: &self.model,
            messages,
            temperature: request.decoding.temperature,
            top_p: request.decoding.top_p,
            seed: request.decoding.seed,
            n: request.decoding.num_candidates,
        };

        let mut builder = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = match builder.send() {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry(BackendError::Timeout {
                    attempts: 0,
                    detail: e.to_string(),
                })
            }
        };

        let status = response.status();
        if !status.is_success() {
            let code = status.as_u16();
            let body = response.text().unwrap_or_default();
            let err = BackendError::HttpStatus { code, body };
            return if code == 429 || status.is_server_error() {
                Attempt::Retry(err)
            } else {
                Attempt::Fatal(err)
            };
        }

        let parsed: ChatResponse = match response.json() {
            Ok(p) => p,
            Err(e) => return Attempt::Fatal(BackendError::Malformed(e.to_string())),
        };
        // With n > 1 candidates, the first one is used.
        let Some(text) = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
        else {
            return Attempt::Fatal(BackendError::Malformed("response has no choices".into()));
        };
        let (prompt_tokens, completion_tokens) = match parsed.usage {
            Some(u) => (u.prompt_tokens, u.completion_tokens),
            None => (
                word_count(&request.system) + word_count(&request.prompt),
                word_count(&text),
            ),
        };
        Attempt::Done(Completion {
            text,
            prompt_tokens,
            completion_tokens,
            simulated_latency: None,
        })
    }
}

impl AgentBackend for HttpChatBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let attempts = self.retry.max_attempts.max(1);
        let mut last = None;
        for attempt in 1..=attempts {
            match self.attempt(request) {
                Attempt::Done(c) => return Ok(c),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e) => {
                    log::debug!("{} attempt {attempt}/{attempts} failed: {e}", request.agent);
                    last = Some(e);
                    if attempt < attempts {
                        std::thread::sleep(self.retry.backoff(attempt));
                    }
                }
            }
        }
        Err(match last {
            Some(BackendError::Timeout { detail, .. }) => BackendError::Timeout { attempts, detail },
            Some(other) => other,
            None => BackendError::Timeout {
                attempts,
                detail: "no attempt made".into(),
            },
        })
    }

    fn param_count(&self) -> u64 {
        self.param_count
    }
}
