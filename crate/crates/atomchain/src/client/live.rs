//! Live backend: POSTs chat-completion requests to an HTTP endpoint.
//!
//! Wire format is the common chat-completions shape: the request
//! carries `model`, `messages`, and sampling parameters; the response
//! is read from `choices[0].message.content` plus `usage`.

use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{BackendError, BackendReply, GenerationBackend, GenerationRequest, TokenUsage};

pub struct LiveBackend {
    endpoint: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl LiveBackend {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> LiveBackend {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .expect("default HTTP client configuration is valid");
        LiveBackend { endpoint: endpoint.into(), api_key, http }
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: String,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl GenerationBackend for LiveBackend {
    fn id(&self) -> &'static str {
        "live"
    }

    fn generate(&self, request: &GenerationRequest) -> Result<BackendReply, BackendError> {
        let mut body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        if let Some(top_k) = request.top_k {
            body["top_k"] = json!(top_k);
        }

        let started = Instant::now();
        let mut builder = self.http.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|err| BackendError::Transport {
            message: err.to_string(),
            // Connection and timeout failures are worth retrying.
            retryable: true,
        })?;

        let status = response.status();
        let text = response.text().map_err(|err| BackendError::Transport {
            message: err.to_string(),
            retryable: true,
        })?;
        if !status.is_success() {
            // Rate limiting and server-side failures are transient;
            // anything else 4xx means the request itself is bad.
            let retryable = status.as_u16() == 429 || status.is_server_error();
            let mut message = text;
            message.truncate(300);
            return Err(BackendError::Http { status: status.as_u16(), message, retryable });
        }

        let wire: WireResponse = serde_json::from_str(&text)
            .map_err(|err| BackendError::Malformed(format!("bad completion payload: {err}")))?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Malformed("completion payload had no choices".into()))?;
        let usage = wire
            .usage
            .map(|u| TokenUsage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens })
            .unwrap_or_default();
        Ok(BackendReply {
            text: choice.message.content,
            usage,
            latency_ms: started.elapsed().as_millis() as u64,
            served_from_replay: false,
        })
    }
}
