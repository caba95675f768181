//! Text-generation backends and the retrying client wrapper.
//!
//! A backend is anything that turns a chat request into text: a live
//! HTTP endpoint, a replay store of recorded responses, or a scripted
//! mock. Backends register by name in a [`BackendRegistry`] and are
//! selected at runtime. [`LlmClient`] wraps a backend with bounded
//! retries, a token budget, usage counters, and optional session
//! recording for later replay.

mod live;
mod mock;
mod replay;
mod session;

pub use live::LiveBackend;
pub use mock::{ScriptRule, ScriptedBackend};
pub use replay::ReplayBackend;
pub use session::{SessionEntry, SessionSink, SessionStore, SESSION_SCHEMA};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn wire_name(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Message {
        Message { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Message {
        Message { role: Role::User, content: content.into() }
    }
}

/// One chat-completion request. Identical requests map to identical
/// cache keys, which is what replay stores are indexed by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
}

impl GenerationRequest {
    /// Content-addressed key for this request: a SHA-256 over a
    /// canonical rendering with unit/record separators, so the key
    /// cannot collide across field boundaries. The key depends only on
    /// field values, never on serialization layout.
    pub fn cache_key(&self) -> String {
        let mut canon = String::new();
        let _ = write!(
            canon,
            "{}\u{1e}{}\u{1e}{}\u{1e}{}\u{1e}",
            self.model, self.temperature, self.top_p, self.max_tokens
        );
        match self.seed {
            Some(seed) => {
                let _ = write!(canon, "{seed}");
            }
            None => {}
        }
        canon.push('\u{1e}');
        match self.top_k {
            Some(top_k) => {
                let _ = write!(canon, "{top_k}");
            }
            None => {}
        }
        for message in &self.messages {
            let _ = write!(canon, "\u{1e}{}\u{1f}{}", message.role.wire_name(), message.content);
        }
        let digest = Sha256::digest(canon.as_bytes());
        hex::encode(digest)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

/// A backend's answer. Latency is backend-reported so that replayed
/// responses stay byte-identical run to run (replay reports zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendReply {
    pub text: String,
    pub usage: TokenUsage,
    pub latency_ms: u64,
    /// True when the reply came out of a replay store; such replies are
    /// not re-recorded.
    #[serde(default)]
    pub served_from_replay: bool,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure: {message}")]
    Transport { message: String, retryable: bool },
    #[error("endpoint returned HTTP {status}: {message}")]
    Http { status: u16, message: String, retryable: bool },
    #[error("no recorded response for request key {key}")]
    ReplayMiss { key: String },
    #[error("no backend named {name:?}; known backends: {}", known.join(", "))]
    UnknownBackend { name: String, known: Vec<String> },
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error("failed to read backend data: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed backend data: {0}")]
    Malformed(String),
}

impl BackendError {
    pub fn retryable(&self) -> bool {
        match self {
            BackendError::Transport { retryable, .. } => *retryable,
            BackendError::Http { retryable, .. } => *retryable,
            _ => false,
        }
    }
}

/// Anything that can serve chat-completion requests.
pub trait GenerationBackend: Send + Sync {
    /// Registry name of this backend kind.
    fn id(&self) -> &'static str;

    fn generate(&self, request: &GenerationRequest) -> Result<BackendReply, BackendError>;
}

/// Everything a factory may need to construct a backend.
#[derive(Debug, Clone, Default)]
pub struct BackendSettings {
    /// Chat-completion URL for live backends.
    pub endpoint: Option<String>,
    /// Bearer token for live backends.
    pub api_key: Option<String>,
    /// Recorded session to serve responses from (replay).
    pub session_path: Option<PathBuf>,
    /// Rule script to serve responses from (mock).
    pub script_path: Option<PathBuf>,
}

pub type BackendFactory =
    Box<dyn Fn(&BackendSettings) -> Result<Box<dyn GenerationBackend>, BackendError> + Send + Sync>;

/// Name-indexed backend construction, so the CLI (or embedding code)
/// can pick a backend at runtime and plugins can add their own.
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl BackendRegistry {
    pub fn empty() -> BackendRegistry {
        BackendRegistry { factories: BTreeMap::new() }
    }

    /// Registry with the built-in backends: `live`, `replay`, `mock`.
    pub fn with_builtins() -> BackendRegistry {
        let mut registry = BackendRegistry::empty();
        registry.register("live", Box::new(|settings: &BackendSettings| {
            let endpoint = settings
                .endpoint
                .clone()
                .ok_or_else(|| BackendError::Config("live backend needs an endpoint".into()))?;
            Ok(Box::new(LiveBackend::new(endpoint, settings.api_key.clone())) as Box<dyn GenerationBackend>)
        }));
        registry.register("replay", Box::new(|settings: &BackendSettings| {
            let path = settings
                .session_path
                .clone()
                .ok_or_else(|| BackendError::Config("replay backend needs a session file".into()))?;
            Ok(Box::new(ReplayBackend::from_session_file(&path)?) as Box<dyn GenerationBackend>)
        }));
        registry.register("mock", Box::new(|settings: &BackendSettings| {
            let path = settings
                .script_path
                .clone()
                .ok_or_else(|| BackendError::Config("mock backend needs a script file".into()))?;
            Ok(Box::new(ScriptedBackend::from_script_file(&path)?) as Box<dyn GenerationBackend>)
        }));
        registry
    }

    /// Registers (or replaces) a factory under a name.
    pub fn register(&mut self, name: &str, factory: BackendFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn create(
        &self,
        name: &str,
        settings: &BackendSettings,
    ) -> Result<Box<dyn GenerationBackend>, BackendError> {
        match self.factories.get(name) {
            Some(factory) => factory(settings),
            None => Err(BackendError::UnknownBackend {
                name: name.to_string(),
                known: self.factories.keys().cloned().collect(),
            }),
        }
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("backend failed after {attempts} attempt(s): {source}")]
    Backend {
        attempts: u32,
        #[source]
        source: BackendError,
    },
    #[error("token budget exhausted: {used} of {budget} tokens already spent")]
    BudgetExhausted { budget: u64, used: u64 },
}

/// Running totals across every request the client served.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClientUsage {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl ClientUsage {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

/// A successful generation, with the key the response is cached under.
#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub text: String,
    pub usage: TokenUsage,
    pub latency_ms: u64,
    pub cache_key: String,
}

/// Backend wrapper adding bounded retries with exponential backoff, an
/// optional total-token budget, usage accounting, and session
/// recording. Retries reissue the identical request, so the cache key
/// never changes between attempts.
pub struct LlmClient {
    backend: Box<dyn GenerationBackend>,
    max_attempts: u32,
    backoff_base: Duration,
    token_budget: Option<u64>,
    usage: Mutex<ClientUsage>,
    recorder: Option<SessionSink>,
}

impl LlmClient {
    pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;

    pub fn new(backend: Box<dyn GenerationBackend>) -> LlmClient {
        LlmClient {
            backend,
            max_attempts: LlmClient::DEFAULT_MAX_ATTEMPTS,
            backoff_base: Duration::from_millis(250),
            token_budget: None,
            usage: Mutex::new(ClientUsage::default()),
            recorder: None,
        }
    }

    /// Total attempts per request (first try included). Clamped to 1+.
    pub fn with_max_attempts(mut self, attempts: u32) -> LlmClient {
        self.max_attempts = attempts.max(1);
        self
    }

    /// Base delay for exponential backoff; doubles per failed attempt.
    pub fn with_backoff_base(mut self, base: Duration) -> LlmClient {
        self.backoff_base = base;
        self
    }

    pub fn with_token_budget(mut self, budget: Option<u64>) -> LlmClient {
        self.token_budget = budget;
        self
    }

    /// Records every non-replayed response for later replay.
    pub fn with_recorder(mut self, recorder: SessionSink) -> LlmClient {
        self.recorder = Some(recorder);
        self
    }

    pub fn backend_id(&self) -> &'static str {
        self.backend.id()
    }

    pub fn usage(&self) -> ClientUsage {
        *self.usage.lock().unwrap()
    }

    pub fn generate(&self, request: &GenerationRequest) -> Result<GenerationOutcome, ClientError> {
        if let Some(budget) = self.token_budget {
            let used = self.usage().total_tokens();
            if used >= budget {
                return Err(ClientError::BudgetExhausted { budget, used });
            }
        }

        let mut attempt = 0;
        let reply = loop {
            attempt += 1;
            match self.backend.generate(request) {
                Ok(reply) => break reply,
                Err(err) if err.retryable() && attempt < self.max_attempts => {
                    let delay = self.backoff_base * 2u32.saturating_pow(attempt - 1);
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                }
                Err(err) => return Err(ClientError::Backend { attempts: attempt, source: err }),
            }
        };

        {
            let mut usage = self.usage.lock().unwrap();
            usage.calls += 1;
            usage.prompt_tokens += reply.usage.prompt_tokens;
            usage.completion_tokens += reply.usage.completion_tokens;
        }

        let cache_key = request.cache_key();
        if let Some(recorder) = &self.recorder {
            if !reply.served_from_replay {
                recorder.record(&cache_key, request, &reply).map_err(|err| ClientError::Backend {
                    attempts: attempt,
                    source: err,
                })?;
            }
        }

        Ok(GenerationOutcome {
            text: reply.text,
            usage: reply.usage,
            latency_ms: reply.latency_ms,
            cache_key,
        })
    }
}

#[cfg(test)]
pub(crate) fn test_request(content: &str) -> GenerationRequest {
    GenerationRequest {
        model: "test-model".into(),
        messages: vec![Message::system("sys"), Message::user(content)],
        temperature: 0.8,
        top_p: 0.9,
        max_tokens: 1024,
        seed: Some(7),
        top_k: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    /// Fails with a retryable error a fixed number of times, then
    /// succeeds.
    struct FlakyBackend {
        failures: u32,
        calls: AtomicU32,
    }

    impl GenerationBackend for FlakyBackend {
        fn id(&self) -> &'static str {
            "flaky"
        }

        fn generate(&self, _request: &GenerationRequest) -> Result<BackendReply, BackendError> {
            let call = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
            if call <= self.failures {
                return Err(BackendError::Transport {
                    message: format!("induced failure {call}"),
                    retryable: true,
                });
            }
            Ok(BackendReply {
                text: "ok".into(),
                usage: TokenUsage { prompt_tokens: 10, completion_tokens: 5 },
                latency_ms: 0,
                served_from_replay: false,
            })
        }
    }

    #[test]
    fn cache_key_is_stable_and_sensitive() {
        let base = test_request("hello");
        assert_eq!(base.cache_key(), base.cache_key());
        assert_eq!(base.cache_key().len(), 64);

        let mut other = base.clone();
        other.temperature = 0.7;
        assert_ne!(base.cache_key(), other.cache_key());

        let mut other = base.clone();
        other.seed = None;
        assert_ne!(base.cache_key(), other.cache_key());

        let mut other = base.clone();
        other.messages[1].content = "hello ".into();
        assert_ne!(base.cache_key(), other.cache_key());
    }

    #[test]
    fn cache_key_does_not_collide_across_message_boundaries() {
        let two = GenerationRequest {
            messages: vec![Message::user("ab"), Message::user("c")],
            ..test_request("")
        };
        let other = GenerationRequest {
            messages: vec![Message::user("a"), Message::user("bc")],
            ..test_request("")
        };
        assert_ne!(two.cache_key(), other.cache_key());

        // Role and content are separated, so a content starting with a
        // role name cannot alias.
        let in_content = GenerationRequest { messages: vec![Message::user("system x")], ..test_request("") };
        let as_system = GenerationRequest { messages: vec![Message::system("x")], ..test_request("") };
        assert_ne!(in_content.cache_key(), as_system.cache_key());
    }

    #[test]
    fn retries_then_succeeds_and_counts_usage_once() {
        let backend = FlakyBackend { failures: 2, calls: AtomicU32::new(0) };
        let client = LlmClient::new(Box::new(backend))
            .with_max_attempts(3)
            .with_backoff_base(Duration::ZERO);
        let outcome = client.generate(&test_request("x")).unwrap();
        assert_eq!(outcome.text, "ok");
        let usage = client.usage();
        assert_eq!(usage.calls, 1);
        assert_eq!(usage.prompt_tokens, 10);
        assert_eq!(usage.completion_tokens, 5);
    }

    #[test]
    fn retry_budget_is_bounded() {
        let backend = FlakyBackend { failures: 10, calls: AtomicU32::new(0) };
        let client = LlmClient::new(Box::new(backend))
            .with_max_attempts(3)
            .with_backoff_base(Duration::ZERO);
        match client.generate(&test_request("x")) {
            Err(ClientError::Backend { attempts: 3, .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
        assert_eq!(client.usage().calls, 0);
    }

    #[test]
    fn non_retryable_errors_fail_fast() {
        struct Hard;
        impl GenerationBackend for Hard {
            fn id(&self) -> &'static str {
                "hard"
            }
            fn generate(&self, _r: &GenerationRequest) -> Result<BackendReply, BackendError> {
                Err(BackendError::Http { status: 400, message: "bad request".into(), retryable: false })
            }
        }
        let client = LlmClient::new(Box::new(Hard)).with_backoff_base(Duration::ZERO);
        match client.generate(&test_request("x")) {
            Err(ClientError::Backend { attempts: 1, .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn token_budget_stops_further_calls() {
        let backend = FlakyBackend { failures: 0, calls: AtomicU32::new(0) };
        let client = LlmClient::new(Box::new(backend))
            .with_backoff_base(Duration::ZERO)
            .with_token_budget(Some(20));
        client.generate(&test_request("a")).unwrap();
        // 15 tokens spent; still under 20, one more call allowed.
        client.generate(&test_request("b")).unwrap();
        match client.generate(&test_request("c")) {
            Err(ClientError::BudgetExhausted { budget: 20, used: 30 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn unknown_backend_lists_known_names() {
        let registry = BackendRegistry::with_builtins();
        match registry.create("nope", &BackendSettings::default()) {
            Err(BackendError::UnknownBackend { name, known }) => {
                assert_eq!(name, "nope");
                assert_eq!(known, vec!["live", "mock", "replay"]);
            }
            other => panic!("unexpected: {:?}", other.map(|b| b.id())),
        }
    }

    #[test]
    fn registry_accepts_external_backends() {
        struct Canned;
        impl GenerationBackend for Canned {
            fn id(&self) -> &'static str {
                "canned"
            }
            fn generate(&self, _r: &GenerationRequest) -> Result<BackendReply, BackendError> {
                Ok(BackendReply {
                    text: "canned".into(),
                    usage: TokenUsage::default(),
                    latency_ms: 0,
                    served_from_replay: false,
                })
            }
        }
        let mut registry = BackendRegistry::with_builtins();
        registry.register("canned", Box::new(|_s| Ok(Box::new(Canned))));
        let backend = registry.create("canned", &BackendSettings::default()).unwrap();
        assert_eq!(backend.generate(&test_request("x")).unwrap().text, "canned");
    }

    fn arb_request() -> impl Strategy<Value = GenerationRequest> {
        (
            "[a-z0-9-]{1,12}",
            prop::collection::vec(("[a-z ]{0,40}", 0..3u8), 1..4),
            0u32..20,
            prop::option::of(any::<u64>()),
        )
            .prop_map(|(model, contents, max_tokens, seed)| GenerationRequest {
                model,
                messages: contents
                    .into_iter()
                    .map(|(content, role)| Message {
                        role: match role {
                            0 => Role::System,
                            1 => Role::User,
                            _ => Role::Assistant,
                        },
                        content,
                    })
                    .collect(),
                temperature: 0.8,
                top_p: 0.9,
                max_tokens,
                seed,
                top_k: None,
            })
    }

    proptest! {
        // The key survives a serialization round trip: it is a function
        // of the request's values, not its in-memory or wire form.
        #[test]
        fn cache_key_invariant_under_json_round_trip(request in arb_request()) {
            let json = serde_json::to_string(&request).unwrap();
            let back: GenerationRequest = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back.cache_key(), request.cache_key());
        }
    }
}
