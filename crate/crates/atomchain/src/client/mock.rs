//! Scripted backend for tests and offline development: substring rules
//! map incoming prompts to canned responses, with an optional injected
//! failure point for exercising crash recovery.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, BackendReply, GenerationBackend, GenerationRequest, Role, TokenUsage};

pub const SCRIPT_SCHEMA: &str = "atomchain.script.v1";

/// One scripted rule: fires when the latest user message contains every
/// needle. Rules are tried in order; the first match wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub needles: Vec<String>,
    pub response: String,
}

/// One line of a script file.
#[derive(Debug, Serialize, Deserialize)]
struct ScriptLine {
    schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    needles: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    default: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fail_after: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    latency_ms: Option<u64>,
}

pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    default_response: String,
    /// Injected fault: every call after this many fails. Lets tests
    /// simulate a backend dying partway through a batch.
    fail_after: Option<u64>,
    /// Artificial per-call delay so tests can interrupt a run mid-flight.
    latency: Option<Duration>,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>, default_response: impl Into<String>) -> ScriptedBackend {
        ScriptedBackend {
            rules,
            default_response: default_response.into(),
            fail_after: None,
            latency: None,
            calls: AtomicU64::new(0),
        }
    }

    pub fn with_fail_after(mut self, calls: Option<u64>) -> ScriptedBackend {
        self.fail_after = calls;
        self
    }

    pub fn with_latency_ms(mut self, ms: Option<u64>) -> ScriptedBackend {
        self.latency = ms.map(Duration::from_millis);
        self
    }

    /// Loads a JSONL script: rule lines ({needles, response}), plus
    /// optional {default} and {fail_after} lines.
    pub fn from_script_file(path: &Path) -> Result<ScriptedBackend, BackendError> {
        let file = File::open(path)?;
        let mut rules = Vec::new();
        let mut default_response = String::new();
        let mut fail_after = None;
        let mut latency_ms = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ScriptLine = serde_json::from_str(&line)
                .map_err(|err| BackendError::Malformed(format!("script line {}: {err}", i + 1)))?;
            if parsed.schema != SCRIPT_SCHEMA {
                return Err(BackendError::Malformed(format!(
                    "script line {}: unsupported schema {:?}",
                    i + 1,
                    parsed.schema
                )));
            }
            if let Some(default) = parsed.default {
                default_response = default;
            }
            if let Some(limit) = parsed.fail_after {
                fail_after = Some(limit);
            }
            if let Some(ms) = parsed.latency_ms {
                latency_ms = Some(ms);
            }
            match (parsed.needles, parsed.response) {
                (Some(needles), Some(response)) => rules.push(ScriptRule { needles, response }),
                (None, None) => {}
                _ => {
                    return Err(BackendError::Malformed(format!(
                        "script line {}: needles and response must appear together",
                        i + 1
                    )));
                }
            }
        }
        Ok(ScriptedBackend::new(rules, default_response)
            .with_fail_after(fail_after)
            .with_latency_ms(latency_ms))
    }

    pub fn calls_served(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn pick_response(&self, prompt: &str) -> &str {
        for rule in &self.rules {
            if rule.needles.iter().all(|needle| prompt.contains(needle)) {
                return &rule.response;
            }
        }
        &self.default_response
    }
}

fn word_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

impl GenerationBackend for ScriptedBackend {
    fn id(&self) -> &'static str {
        "mock"
    }

    fn generate(&self, request: &GenerationRequest) -> Result<BackendReply, BackendError> {
        if let Some(delay) = self.latency {
            std::thread::sleep(delay);
        }
        let call = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        if self.fail_after.is_some_and(|limit| call > limit) {
            return Err(BackendError::Transport {
                message: format!("scripted failure injected after call {limit}", limit = self.fail_after.unwrap()),
                retryable: false,
            });
        }
        let prompt = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        let response = self.pick_response(prompt).to_string();
        // Deterministic accounting: word counts stand in for tokens.
        let prompt_tokens: u64 = request.messages.iter().map(|m| word_count(&m.content)).sum();
        let completion_tokens = word_count(&response);
        Ok(BackendReply {
            text: response,
            usage: TokenUsage { prompt_tokens, completion_tokens },
            latency_ms: 0,
            served_from_replay: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::Message;

    fn request(user: &str) -> GenerationRequest {
        GenerationRequest {
            model: "m".into(),
            messages: vec![Message::system("be brief"), Message::user(user)],
            temperature: 0.8,
            top_p: 0.9,
            max_tokens: 64,
            seed: None,
            top_k: None,
        }
    }

    fn backend() -> ScriptedBackend {
        ScriptedBackend::new(
            vec![
                ScriptRule {
                    needles: vec!["### Your Plan".into(), "water".into()],
                    response: "[Plan 1 Start]check[Plan 1 End]".into(),
                },
                ScriptRule { needles: vec!["### Your Plan".into()], response: "generic plan".into() },
            ],
            "fallback",
        )
    }

    #[test]
    fn first_matching_rule_wins_and_all_needles_are_required() {
        let backend = backend();
        let reply = backend.generate(&request("water table\n### Your Plan")).unwrap();
        assert_eq!(reply.text, "[Plan 1 Start]check[Plan 1 End]");
        let reply = backend.generate(&request("other table\n### Your Plan")).unwrap();
        assert_eq!(reply.text, "generic plan");
        let reply = backend.generate(&request("no stage header")).unwrap();
        assert_eq!(reply.text, "fallback");
        assert_eq!(backend.calls_served(), 3);
    }

    #[test]
    fn matches_against_latest_user_message() {
        let backend = backend();
        let mut req = request("### Your Plan");
        req.messages.push(Message { role: Role::Assistant, content: "### Your Plan echo".into() });
        req.messages.push(Message::user("nothing relevant"));
        assert_eq!(backend.generate(&req).unwrap().text, "fallback");
    }

    #[test]
    fn usage_is_deterministic_word_counts() {
        let backend = ScriptedBackend::new(vec![], "three word reply");
        let reply = backend.generate(&request("two words")).unwrap();
        // "be brief" (2) + "two words" (2) prompt, 3 completion.
        assert_eq!(reply.usage, TokenUsage { prompt_tokens: 4, completion_tokens: 3 });
        assert_eq!(reply.latency_ms, 0);
        assert!(!reply.served_from_replay);
    }

    #[test]
    fn fail_after_kills_later_calls() {
        let backend = backend().with_fail_after(Some(2));
        assert!(backend.generate(&request("a")).is_ok());
        assert!(backend.generate(&request("b")).is_ok());
        let err = backend.generate(&request("c")).unwrap_err();
        assert!(!err.retryable());
        assert!(matches!(err, BackendError::Transport { .. }));
    }

    #[test]
    fn script_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.jsonl");
        let lines = [
            serde_json::json!({"schema": SCRIPT_SCHEMA, "needles": ["plan"], "response": "P"}),
            serde_json::json!({"schema": SCRIPT_SCHEMA, "default": "D"}),
            serde_json::json!({"schema": SCRIPT_SCHEMA, "fail_after": 5}),
        ];
        let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
        std::fs::write(&path, text).unwrap();
        let backend = ScriptedBackend::from_script_file(&path).unwrap();
        assert_eq!(backend.generate(&request("the plan is")).unwrap().text, "P");
        assert_eq!(backend.generate(&request("else")).unwrap().text, "D");
        assert_eq!(backend.fail_after, Some(5));
    }

    #[test]
    fn script_file_rejects_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.jsonl");
        std::fs::write(
            &path,
            format!("{}\n", serde_json::json!({"schema": SCRIPT_SCHEMA, "needles": ["x"]})),
        )
        .unwrap();
        assert!(matches!(
            ScriptedBackend::from_script_file(&path),
            Err(BackendError::Malformed(_))
        ));
        std::fs::write(&path, "{\"schema\": \"other.v9\"}\n").unwrap();
        assert!(matches!(
            ScriptedBackend::from_script_file(&path),
            Err(BackendError::Malformed(_))
        ));
    }
}
