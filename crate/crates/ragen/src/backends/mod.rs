//! External-world adapters behind narrow interfaces: chat backends (live,
//! scripted, replay, recording), the search tool, the static analyzer, and
//! the sandbox runner.

pub mod analyzer;
pub mod http;
pub mod replay;
pub mod sandbox;
pub mod search;

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend http error: status {status}: {message}")]
    Http { status: u16, message: String },
    #[error("backend transport error: {0}")]
    Transport(String),
    #[error("replay miss for digest {digest}")]
    ReplayMiss { digest: String },
    #[error("scripted backend exhausted after {served} responses")]
    ScriptExhausted { served: u64 },
    #[error("store write failed: {0}")]
    StoreWrite(String),
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("missing api key: environment variable {0} not set")]
    MissingApiKey(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        ChatRequest {
            messages,
            model: model.into(),
            temperature: 0.0,
            max_tokens: 4096,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("messages empty".into()));
        }
        match self.messages[0].role {
            Role::System | Role::User => Ok(()),
            Role::Assistant => Err(BackendError::InvalidRequest(
                "first message must be system or user".into(),
            )),
        }
    }

    /// Stable digest over the canonical field order; independent of any
    /// serialized key ordering because it is computed from the typed value.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.model.as_bytes());
        hasher.update([0x1e]);
        hasher.update(format!("{:.6}", self.temperature).as_bytes());
        hasher.update([0x1e]);
        hasher.update(self.max_tokens.to_le_bytes());
        for m in &self.messages {
            hasher.update([0x1e]);
            hasher.update(m.role.as_str().as_bytes());
            hasher.update([0x1f]);
            hasher.update(m.content.as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
}

impl ChatResponse {
    pub fn from_content(content: impl Into<String>) -> Self {
        ChatResponse {
            content: content.into(),
            prompt_tokens: 0,
            completion_tokens: 0,
            latency_ms: 0,
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

/// Serves queued responses in order; used by tests and scripted runs.
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<String>>,
    served: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(responses: Vec<String>) -> Self {
        ScriptedBackend {
            queue: Mutex::new(responses.into()),
            served: AtomicU64::new(0),
        }
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("scripted queue").len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let mut queue = self.queue.lock().expect("scripted queue");
        match queue.pop_front() {
            Some(content) => {
                self.served.fetch_add(1, Ordering::Relaxed);
                Ok(ChatResponse::from_content(content))
            }
            None => Err(BackendError::ScriptExhausted {
                served: self.served.load(Ordering::Relaxed),
            }),
        }
    }
}

/// Counts calls flowing through to the inner backend.
pub struct CountingBackend {
    inner: Arc<dyn ChatBackend>,
    calls: AtomicU64,
}

impl CountingBackend {
    pub fn new(inner: Arc<dyn ChatBackend>) -> Self {
        CountingBackend {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for CountingBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.chat(request)
    }
}

/// A backend that always fails at the transport layer. Used to prove replay
/// mode performs no network operations.
pub struct FailingBackend;

impl ChatBackend for FailingBackend {
    fn chat(&self, _request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        Err(BackendError::Transport("network disabled".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(content: &str) -> ChatRequest {
        ChatRequest::new(
            "test-model",
            vec![ChatMessage {
                role: Role::User,
                content: content.to_string(),
            }],
        )
    }

    #[test]
    fn scripted_backend_serves_in_order() {
        let backend = ScriptedBackend::new(vec!["hello".into()]);
        let response = backend.chat(&request("hi")).unwrap();
        assert_eq!(response.content, "hello");
        assert!(matches!(
            backend.chat(&request("hi")),
            Err(BackendError::ScriptExhausted { served: 1 })
        ));
    }

    #[test]
    fn empty_request_is_rejected() {
        let backend = ScriptedBackend::new(vec!["x".into()]);
        let bad = ChatRequest::new("m", vec![]);
        assert!(matches!(
            backend.chat(&bad),
            Err(BackendError::InvalidRequest(_))
        ));
    }

    #[test]
    fn digest_ignores_serialized_key_order() {
        let a: ChatRequest = serde_json::from_str(
            r#"{"messages":[{"role":"user","content":"q"}],"model":"m","temperature":0.0,"max_tokens":64}"#,
        )
        .unwrap();
        let b: ChatRequest = serde_json::from_str(
            r#"{"max_tokens":64,"temperature":0.0,"model":"m","messages":[{"content":"q","role":"user"}]}"#,
        )
        .unwrap();
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn digest_distinguishes_requests() {
        assert_ne!(request("a").digest(), request("b").digest());
    }

    #[test]
    fn counting_backend_counts() {
        let backend = CountingBackend::new(Arc::new(ScriptedBackend::new(vec![
            "a".into(),
            "b".into(),
        ])));
        backend.chat(&request("1")).unwrap();
        backend.chat(&request("2")).unwrap();
        assert_eq!(backend.calls(), 2);
    }
}
