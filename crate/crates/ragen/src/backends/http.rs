//! Live chat-completions backend over HTTP with bounded retries and a
//! max-in-flight limit. Auth comes from an environment variable; nothing
//! secret lives in configuration files.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse};

const MAX_RETRIES: u32 = 2;
const BACKOFF_BASE_MS: u64 = 250;

pub struct HttpChatBackend {
    base_url: String,
    api_key_env: String,
    client: reqwest::blocking::Client,
    in_flight: Mutex<usize>,
    max_in_flight: usize,
    slot_freed: Condvar,
}

impl HttpChatBackend {
    pub fn new(base_url: impl Into<String>, api_key_env: impl Into<String>, max_in_flight: usize) -> Self {
        HttpChatBackend {
            base_url: base_url.into(),
            api_key_env: api_key_env.into(),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("http client"),
            in_flight: Mutex::new(0),
            max_in_flight: max_in_flight.max(1),
            slot_freed: Condvar::new(),
        }
    }

    fn acquire_slot(&self) {
        let mut count = self.in_flight.lock().expect("in-flight lock");
        while *count >= self.max_in_flight {
            count = self.slot_freed.wait(count).expect("in-flight wait");
        }
        *count += 1;
    }

    fn release_slot(&self) {
        let mut count = self.in_flight.lock().expect("in-flight lock");
        *count -= 1;
        self.slot_freed.notify_one();
    }

    fn post_once(&self, request: &ChatRequest, api_key: &str) -> Result<ChatResponse, BackendError> {
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let started = Instant::now();
        let response = self
            .client
            .post(&url)
            .bearer_auth(api_key)
            .json(&body)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let message = response.text().unwrap_or_default();
            return Err(BackendError::Http {
                status: status.as_u16(),
                message,
            });
        }
        let parsed: CompletionsResponse = response
            .json()
            .map_err(|e| BackendError::Transport(format!("bad response body: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::Transport("response had no choices".into()))?;
        Ok(ChatResponse {
            content,
            prompt_tokens: parsed.usage.as_ref().map(|u| u.prompt_tokens).unwrap_or(0),
            completion_tokens: parsed
                .usage
                .as_ref()
                .map(|u| u.completion_tokens)
                .unwrap_or(0),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

fn transient(error: &BackendError) -> bool {
    match error {
        BackendError::Transport(_) => true,
        BackendError::Http { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl ChatBackend for HttpChatBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let api_key = std::env::var(&self.api_key_env)
            .map_err(|_| BackendError::MissingApiKey(self.api_key_env.clone()))?;
        self.acquire_slot();
        let result = (|| {
            let mut last_error = None;
            for attempt in 0..=MAX_RETRIES {
                match self.post_once(request, &api_key) {
                    Ok(response) => return Ok(response),
                    Err(e) if transient(&e) && attempt < MAX_RETRIES => {
                        std::thread::sleep(Duration::from_millis(BACKOFF_BASE_MS << attempt));
                        last_error = Some(e);
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(last_error.expect("retry loop always records an error"))
        })();
        self.release_slot();
        result
    }
}

#[derive(Deserialize)]
struct CompletionsResponse {
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}
