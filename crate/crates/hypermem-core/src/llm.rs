//! Chat providers: the OpenAI-compatible HTTP client and the scripted
//! fixture provider used for reproducible runs.
//!
//! Scripted fixtures are keyed by `(tag, step, seq)` — the prompt role,
//! the session step, and the call sequence within that role and step —
//! rather than by prompt text, so prompt-template edits do not
//! invalidate recorded fixtures.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, TokenizerSpec};
use crate::error::{EngineError, Result};
use crate::store;

/// One message of a chat conversation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// A single chat call. `tag` labels the prompt role for tracing and
/// fixture matching; `step` is the session step the call belongs to.
#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub tag: String,
    pub step: u32,
}

impl ChatRequest {
    pub fn new(tag: &str, step: u32, messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            // Inference defaults; overridable through the gateway.
            temperature: 0.8,
            max_output_tokens: 2048,
            tag: tag.to_string(),
            step,
        }
    }
}

/// Provider reply plus accounting metadata.
#[derive(Debug, Clone)]
pub struct ChatOutcome {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Zero for scripted providers so traces stay byte-identical.
    pub latency_ms: u64,
    /// Sequence number assigned within (tag, step).
    pub seq: u32,
}

pub trait ChatProvider: Send + Sync {
    fn name(&self) -> &str;

    fn chat(&self, req: &ChatRequest) -> Result<ChatOutcome>;
}

/// Deterministic fixture playback keyed by `(tag, step, seq)`.
pub struct ScriptedChatProvider {
    responses: HashMap<(String, u32, u32), String>,
    counters: Mutex<HashMap<(String, u32), u32>>,
}

/// One fixture line: the response to the seq-th call of `tag` at `step`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatFixture {
    pub tag: String,
    pub step: u32,
    pub seq: u32,
    pub response: String,
}

impl ScriptedChatProvider {
    pub fn new(fixtures: Vec<ChatFixture>) -> Self {
        let responses = fixtures
            .into_iter()
            .map(|f| ((f.tag, f.step, f.seq), f.response))
            .collect();
        Self {
            responses,
            counters: Mutex::new(HashMap::new()),
        }
    }

    /// Loads a JSONL fixture file.
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(store::read_jsonl(path)?))
    }
}

impl ChatProvider for ScriptedChatProvider {
    fn name(&self) -> &str {
        "scripted"
    }

    fn chat(&self, req: &ChatRequest) -> Result<ChatOutcome> {
        let seq = {
            let mut counters = self.counters.lock().expect("counter lock poisoned");
            let c = counters.entry((req.tag.clone(), req.step)).or_insert(0);
            let seq = *c;
            *c += 1;
            seq
        };
        let text = self
            .responses
            .get(&(req.tag.clone(), req.step, seq))
            .cloned()
            .ok_or_else(|| EngineError::FixtureMiss {
                tag: req.tag.clone(),
                step: req.step,
                seq,
            })?;
        let prompt_tokens = req
            .messages
            .iter()
            .map(|m| tokenize(&m.content, TokenizerSpec::Whitespace).len() as u64)
            .sum();
        let completion_tokens = tokenize(&text, TokenizerSpec::Whitespace).len() as u64;
        Ok(ChatOutcome {
            text,
            prompt_tokens,
            completion_tokens,
            latency_ms: 0,
            seq,
        })
    }
}

/// OpenAI-compatible `/v1/chat/completions` client with bounded
/// exponential retries on transport failures.
pub struct HttpChatProvider {
    base_url: String,
    model: String,
    api_key: Option<String>,
    max_retries: u32,
    client: reqwest::blocking::Client,
    counters: Mutex<HashMap<(String, u32), u32>>,
}

#[derive(Serialize)]
struct CompletionsRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct CompletionsResponse {
    choices: Vec<CompletionChoice>,
    #[serde(default)]
    usage: Option<CompletionUsage>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
}

#[derive(Deserialize)]
struct CompletionMessage {
    content: String,
}

#[derive(Deserialize, Default)]
struct CompletionUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpChatProvider {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            max_retries: 3,
            client: reqwest::blocking::Client::new(),
            counters: Mutex::new(HashMap::new()),
        }
    }
}

impl ChatProvider for HttpChatProvider {
    fn name(&self) -> &str {
        "http"
    }

    fn chat(&self, req: &ChatRequest) -> Result<ChatOutcome> {
        let seq = {
            let mut counters = self.counters.lock().expect("counter lock poisoned");
            let c = counters.entry((req.tag.clone(), req.step)).or_insert(0);
            let seq = *c;
            *c += 1;
            seq
        };
        let started = Instant::now();
        let mut last_err = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(500 * (1 << attempt.min(4))));
            }
            let mut http = self
                .client
                .post(format!("{}/v1/chat/completions", self.base_url))
                .json(&CompletionsRequest {
                    model: &self.model,
                    messages: &req.messages,
                    temperature: req.temperature,
                    max_tokens: req.max_output_tokens,
                });
            if let Some(key) = &self.api_key {
                http = http.bearer_auth(key);
            }
            match http.send().and_then(|r| r.error_for_status()) {
                Ok(resp) => {
                    let body: CompletionsResponse =
                        resp.json().map_err(|e| EngineError::ProviderTransport {
                            attempts: attempt + 1,
                            reason: e.to_string(),
                        })?;
                    let text = body
                        .choices
                        .into_iter()
                        .next()
                        .map(|c| c.message.content)
                        .ok_or_else(|| EngineError::ProviderTransport {
                            attempts: attempt + 1,
                            reason: "response carried no choices".into(),
                        })?;
                    let usage = body.usage.unwrap_or_default();
                    return Ok(ChatOutcome {
                        text,
                        prompt_tokens: usage.prompt_tokens,
                        completion_tokens: usage.completion_tokens,
                        latency_ms: started.elapsed().as_millis() as u64,
                        seq,
                    });
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(EngineError::ProviderTransport {
            attempts: self.max_retries + 1,
            reason: last_err,
        })
    }
}
