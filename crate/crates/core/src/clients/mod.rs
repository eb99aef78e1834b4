//! Clients for the three external model services: the policy endpoint
//! (rollouts), a general LLM endpoint (synthesis agents), and the
//! answer-judge endpoint.
//!
//! All three speak one wire protocol, a chat-completions-style JSON HTTP
//! API with image parts carried as base64 data URLs. Transports are
//! pluggable behind [`ChatTransport`]: live HTTP, scripted stubs, and
//! record/replay cassettes, so every pipeline test can run with zero live
//! network.

use crate::model::ChartImage;
use serde::{Deserialize, Serialize};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

pub mod cassette;
pub mod transport;

pub use cassette::{CassetteRecorder, CassetteReplayer};
pub use transport::{HttpTransport, ScriptedReply, ScriptedTransport, TurnScriptTransport};

/// Prompt template version for the judge, recorded in run manifests.
pub const JUDGE_TEMPLATE_VERSION: &str = "judge-v1";

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("endpoint unavailable after {attempts} attempts: {last}")]
    EndpointUnavailable { attempts: u32, last: String },
    #[error("request deadline exceeded")]
    DeadlineExceeded,
    #[error("malformed reply: {0}")]
    MalformedReply(String),
    #[error("judge verdict unparseable: {0:?}")]
    UnparseableVerdict(String),
    #[error("cassette has no recorded response for this request: {0}")]
    CassetteMiss(String),
    #[error("scripted transport exhausted")]
    ScriptExhausted,
    #[error("endpoint did not return token logprobs")]
    LogprobsUnsupported,
}

impl ClientError {
    fn is_transient(&self) -> bool {
        matches!(
            self,
            ClientError::EndpointUnavailable { .. } | ClientError::DeadlineExceeded
        )
    }
}

/// Message role in the conversation context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// One content part: text or an image payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Part {
    Text(String),
    Image(ChartImage),
}

/// One message in the context carried to an endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<Part>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self { role: Role::System, content: vec![Part::Text(text.into())] }
    }

    pub fn user_text(text: impl Into<String>) -> Self {
        Self { role: Role::User, content: vec![Part::Text(text.into())] }
    }

    pub fn user_parts(content: Vec<Part>) -> Self {
        Self { role: Role::User, content }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: vec![Part::Text(text.into())] }
    }
}

/// Sampling controls for one completion call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_logprobs: bool,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self { temperature: 1.0, max_tokens: 2048, want_logprobs: false }
    }
}

/// Wire-level request; construction is deterministic given the messages,
/// sampling, and model, which makes requests usable as cassette keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub logprobs: bool,
    pub messages: Vec<WireMessage>,
}

impl ChatRequest {
    pub fn new(model: &str, messages: &[ChatMessage], sampling: &SamplingParams) -> Self {
        Self {
            model: model.to_string(),
            temperature: sampling.temperature,
            max_tokens: sampling.max_tokens,
            logprobs: sampling.want_logprobs,
            messages: messages.iter().map(WireMessage::from).collect(),
        }
    }

    /// Canonical single-line JSON form, the cassette key.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("request serialization cannot fail")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: Role,
    pub content: Vec<WirePart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WirePart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

impl From<&ChatMessage> for WireMessage {
    fn from(m: &ChatMessage) -> Self {
        let content = m
            .content
            .iter()
            .map(|part| match part {
                Part::Text(text) => WirePart::Text { text: text.clone() },
                Part::Image(image) => {
                    use base64::Engine;
                    let b64 = base64::engine::general_purpose::STANDARD.encode(image.to_png());
                    WirePart::ImageUrl {
                        image_url: ImageUrl { url: format!("data:image/png;base64,{b64}") },
                    }
                }
            })
            .collect();
        WireMessage { role: m.role, content }
    }
}

/// One token with its log-probability under the serving policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

/// Endpoint reply: raw assistant text plus optional per-token logprobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
}

/// Raw policy turn text plus optional logprobs.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyReply {
    pub text: String,
    pub token_logprobs: Option<Vec<TokenLogprob>>,
}

/// Judge decision on a predicted answer.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgeVerdict {
    pub correct: bool,
    pub raw: String,
}

/// Pluggable completion backend.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError>;
}

/// Retry policy for transient transport failures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryConfig {
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self { max_retries: 3, backoff_ms: 200 }
    }
}

/// Shared handle onto one endpoint: transport + model + retry policy +
/// in-flight bound. Cheap to clone.
#[derive(Clone)]
pub struct ModelClient {
    transport: Arc<dyn ChatTransport>,
    model: String,
    retry: RetryConfig,
    inflight: Arc<Semaphore>,
}

impl ModelClient {
    pub fn new(transport: Arc<dyn ChatTransport>, model: impl Into<String>) -> Self {
        Self {
            transport,
            model: model.into(),
            retry: RetryConfig::default(),
            inflight: Arc::new(Semaphore::new(16)),
        }
    }

    pub fn with_retry(mut self, retry: RetryConfig) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_inflight(mut self, n: usize) -> Self {
        self.inflight = Arc::new(Semaphore::new(n.max(1)));
        self
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    /// One completion with retries on transient failures; a well-formed
    /// reply is never retried.
    pub fn complete(
        &self,
        messages: &[ChatMessage],
        sampling: &SamplingParams,
    ) -> Result<ChatResponse, ClientError> {
        let request = ChatRequest::new(&self.model, messages, sampling);
        let _slot = self.inflight.acquire();
        let mut last_err = None;
        for attempt in 0..=self.retry.max_retries {
            match self.transport.complete(&request) {
                Ok(response) => return Ok(response),
                Err(e) if e.is_transient() => {
                    last_err = Some(e);
                    if attempt < self.retry.max_retries && self.retry.backoff_ms > 0 {
                        std::thread::sleep(Duration::from_millis(
                            self.retry.backoff_ms << attempt.min(6),
                        ));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let last = last_err.expect("loop ran at least once");
        Err(match last {
            ClientError::DeadlineExceeded => ClientError::DeadlineExceeded,
            other => ClientError::EndpointUnavailable {
                attempts: self.retry.max_retries + 1,
                last: other.to_string(),
            },
        })
    }
}

/// Client for the policy endpoint driving rollouts.
#[derive(Clone)]
pub struct PolicyClient {
    client: ModelClient,
}

impl PolicyClient {
    pub fn new(client: ModelClient) -> Self {
        Self { client }
    }

    /// Requests one assistant turn. With `want_logprobs` set, an endpoint
    /// that cannot return logprobs is a capability error.
    pub fn complete(
        &self,
        messages: &[ChatMessage],
        sampling: &SamplingParams,
    ) -> Result<PolicyReply, ClientError> {
        let response = self.client.complete(messages, sampling)?;
        if sampling.want_logprobs {
            match &response.token_logprobs {
                Some(lps) if lps.iter().all(|l| l.logprob.is_finite()) => {}
                Some(_) => {
                    return Err(ClientError::MalformedReply(
                        "non-finite token logprob".into(),
                    ))
                }
                None => return Err(ClientError::LogprobsUnsupported),
            }
        }
        Ok(PolicyReply {
            text: response.text,
            token_logprobs: response.token_logprobs,
        })
    }
}

/// Client for a general-purpose LLM endpoint (synthesis agents).
#[derive(Clone)]
pub struct LlmClient {
    client: ModelClient,
}

impl LlmClient {
    pub fn new(client: ModelClient) -> Self {
        Self { client }
    }

    pub fn complete(
        &self,
        messages: &[ChatMessage],
        sampling: &SamplingParams,
    ) -> Result<String, ClientError> {
        Ok(self.client.complete(messages, sampling)?.text)
    }
}

/// Client for the answer judge. The prompt template is deterministic and the
/// verdict is parsed from a constrained yes/no reply.
#[derive(Clone)]
pub struct JudgeClient {
    client: ModelClient,
}

impl JudgeClient {
    pub fn new(client: ModelClient) -> Self {
        Self { client }
    }

    pub fn judge_answer(
        &self,
        question: &str,
        gold: &str,
        pred: &str,
    ) -> Result<JudgeVerdict, ClientError> {
        let messages = [
            ChatMessage::system(
                "You compare a predicted answer against the gold answer for a chart question. \
                 Judge semantic equivalence, tolerating formatting differences. \
                 Reply with exactly one word: yes or no.",
            ),
            ChatMessage::user_text(format!(
                "Question: {question}\nGold answer: {gold}\nPredicted answer: {pred}\nDo they match?"
            )),
        ];
        let sampling = SamplingParams { temperature: 0.0, max_tokens: 8, want_logprobs: false };
        let raw = self.client.complete(&messages, &sampling)?.text;
        let normalized: String = raw
            .trim()
            .to_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphabetic())
            .collect();
        match normalized.as_str() {
            "yes" => Ok(JudgeVerdict { correct: true, raw }),
            "no" => Ok(JudgeVerdict { correct: false, raw }),
            _ => Err(ClientError::UnparseableVerdict(raw)),
        }
    }
}

/// Counting semaphore bounding concurrent in-flight requests per endpoint.
pub(crate) struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self { permits: Mutex::new(permits), cv: Condvar::new() }
    }

    pub fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.cv.wait(permits).unwrap();
        }
        *permits -= 1;
        SemaphoreGuard { sem: self }
    }
}

pub(crate) struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().unwrap() += 1;
        self.sem.cv.notify_one();
    }
}
