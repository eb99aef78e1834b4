//! Transport implementations: live HTTP and scripted stubs.

use super::{ChatRequest, ChatResponse, ChatTransport, ClientError, TokenLogprob};
use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

/// Live chat-completions HTTP transport.
///
/// Posts the request JSON to the configured URL with an optional bearer key
/// taken from the environment variable named in config, and parses the
/// standard `choices[0].message.content` (+ optional
/// `choices[0].logprobs.content`) reply shape.
pub struct HttpTransport {
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, api_key_env: Option<&str>, timeout_s: f64) -> Self {
        let api_key = api_key_env.and_then(|var| std::env::var(var).ok());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(timeout_s.max(1.0)))
            .build()
            .expect("reqwest client construction");
        Self { url: url.into(), api_key, client }
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let mut builder = self.client.post(&self.url).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                ClientError::DeadlineExceeded
            } else {
                ClientError::EndpointUnavailable { attempts: 1, last: e.to_string() }
            }
        })?;
        let status = response.status();
        let body = response.text().map_err(|e| ClientError::EndpointUnavailable {
            attempts: 1,
            last: format!("reading body: {e}"),
        })?;
        if status.is_server_error() {
            return Err(ClientError::EndpointUnavailable {
                attempts: 1,
                last: format!("{status}: {body}"),
            });
        }
        if !status.is_success() {
            return Err(ClientError::MalformedReply(format!("{status}: {body}")));
        }
        parse_chat_completion(&body)
    }
}

fn parse_chat_completion(body: &str) -> Result<ChatResponse, ClientError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| ClientError::MalformedReply(e.to_string()))?;
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| ClientError::MalformedReply("missing choices[0]".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(|c| c.as_str())
        .ok_or_else(|| ClientError::MalformedReply("missing message content".into()))?
        .to_string();
    let token_logprobs = choice
        .pointer("/logprobs/content")
        .and_then(|c| c.as_array())
        .map(|entries| {
            entries
                .iter()
                .map(|e| {
                    let token = e.get("token").and_then(|t| t.as_str()).unwrap_or_default();
                    let logprob = e.get("logprob").and_then(|l| l.as_f64());
                    logprob
                        .map(|lp| TokenLogprob { token: token.to_string(), logprob: lp })
                        .ok_or_else(|| ClientError::MalformedReply("logprob entry".into()))
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .transpose()?;
    Ok(ChatResponse { text, token_logprobs })
}

/// One scripted endpoint reply.
#[derive(Debug, Clone)]
pub enum ScriptedReply {
    Text(String),
    WithLogprobs(String, Vec<TokenLogprob>),
    /// Simulated transport failure.
    Unavailable,
}

impl ScriptedReply {
    pub fn text(s: impl Into<String>) -> Self {
        ScriptedReply::Text(s.into())
    }

    pub fn with_logprobs(s: impl Into<String>, lps: Vec<TokenLogprob>) -> Self {
        ScriptedReply::WithLogprobs(s.into(), lps)
    }

    fn into_result(self) -> Result<ChatResponse, ClientError> {
        match self {
            ScriptedReply::Text(text) => Ok(ChatResponse { text, token_logprobs: None }),
            ScriptedReply::WithLogprobs(text, lps) => {
                Ok(ChatResponse { text, token_logprobs: Some(lps) })
            }
            ScriptedReply::Unavailable => Err(ClientError::EndpointUnavailable {
                attempts: 1,
                last: "scripted failure".into(),
            }),
        }
    }
}

/// Stub endpoint consuming a fixed reply queue in call order.
pub struct ScriptedTransport {
    script: Mutex<VecDeque<ScriptedReply>>,
}

impl ScriptedTransport {
    pub fn new(replies: Vec<ScriptedReply>) -> Self {
        Self { script: Mutex::new(replies.into()) }
    }

    /// A transport where every call fails as unavailable.
    pub fn failing() -> Self {
        Self::new(vec![])
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().unwrap().len()
    }
}

impl ChatTransport for ScriptedTransport {
    fn complete(&self, _request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let next = self.script.lock().unwrap().pop_front();
        match next {
            Some(reply) => reply.into_result(),
            None => Err(ClientError::EndpointUnavailable {
                attempts: 1,
                last: "script exhausted".into(),
            }),
        }
    }
}

/// Stub endpoint that selects the reply by conversation depth: the number of
/// assistant messages already in the request indexes into `turns`. Depth
/// keying keeps concurrent rollouts deterministic, unlike a shared queue.
pub struct TurnScriptTransport {
    turns: Vec<ScriptedReply>,
    repeat_last: bool,
}

impl TurnScriptTransport {
    pub fn new(turns: Vec<ScriptedReply>) -> Self {
        Self { turns, repeat_last: false }
    }

    /// Past the end of the script, keep replaying the final turn (for
    /// adversarial "loops forever" policies).
    pub fn repeating_last(mut self) -> Self {
        self.repeat_last = true;
        self
    }
}

impl ChatTransport for TurnScriptTransport {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let depth = request
            .messages
            .iter()
            .filter(|m| m.role == super::Role::Assistant)
            .count();
        let index = if depth < self.turns.len() {
            depth
        } else if self.repeat_last && !self.turns.is_empty() {
            self.turns.len() - 1
        } else {
            return Err(ClientError::ScriptExhausted);
        };
        self.turns[index].clone().into_result()
    }
}
