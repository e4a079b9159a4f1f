//! Remote chat-completion client.
//!
//! The wire shape is a chat-completion POST (`model`, `messages`,
//! `max_tokens`, `temperature`, optional `seed`) answered with
//! `choices[0].message.content`. Only [`encode_request`] and
//! [`decode_response`] know that shape.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::clock::Clock;
use super::ratelimit::TokenBucket;
use super::retry::{full_jitter_ms, is_retryable_status};
use super::{BackendConfig, BackendError, ChatBackend, ChatRequest, ChatResponse, FinishReason};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFailure {
    Timeout,
    Connection(String),
}

/// Sends one POST and reports the raw outcome.
pub trait HttpTransport: Send + Sync {
    fn post(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &str,
    ) -> Result<HttpReply, TransportFailure>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout_ms: u64) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl HttpTransport for UreqTransport {
    fn post(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &str,
    ) -> Result<HttpReply, TransportFailure> {
        let mut req = self.agent.post(url);
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        match req.send(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let body = resp
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| TransportFailure::Connection(e.to_string()))?;
                Ok(HttpReply { status, body })
            }
            Err(ureq::Error::Timeout(_)) => Err(TransportFailure::Timeout),
            Err(e) => Err(TransportFailure::Connection(e.to_string())),
        }
    }
}

pub fn encode_request(request: &ChatRequest) -> String {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
        .collect();
    let mut body = json!({
        "model": request.model_name,
        "messages": messages,
        "max_tokens": request.max_tokens,
        "temperature": request.temperature,
    });
    if let Some(seed) = request.seed {
        body["seed"] = json!(seed);
    }
    body.to_string()
}

/// Pull `(content, finish_reason)` out of a chat-completion reply.
pub fn decode_response(body: &str) -> Result<(String, FinishReason), BackendError> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| BackendError::Response(e.to_string()))?;
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Response("no choices in reply".into()))?;
    let content = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Response("choice has no message content".into()))?
        .to_string();
    let finish = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("length") => FinishReason::Length,
        Some("stop") | None => FinishReason::Stop,
        Some(_) => FinishReason::Error,
    };
    if finish == FinishReason::Stop && content.is_empty() {
        return Err(BackendError::Response("empty content with stop reason".into()));
    }
    Ok((content, finish))
}

pub struct RemoteBackend {
    config: BackendConfig,
    transport: Arc<dyn HttpTransport>,
    clock: Arc<dyn Clock>,
    jitter: Mutex<ChaCha8Rng>,
    limiter: Option<TokenBucket>,
}

impl RemoteBackend {
    pub fn new(
        config: BackendConfig,
        transport: Arc<dyn HttpTransport>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, BackendError> {
        config.validate()?;
        Ok(Self {
            limiter: config.rate_limit_per_min.map(TokenBucket::per_minute),
            jitter: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed)),
            config,
            transport,
            clock,
        })
    }

    fn headers(&self) -> Result<Vec<(String, String)>, BackendError> {
        let mut headers = vec![("Content-Type".to_string(), "application/json".to_string())];
        if let Some(var) = &self.config.api_key_env {
            let key = std::env::var(var).map_err(|_| {
                BackendError::Config(format!("environment variable {var} is not set"))
            })?;
            headers.push(("Authorization".to_string(), format!("Bearer {key}")));
        }
        Ok(headers)
    }

    fn backoff(&self, attempt: u32) {
        let ms = {
            let mut rng = self.jitter.lock().unwrap_or_else(|e| e.into_inner());
            full_jitter_ms(self.config.backoff_base_ms, attempt, &mut *rng)
        };
        self.clock.sleep_ms(ms);
    }
}

impl ChatBackend for RemoteBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let headers = self.headers()?;
        let url = self.config.endpoint_url.as_deref().unwrap_or_default();
        let mut request = request.clone();
        if let Some(model) = &self.config.model_name {
            request.model_name = model.clone();
        }
        let body = encode_request(&request);
        let max_attempts = self.config.max_retries + 1;
        let mut last_status = None;
        let mut last_message = String::new();
        for attempt in 1..=max_attempts {
            if let Some(limiter) = &self.limiter {
                limiter.acquire(self.clock.as_ref());
            }
            let started = self.clock.now_ms();
            match self.transport.post(url, &headers, &body) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    let (content, finish_reason) = decode_response(&reply.body)?;
                    return Ok(ChatResponse {
                        content,
                        finish_reason,
                        latency_ms: self.clock.now_ms().saturating_sub(started),
                        attempt_count: attempt,
                    });
                }
                Ok(reply) if is_retryable_status(reply.status) => {
                    last_status = Some(reply.status);
                    last_message = reply.body;
                }
                Ok(reply) => {
                    return Err(BackendError::Request { status: reply.status, body: reply.body })
                }
                Err(TransportFailure::Timeout) => last_message = "timeout".into(),
                Err(TransportFailure::Connection(msg)) => last_message = msg,
            }
            tracing::debug!(attempt, ?last_status, "transient failure from {url}");
            if attempt < max_attempts {
                self.backoff(attempt);
            }
        }
        Err(BackendError::Transport { last_status, attempts: max_attempts, message: last_message })
    }
}
