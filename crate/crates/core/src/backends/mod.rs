//! Chat-completion backends: a remote HTTP client and deterministic
//! synthetic agents.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::CompetencyDimension;
use crate::hash::Fnv1a;

pub mod clock;
pub mod http;
pub mod ratelimit;
pub mod retry;
pub mod synthetic;

pub use clock::{Clock, ManualClock, SystemClock};
pub use http::{HttpReply, HttpTransport, RemoteBackend, TransportFailure, UreqTransport};
pub use synthetic::{judge_win_probability, synthetic_judge_relation, ScriptReplay, SyntheticJudge, SyntheticTherapist};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::System => "system",
            Self::User => "user",
            Self::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub model_name: String,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(model_name: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            model_name: model_name.into(),
            max_tokens: 1024,
            temperature: 0.7,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("messages must not be empty".into()));
        }
        if self.messages.iter().skip(1).any(|m| m.role == Role::System) {
            return Err(BackendError::InvalidRequest(
                "a system message may only appear first".into(),
            ));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }

    pub fn system_prompt(&self) -> Option<&str> {
        self.messages
            .first()
            .filter(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
    }

    pub fn last_user(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    /// Stable hash of everything that determines a synthetic reply.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_str(&self.model_name).write_u64(u64::from(self.max_tokens));
        h.write_u64(self.temperature.to_bits());
        h.write_u64(self.seed.map_or(u64::MAX, |s| s));
        for m in &self.messages {
            h.write_str(m.role.as_str()).write(&[0]).write_str(&m.content).write(&[0]);
        }
        h.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

impl ChatResponse {
    pub fn stop(content: String, latency_ms: u64, attempt_count: u32) -> Self {
        Self { content, finish_reason: FinishReason::Stop, latency_ms, attempt_count }
    }
}

/// Latent per-dimension skill in Elo points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillVector {
    pub per_dimension: BTreeMap<CompetencyDimension, f64>,
    #[serde(default)]
    pub seed: u64,
}

impl SkillVector {
    pub fn uniform(value: f64, seed: u64) -> Self {
        Self {
            per_dimension: CompetencyDimension::ALL.into_iter().map(|d| (d, value)).collect(),
            seed,
        }
    }

    pub fn get(&self, dim: CompetencyDimension) -> f64 {
        self.per_dimension.get(&dim).copied().unwrap_or(0.0)
    }

    pub fn is_complete(&self) -> bool {
        CompetencyDimension::ALL.iter().all(|d| self.per_dimension.contains_key(d))
    }

    /// Mean over all twelve dimensions.
    pub fn comprehensive(&self) -> f64 {
        CompetencyDimension::ALL.iter().map(|d| self.get(*d)).sum::<f64>() / 12.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackendKind {
    RemoteHttp,
    SyntheticTherapist,
    SyntheticJudge,
    ScriptReplay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_limit_per_min: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skill: Option<SkillVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    /// Seed for synthetic replies and retry jitter.
    #[serde(default)]
    pub seed: u64,
    /// Synthetic judge: decoded skill gaps at or below this are ties.
    #[serde(default)]
    pub tie_margin: f64,
    /// Synthetic judge: Elo points added to the first-shown side.
    #[serde(default)]
    pub position_bias: f64,
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_base_ms() -> u64 {
    500
}

impl BackendConfig {
    fn base(kind: BackendKind) -> Self {
        Self {
            kind,
            endpoint_url: None,
            api_key_env: None,
            model_name: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_base_ms(),
            rate_limit_per_min: None,
            skill: None,
            noise: None,
            seed: 0,
            tie_margin: 0.0,
            position_bias: 0.0,
        }
    }

    pub fn remote(endpoint_url: impl Into<String>, api_key_env: Option<String>) -> Self {
        Self {
            endpoint_url: Some(endpoint_url.into()),
            api_key_env,
            ..Self::base(BackendKind::RemoteHttp)
        }
    }

    pub fn synthetic_therapist(skill: SkillVector) -> Self {
        Self {
            seed: skill.seed,
            skill: Some(skill),
            ..Self::base(BackendKind::SyntheticTherapist)
        }
    }

    pub fn synthetic_judge(noise: f64, seed: u64) -> Self {
        Self { noise: Some(noise), seed, ..Self::base(BackendKind::SyntheticJudge) }
    }

    pub fn script_replay(seed: u64) -> Self {
        Self { seed, ..Self::base(BackendKind::ScriptReplay) }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let fail = |msg: &str| Err(BackendError::Config(msg.to_string()));
        if self.timeout_ms == 0 {
            return fail("timeout_ms must be positive");
        }
        if self.backoff_base_ms == 0 {
            return fail("backoff_base_ms must be positive");
        }
        if self.rate_limit_per_min == Some(0) {
            return fail("rate_limit_per_min must be positive");
        }
        match self.kind {
            BackendKind::RemoteHttp if self.endpoint_url.is_none() => {
                fail("RemoteHttp requires endpoint_url")
            }
            BackendKind::SyntheticTherapist => match &self.skill {
                None => fail("SyntheticTherapist requires skill"),
                Some(s) if !s.is_complete() => fail("skill must cover all 12 dimensions"),
                Some(_) => Ok(()),
            },
            BackendKind::SyntheticJudge => match self.noise {
                None => fail("SyntheticJudge requires noise"),
                Some(n) if !(0.0..=1.0).contains(&n) => fail("noise must lie in [0, 1]"),
                Some(_) if self.tie_margin < 0.0 => fail("tie_margin must be >= 0"),
                Some(_) => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("request rejected with HTTP {status}: {body}")]
    Request { status: u16, body: String },
    #[error("transport failed after {attempts} attempts (last status {}): {message}", status_text(*.last_status))]
    Transport { last_status: Option<u16>, attempts: u32, message: String },
    #[error("malformed response: {0}")]
    Response(String),
}

fn status_text(status: Option<u16>) -> String {
    status.map_or_else(|| "none".to_string(), |s| s.to_string())
}

/// Anything that can answer a chat request. Implementations are safe to call
/// from several threads at once.
pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).chat(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).chat(request)
    }
}

/// A backend built from a [`BackendConfig`].
pub enum Backend {
    Remote(Box<RemoteBackend>),
    Therapist(SyntheticTherapist),
    Judge(SyntheticJudge),
    Replay(ScriptReplay),
}

impl fmt::Debug for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Remote(_) => "Remote",
            Self::Therapist(_) => "Therapist",
            Self::Judge(_) => "Judge",
            Self::Replay(_) => "Replay",
        };
        f.debug_tuple("Backend").field(&name).finish()
    }
}

impl Backend {
    pub fn from_config(config: &BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        Ok(match config.kind {
            BackendKind::RemoteHttp => Self::Remote(Box::new(RemoteBackend::new(
                config.clone(),
                Arc::new(UreqTransport::new(config.timeout_ms)),
                Arc::new(SystemClock::new()),
            )?)),
            BackendKind::SyntheticTherapist => Self::Therapist(SyntheticTherapist::new(config)?),
            BackendKind::SyntheticJudge => Self::Judge(SyntheticJudge::new(config)?),
            BackendKind::ScriptReplay => Self::Replay(ScriptReplay::new(config.seed)),
        })
    }
}

impl ChatBackend for Backend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        match self {
            Self::Remote(b) => b.chat(request),
            Self::Therapist(b) => b.chat(request),
            Self::Judge(b) => b.chat(request),
            Self::Replay(b) => b.chat(request),
        }
    }
}

/// One-shot convenience: build the backend for `config` and send `request`.
pub fn chat(config: &BackendConfig, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
    Backend::from_config(config)?.chat(request)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        let mut remote = BackendConfig::remote("http://x", None);
        assert!(remote.validate().is_ok());
        remote.endpoint_url = None;
        assert!(matches!(remote.validate(), Err(BackendError::Config(_))));

        let mut th = BackendConfig::synthetic_therapist(SkillVector::uniform(100.0, 1));
        assert!(th.validate().is_ok());
        th.skill = None;
        assert!(th.validate().is_err());

        assert!(BackendConfig::synthetic_judge(0.1, 1).validate().is_ok());
        assert!(BackendConfig::synthetic_judge(1.5, 1).validate().is_err());
        let mut j = BackendConfig::synthetic_judge(0.1, 1);
        j.noise = None;
        assert!(j.validate().is_err());
    }

    #[test]
    fn request_invariants() {
        let ok = ChatRequest::new("m", vec![ChatMessage::system("s"), ChatMessage::user("u")]);
        assert!(ok.validate().is_ok());
        assert!(ChatRequest::new("m", vec![]).validate().is_err());
        let late_system =
            ChatRequest::new("m", vec![ChatMessage::user("u"), ChatMessage::system("s")]);
        assert!(late_system.validate().is_err());
    }

    #[test]
    fn fingerprint_separates_messages() {
        let a = ChatRequest::new("m", vec![ChatMessage::user("ab"), ChatMessage::user("c")]);
        let b = ChatRequest::new("m", vec![ChatMessage::user("a"), ChatMessage::user("bc")]);
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
    }

    #[test]
    fn config_never_carries_the_secret() {
        let c = BackendConfig::remote("http://x", Some("SECRET_ENV".into()));
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("SECRET_ENV"));
        let back: BackendConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }
}
