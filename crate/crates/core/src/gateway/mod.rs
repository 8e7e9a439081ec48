//! Uniform access to assessment, tagging and chat model providers.
//!
//! Every provider sits behind a [`Transport`]: remote and local HTTP
//! endpoints share [`HttpTransport`], and the deterministic [`MockTransport`]
//! serves offline runs. The gateway adds retries with full-jitter exponential
//! backoff, a per-request timeout and a per-provider concurrency cap.

mod http;
mod mock;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use parking_lot::RwLock;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::model::ProviderId;

pub use http::HttpTransport;
pub use mock::{content_words, mock_assess, mock_chat_reply, mock_tag, MockTransport};

const MAX_BACKOFF_MS: u64 = 30_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    RemoteApi,
    LocalApi,
    Mock,
}

/// Response shape spoken by the endpoint. Requests are identical for both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WireAdapter {
    /// `{"content": str}`
    #[default]
    Neutral,
    /// `{"choices": [{"message": {"content": str}}]}`
    OpenaiChat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub provider_id: ProviderId,
    pub kind: ProviderKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Model name sent on the wire; defaults to the provider id.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub adapter: WireAdapter,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub credentials_env: Option<String>,
    #[serde(default)]
    pub temperature: f32,
    #[serde(default = "defaults::max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "defaults::max_concurrent")]
    pub max_concurrent: usize,
    #[serde(default = "defaults::max_retries")]
    pub max_retries: u32,
    #[serde(default = "defaults::timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "defaults::backoff_base_ms")]
    pub backoff_base_ms: u64,
}

mod defaults {
    pub fn max_tokens() -> u32 {
        1024
    }
    pub fn max_concurrent() -> usize {
        4
    }
    pub fn max_retries() -> u32 {
        3
    }
    pub fn timeout_ms() -> u64 {
        60_000
    }
    pub fn backoff_base_ms() -> u64 {
        500
    }
}

impl ProviderConfig {
    pub fn mock(id: &str) -> Self {
        Self {
            provider_id: id.into(),
            kind: ProviderKind::Mock,
            endpoint: None,
            model: None,
            adapter: WireAdapter::Neutral,
            credentials_env: None,
            temperature: 0.0,
            max_tokens: defaults::max_tokens(),
            max_concurrent: 16,
            max_retries: defaults::max_retries(),
            timeout_ms: defaults::timeout_ms(),
            backoff_base_ms: defaults::backoff_base_ms(),
        }
    }

    pub fn http(id: &str, kind: ProviderKind, endpoint: &str) -> Self {
        Self {
            kind,
            endpoint: Some(endpoint.to_owned()),
            max_concurrent: defaults::max_concurrent(),
            ..Self::mock(id)
        }
    }

    pub fn model_name(&self) -> &str {
        self.model.as_deref().unwrap_or(self.provider_id.as_str())
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |why: &str| Err(GatewayError::InvalidConfig(format!("{}: {why}", self.provider_id)));
        if self.provider_id.as_str().trim().is_empty() {
            return bad("empty provider id");
        }
        if self.max_concurrent < 1 {
            return bad("max_concurrent must be at least 1");
        }
        if self.timeout_ms == 0 {
            return bad("timeout_ms must be positive");
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad("temperature must be a non-negative number");
        }
        if self.kind != ProviderKind::Mock {
            match self.endpoint.as_deref().map(reqwest::Url::parse) {
                Some(Ok(u)) if matches!(u.scheme(), "http" | "https") => {}
                Some(_) => return bad("endpoint is not an http(s) URL"),
                None => return bad("endpoint required for remote and local providers"),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// Neutral request body posted to every HTTP provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f32,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireResponse {
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("network error: {0}")]
    Network(String),
    /// The provider understood the request and refused it; not retried.
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Status { status, .. } => *status == 429 || *status >= 500,
            TransportError::Network(_) => true,
            TransportError::Rejected(_) | TransportError::Malformed(_) => false,
        }
    }
}

#[async_trait]
pub trait Transport: Send + Sync {
    async fn complete(
        &self,
        cfg: &ProviderConfig,
        request: &WireRequest,
    ) -> Result<String, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub provider_id: ProviderId,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("unknown provider `{0}`")]
    UnknownProvider(String),
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("provider `{provider}` failed after {attempts} attempt(s): {reason}")]
    ProviderFailed {
        provider: String,
        attempts: u32,
        reason: String,
    },
    #[error("provider `{provider}` timed out after {attempts} attempt(s)")]
    Timeout { provider: String, attempts: u32 },
}

impl GatewayError {
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::UnknownProvider(_) => "unknown_provider",
            GatewayError::InvalidConfig(_) => "invalid_config",
            GatewayError::EmptyPrompt => "empty_prompt",
            GatewayError::ProviderFailed { .. } => "provider_failed",
            GatewayError::Timeout { .. } => "timeout",
        }
    }
}

struct Entry {
    cfg: ProviderConfig,
    transport: Arc<dyn Transport>,
    permits: Semaphore,
}

/// Registry of providers. Cheap to share behind an `Arc`.
pub struct Gateway {
    providers: RwLock<HashMap<ProviderId, Arc<Entry>>>,
    http: Arc<dyn Transport>,
    mock: Arc<dyn Transport>,
}

impl Default for Gateway {
    fn default() -> Self {
        Self::new()
    }
}

impl Gateway {
    pub fn new() -> Self {
        Self::with_http_transport(Arc::new(HttpTransport::new()))
    }

    pub fn with_http_transport(http: Arc<dyn Transport>) -> Self {
        Self {
            providers: RwLock::new(HashMap::new()),
            http,
            mock: Arc::new(MockTransport),
        }
    }

    /// Registers or atomically replaces a provider. Calls already in flight
    /// finish under the configuration they started with.
    pub fn register_provider(&self, cfg: ProviderConfig) -> Result<(), GatewayError> {
        let transport = match cfg.kind {
            ProviderKind::Mock => self.mock.clone(),
            ProviderKind::RemoteApi | ProviderKind::LocalApi => self.http.clone(),
        };
        self.register_with_transport(cfg, transport)
    }

    pub fn register_with_transport(
        &self,
        cfg: ProviderConfig,
        transport: Arc<dyn Transport>,
    ) -> Result<(), GatewayError> {
        cfg.validate()?;
        let entry = Arc::new(Entry {
            permits: Semaphore::new(cfg.max_concurrent),
            cfg,
            transport,
        });
        self.providers
            .write()
            .insert(entry.cfg.provider_id.clone(), entry);
        Ok(())
    }

    pub fn contains(&self, id: &ProviderId) -> bool {
        self.providers.read().contains_key(id)
    }

    pub fn config(&self, id: &ProviderId) -> Option<ProviderConfig> {
        self.providers.read().get(id).map(|e| e.cfg.clone())
    }

    /// Registered configurations, sorted by provider id.
    pub fn providers(&self) -> Vec<ProviderConfig> {
        let mut v: Vec<_> = self.providers.read().values().map(|e| e.cfg.clone()).collect();
        v.sort_by(|a, b| a.provider_id.cmp(&b.provider_id));
        v
    }

    pub async fn generate(&self, id: &ProviderId, prompt: &str) -> Result<Completion, GatewayError> {
        if prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        self.chat(id, vec![ChatMessage::user(prompt)]).await
    }

    pub async fn chat(
        &self,
        id: &ProviderId,
        messages: Vec<ChatMessage>,
    ) -> Result<Completion, GatewayError> {
        let entry = self
            .providers
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| GatewayError::UnknownProvider(id.to_string()))?;
        if messages.is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let cfg = &entry.cfg;
        let request = WireRequest {
            model: cfg.model_name().to_owned(),
            messages,
            temperature: cfg.temperature,
            max_tokens: cfg.max_tokens,
        };
        let timeout = Duration::from_millis(cfg.timeout_ms);
        let started = Instant::now();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let outcome = {
                let _permit = entry.permits.acquire().await.expect("semaphore never closed");
                tokio::time::timeout(timeout, entry.transport.complete(cfg, &request)).await
            };
            let retryable = match &outcome {
                Ok(Ok(text)) => {
                    return Ok(Completion {
                        text: text.clone(),
                        provider_id: cfg.provider_id.clone(),
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempt_count: attempt,
                    })
                }
                Ok(Err(e)) => e.is_retryable(),
                Err(_) => true,
            };
            if !retryable || attempt > cfg.max_retries {
                return Err(match outcome {
                    Ok(Err(e)) => GatewayError::ProviderFailed {
                        provider: cfg.provider_id.to_string(),
                        attempts: attempt,
                        reason: e.to_string(),
                    },
                    _ => GatewayError::Timeout {
                        provider: cfg.provider_id.to_string(),
                        attempts: attempt,
                    },
                });
            }
            tracing::debug!(provider = %cfg.provider_id, attempt, "retrying provider call");
            tokio::time::sleep(backoff_delay(cfg.backoff_base_ms, attempt)).await;
        }
    }
}

/// Full jitter: uniform in `[0, base * 2^(attempt-1)]`, capped.
pub fn backoff_delay(base_ms: u64, attempt: u32) -> Duration {
    let ceiling = base_ms
        .saturating_mul(1u64 << attempt.saturating_sub(1).min(20))
        .min(MAX_BACKOFF_MS);
    Duration::from_millis(rand::rng().random_range(0..=ceiling))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Replays a fixed script of outcomes, then succeeds.
    struct Scripted {
        script: parking_lot::Mutex<Vec<Result<String, TransportError>>>,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn new(mut script: Vec<Result<String, TransportError>>) -> Self {
            script.reverse();
            Self {
                script: parking_lot::Mutex::new(script),
                calls: AtomicUsize::new(0),
            }
        }
    }

    #[async_trait]
    impl Transport for Scripted {
        async fn complete(&self, _: &ProviderConfig, _: &WireRequest) -> Result<String, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.script.lock().pop().unwrap_or_else(|| Ok("done".into()))
        }
    }

    fn fast(id: &str) -> ProviderConfig {
        ProviderConfig {
            backoff_base_ms: 1,
            ..ProviderConfig::http(id, ProviderKind::RemoteApi, "http://127.0.0.1:9/v1")
        }
    }

    fn status(s: u16) -> Result<String, TransportError> {
        Err(TransportError::Status {
            status: s,
            body: String::new(),
        })
    }

    #[tokio::test]
    async fn rate_limited_twice_then_ok() {
        let g = Gateway::new();
        g.register_with_transport(
            fast("remote"),
            Arc::new(Scripted::new(vec![status(429), status(429)])),
        )
        .unwrap();
        let c = g.generate(&"remote".into(), "hi").await.unwrap();
        assert_eq!(c.attempt_count, 3);
        assert_eq!(c.text, "done");
    }

    #[tokio::test]
    async fn retries_exhausted() {
        let g = Gateway::new();
        let t = Arc::new(Scripted::new(vec![status(503); 10]));
        g.register_with_transport(fast("remote"), t.clone()).unwrap();
        let err = g.generate(&"remote".into(), "hi").await.unwrap_err();
        assert_eq!(
            err,
            GatewayError::ProviderFailed {
                provider: "remote".into(),
                attempts: 4,
                reason: "HTTP status 503: ".into()
            }
        );
        assert_eq!(t.calls.load(Ordering::SeqCst), 4);
    }

    #[tokio::test]
    async fn client_errors_are_not_retried() {
        let g = Gateway::new();
        let t = Arc::new(Scripted::new(vec![status(400)]));
        g.register_with_transport(fast("remote"), t.clone()).unwrap();
        assert_eq!(g.generate(&"remote".into(), "hi").await.unwrap_err().code(), "provider_failed");
        assert_eq!(t.calls.load(Ordering::SeqCst), 1);
    }

    struct Slow;

    #[async_trait]
    impl Transport for Slow {
        async fn complete(&self, _: &ProviderConfig, _: &WireRequest) -> Result<String, TransportError> {
            tokio::time::sleep(Duration::from_secs(5)).await;
            Ok("late".into())
        }
    }

    #[tokio::test]
    async fn timeout_reported_after_retries() {
        let g = Gateway::new();
        let cfg = ProviderConfig {
            timeout_ms: 10,
            max_retries: 1,
            ..fast("slow")
        };
        g.register_with_transport(cfg, Arc::new(Slow)).unwrap();
        assert_eq!(
            g.generate(&"slow".into(), "hi").await.unwrap_err(),
            GatewayError::Timeout {
                provider: "slow".into(),
                attempts: 2
            }
        );
    }

    #[tokio::test]
    async fn unknown_provider_and_empty_prompt() {
        let g = Gateway::new();
        assert_eq!(
            g.generate(&"ghost-model".into(), "p").await.unwrap_err(),
            GatewayError::UnknownProvider("ghost-model".into())
        );
        g.register_provider(ProviderConfig::mock("mock")).unwrap();
        assert_eq!(g.generate(&"mock".into(), "  ").await.unwrap_err(), GatewayError::EmptyPrompt);
    }

    #[test]
    fn config_validation_and_replacement() {
        let g = Gateway::new();
        let mut cfg = fast("r");
        cfg.max_concurrent = 0;
        assert!(matches!(g.register_provider(cfg), Err(GatewayError::InvalidConfig(_))));
        let mut cfg = fast("r");
        cfg.timeout_ms = 0;
        assert!(g.register_provider(cfg).is_err());
        let mut cfg = fast("r");
        cfg.endpoint = None;
        assert!(g.register_provider(cfg).is_err());

        g.register_provider(ProviderConfig { timeout_ms: 100, ..fast("r") }).unwrap();
        g.register_provider(ProviderConfig { timeout_ms: 200, ..fast("r") }).unwrap();
        assert_eq!(g.config(&"r".into()).unwrap().timeout_ms, 200);
        assert_eq!(g.providers().len(), 1);
    }

    #[test]
    fn backoff_is_bounded_by_schedule() {
        for attempt in 1..6 {
            for _ in 0..50 {
                let d = backoff_delay(500, attempt).as_millis() as u64;
                assert!(d <= 500 << (attempt - 1));
            }
        }
        assert!(backoff_delay(500, 40).as_millis() as u64 <= MAX_BACKOFF_MS);
    }
}
