use async_trait::async_trait;
use serde_json::Value;

use super::{ProviderConfig, Transport, TransportError, WireAdapter, WireRequest, WireResponse};

/// HTTP transport for remote APIs and locally deployed model servers.
#[derive(Debug, Clone, Default)]
pub struct HttpTransport {
    client: reqwest::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        Self::default()
    }
}

#[async_trait]
impl Transport for HttpTransport {
    async fn complete(
        &self,
        cfg: &ProviderConfig,
        request: &WireRequest,
    ) -> Result<String, TransportError> {
        let endpoint = cfg
            .endpoint
            .as_deref()
            .ok_or_else(|| TransportError::Rejected("no endpoint configured".into()))?;
        let mut req = self.client.post(endpoint).json(request);
        if let Some(var) = &cfg.credentials_env {
            let key = std::env::var(var).map_err(|_| {
                TransportError::Rejected(format!("credential variable {var} is not set"))
            })?;
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| TransportError::Network(e.without_url().to_string()))?;
        let status = resp.status();
        let body = resp
            .text()
            .await
            .map_err(|e| TransportError::Network(e.without_url().to_string()))?;
        if !status.is_success() {
            let mut body = body;
            let mut cut = body.len().min(512);
            while !body.is_char_boundary(cut) {
                cut -= 1;
            }
            body.truncate(cut);
            return Err(TransportError::Status {
                status: status.as_u16(),
                body,
            });
        }
        decode(cfg.adapter, &body)
    }
}

fn decode(adapter: WireAdapter, body: &str) -> Result<String, TransportError> {
    let malformed = |e: &dyn std::fmt::Display| TransportError::Malformed(e.to_string());
    match adapter {
        WireAdapter::Neutral => serde_json::from_str::<WireResponse>(body)
            .map(|r| r.content)
            .map_err(|e| malformed(&e)),
        WireAdapter::OpenaiChat => {
            let v: Value = serde_json::from_str(body).map_err(|e| malformed(&e))?;
            v.pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .map(str::to_owned)
                .ok_or_else(|| malformed(&"missing choices[0].message.content"))
        }
    }
}
