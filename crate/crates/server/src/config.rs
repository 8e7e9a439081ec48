//! Service configuration: one TOML file plus environment overrides.
//!
//! ```toml
//! port = 8080
//! database_url = "sqlite://markscope.db"   # or "memory"
//! template_dir = "templates"               # optional
//! tagging_provider = "gpt-4o"
//! max_upload_rows = 10000
//! chat_digest_budget = 4000
//! workers = 8
//!
//! [[providers]]
//! provider_id = "gpt-4o"
//! kind = "remote_api"                      # remote_api | local_api | mock
//! endpoint = "https://api.openai.com/v1/chat/completions"
//! adapter = "openai_chat"                  # neutral | openai_chat
//! credentials_env = "OPENAI_API_KEY"
//! max_concurrent = 4
//! ```
//!
//! `PORT`, `DATABASE_URL` and `TEMPLATE_DIR` override the file. API keys are
//! only ever read from the variables named by `credentials_env`.

use std::path::{Path, PathBuf};

use markscope_core::gateway::{ProviderConfig, ProviderKind, WireAdapter};
use markscope_core::ProviderId;
use serde::Deserialize;

use crate::StartupError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "defaults::host")]
    pub host: String,
    #[serde(default = "defaults::port")]
    pub port: u16,
    #[serde(default = "defaults::database_url")]
    pub database_url: String,
    #[serde(default)]
    pub template_dir: Option<PathBuf>,
    #[serde(default = "defaults::tagging_provider")]
    pub tagging_provider: ProviderId,
    #[serde(default = "defaults::max_upload_rows")]
    pub max_upload_rows: usize,
    #[serde(default = "defaults::chat_digest_budget")]
    pub chat_digest_budget: usize,
    #[serde(default = "defaults::workers")]
    pub workers: usize,
    #[serde(default = "default_providers")]
    pub providers: Vec<ProviderConfig>,
}

mod defaults {
    use markscope_core::ProviderId;

    pub fn host() -> String {
        "127.0.0.1".into()
    }
    pub fn port() -> u16 {
        8080
    }
    pub fn database_url() -> String {
        "sqlite://markscope.db".into()
    }
    pub fn tagging_provider() -> ProviderId {
        "gpt-4o".into()
    }
    pub fn max_upload_rows() -> usize {
        markscope_core::ingest::DEFAULT_MAX_ROWS
    }
    pub fn chat_digest_budget() -> usize {
        markscope_core::chat::DEFAULT_DIGEST_BUDGET
    }
    pub fn workers() -> usize {
        8
    }
}

/// GPT-3.5-turbo and GPT-4o through the OpenAI chat API, a locally served
/// rationale model speaking the neutral format, and the offline mock.
pub fn default_providers() -> Vec<ProviderConfig> {
    let openai = |id: &str| ProviderConfig {
        adapter: WireAdapter::OpenaiChat,
        credentials_env: Some("OPENAI_API_KEY".into()),
        ..ProviderConfig::http(id, ProviderKind::RemoteApi, "https://api.openai.com/v1/chat/completions")
    };
    vec![
        openai("gpt-3.5-turbo"),
        openai("gpt-4o"),
        ProviderConfig {
            model: Some("rationale-model".into()),
            ..ProviderConfig::http("local-rationale", ProviderKind::LocalApi, "http://127.0.0.1:8001/v1/complete")
        },
        ProviderConfig::mock("mock"),
    ]
}

impl Default for ServerConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

impl ServerConfig {
    /// Offline configuration: in-memory store, mock providers only.
    pub fn offline() -> Self {
        Self {
            database_url: "memory".into(),
            tagging_provider: "mock".into(),
            providers: vec![ProviderConfig::mock("mock")],
            ..Self::default()
        }
    }

    pub fn parse(source: &str) -> Result<Self, StartupError> {
        toml::from_str(source).map_err(|e| StartupError::Config(e.to_string()))
    }

    /// Reads the file (if any) and applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, StartupError> {
        let mut cfg = match path {
            Some(p) => {
                let src = std::fs::read_to_string(p)
                    .map_err(|e| StartupError::Config(format!("{}: {e}", p.display())))?;
                Self::parse(&src)?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), StartupError> {
        if let Some(p) = var("PORT") {
            self.port = p
                .parse()
                .map_err(|_| StartupError::Config(format!("PORT `{p}` is not a port number")))?;
        }
        if let Some(url) = var("DATABASE_URL") {
            self.database_url = url;
        }
        if let Some(dir) = var("TEMPLATE_DIR") {
            self.template_dir = Some(dir.into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), StartupError> {
        if self.providers.is_empty() {
            return Err(StartupError::Config("no providers configured".into()));
        }
        for p in &self.providers {
            p.validate().map_err(|e| StartupError::Config(e.to_string()))?;
        }
        if !self.providers.iter().any(|p| p.provider_id == self.tagging_provider) {
            return Err(StartupError::Config(format!(
                "tagging_provider `{}` is not a configured provider",
                self.tagging_provider
            )));
        }
        if self.workers == 0 || self.max_upload_rows == 0 {
            return Err(StartupError::Config("workers and max_upload_rows must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let mut c = ServerConfig::default();
        assert_eq!(c.port, 8080);
        assert_eq!(c.providers.len(), 4);
        c.validate().unwrap();
        let env = |k: &str| match k {
            "PORT" => Some("9999".to_owned()),
            "DATABASE_URL" => Some("memory".to_owned()),
            "TEMPLATE_DIR" => Some("/tmp/t".to_owned()),
            _ => None,
        };
        c.apply_env(env).unwrap();
        assert_eq!((c.port, c.database_url.as_str()), (9999, "memory"));
        assert_eq!(c.template_dir.as_deref(), Some(Path::new("/tmp/t")));
        assert!(c.apply_env(|_| Some("nan".to_owned())).is_err());
    }

    #[test]
    fn file_format() {
        let c = ServerConfig::parse(
            r#"
            port = 0
            database_url = "memory"
            tagging_provider = "m"

            [[providers]]
            provider_id = "m"
            kind = "mock"

            [[providers]]
            provider_id = "local"
            kind = "local_api"
            endpoint = "http://127.0.0.1:8001/v1/complete"
            max_concurrent = 2
            "#,
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!(c.providers[1].max_concurrent, 2);
        assert_eq!(c.providers[1].max_retries, 3);

        assert!(ServerConfig::parse("prot = 1").is_err());
        let bad = ServerConfig::parse("tagging_provider = \"nope\"").unwrap();
        assert!(bad.validate().is_err());
        let zero = ServerConfig::parse(
            "tagging_provider = \"m\"\n[[providers]]\nprovider_id = \"m\"\nkind = \"mock\"\nmax_concurrent = 0",
        )
        .unwrap();
        assert!(zero.validate().is_err());
    }
}
