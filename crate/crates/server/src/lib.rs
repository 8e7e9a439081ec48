//! Stateless REST API. Every piece of state lives in the store, so any
//! number of server processes can serve the same database.

pub mod config;
pub mod error;
mod routes;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::Router;
use markscope_core::annotation::Annotations;
use markscope_core::chat::ChatService;
use markscope_core::highlight::Highlighter;
use markscope_core::store::Recovered;
use markscope_core::{
    AssessmentEngine, Gateway, MemoryStore, PromptCompiler, Repository, SqliteStore, UserRole,
};
use thiserror::Error;
use tokio::net::TcpListener;

pub use config::ServerConfig;
pub use error::ApiError;

#[derive(Debug, Error)]
pub enum StartupError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("template error: {0}")]
    Templates(String),
    #[error("store unavailable: {0}")]
    Store(String),
    #[error("cannot listen: {0}")]
    Listen(#[from] std::io::Error),
}

/// Everything a request handler needs. Holds no per-connection state.
pub struct Services {
    pub store: Arc<dyn Repository>,
    pub engine: Arc<AssessmentEngine>,
    pub chat: ChatService,
    pub annotations: Annotations,
    pub highlighter: Highlighter,
    pub max_upload_rows: usize,
}

/// Opens `memory`, `sqlite://path`, `sqlite:path` or a bare file path.
pub fn open_store(url: &str) -> Result<Arc<dyn Repository>, StartupError> {
    if url == "memory" || url == "memory:" {
        return Ok(Arc::new(MemoryStore::new()));
    }
    if let Some((scheme, _)) = url.split_once("://") {
        if scheme != "sqlite" {
            return Err(StartupError::Store(format!("unsupported database scheme `{scheme}`")));
        }
    }
    SqliteStore::open_url(url)
        .map(|s| Arc::new(s) as Arc<dyn Repository>)
        .map_err(|e| StartupError::Store(format!("{url}: {e}")))
}

impl Services {
    pub fn new(config: &ServerConfig, store: Arc<dyn Repository>) -> Result<Self, StartupError> {
        config.validate()?;
        let prompts = match &config.template_dir {
            Some(dir) if !dir.is_dir() => {
                return Err(StartupError::Templates(format!("{} is not a directory", dir.display())))
            }
            Some(dir) => PromptCompiler::from_dir(dir).map_err(|e| StartupError::Templates(e.to_string()))?,
            None => PromptCompiler::builtin(),
        };
        let prompts = Arc::new(prompts);
        let gateway = Gateway::new();
        for p in &config.providers {
            gateway
                .register_provider(p.clone())
                .map_err(|e| StartupError::Config(e.to_string()))?;
        }
        let gateway = Arc::new(gateway);
        let engine = Arc::new(
            AssessmentEngine::new(store.clone(), gateway.clone(), prompts.clone()).with_workers(config.workers),
        );
        Ok(Self {
            chat: ChatService::new(engine.clone()).with_digest_budget(config.chat_digest_budget),
            annotations: Annotations::new(store.clone(), prompts.clone()),
            highlighter: Highlighter::new(store.clone(), gateway, prompts, config.tagging_provider.clone()),
            engine,
            store,
            max_upload_rows: config.max_upload_rows,
        })
    }

    /// Resets work interrupted by a previous crash and restarts its jobs.
    /// Needs a tokio runtime.
    pub fn recover(&self) -> Result<Recovered, StartupError> {
        let recovered = self
            .store
            .recover_interrupted()
            .map_err(|e| StartupError::Store(e.to_string()))?;
        self.engine.resume(&recovered.jobs);
        Ok(recovered)
    }

    /// Creates an admin for `token` when the store has no users yet.
    pub fn bootstrap_admin(&self, token: &str) -> Result<bool, StartupError> {
        let err = |e: markscope_core::StoreError| StartupError::Store(e.to_string());
        if !self.store.list_users().map_err(err)?.is_empty() {
            return Ok(false);
        }
        match markscope_core::users::create_user_with_token(self.store.as_ref(), "admin", UserRole::Admin, token) {
            Ok(_) => Ok(true),
            // another process bootstrapped first
            Err(markscope_core::StoreError::Conflict(_)) => Ok(false),
            Err(e) => Err(err(e)),
        }
    }
}

pub fn router(services: Arc<Services>) -> Router {
    routes::router(services)
}

/// Binds and serves until the process receives Ctrl-C. `on_listen` is
/// called with the bound address (useful with port 0).
pub async fn serve(config: ServerConfig, on_listen: impl FnOnce(SocketAddr)) -> Result<(), StartupError> {
    let store = open_store(&config.database_url)?;
    let services = Arc::new(Services::new(&config, store)?);
    if let Ok(token) = std::env::var("BOOTSTRAP_ADMIN_TOKEN") {
        if services.bootstrap_admin(&token)? {
            tracing::info!("created bootstrap admin user");
        }
    }
    let recovered = services.recover()?;
    if recovered.records > 0 || recovered.sessions > 0 {
        tracing::info!(
            records = recovered.records,
            jobs = recovered.jobs.len(),
            sessions = recovered.sessions,
            "recovered interrupted work"
        );
    }
    let listener = TcpListener::bind((config.host.as_str(), config.port)).await?;
    on_listen(listener.local_addr()?);
    axum::serve(listener, router(services))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
