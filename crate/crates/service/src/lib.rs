//! Experiment store and HTTP API.
//!
//! | Route | Payload |
//! |---|---|
//! | `GET /api/experiments` | `experiment_list` |
//! | `POST /api/experiments` (manifest, TOML or JSON) | `202`, `job` |
//! | `GET /api/experiments/{id}` | `bundle_index` |
//! | `GET /api/experiments/{id}/global` | `global_graph` |
//! | `GET /api/experiments/{id}/models/{mid}/{landscape,mergetree,persistence,hessian,record}` | matching artifact |
//! | `GET /api/experiments/{id}/pairs/{a}/{b}/{mc,cka}` | matching artifact, either id order |
//! | `GET /api/jobs/{job_id}` | `job` |
//!
//! Unknown routes and ids give `404`, an invalid manifest `400` with a
//! `fields` list, and store failures `500` with an `error_id` that is logged
//! alongside the detail.

pub mod api;
pub mod error;
pub mod jobs;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;

pub use api::{router, AppState};
pub use error::{Result, StoreError};
pub use jobs::{JobQueue, JobRecord, JobState};
pub use store::{ExperimentEntry, ExperimentStatus, ExperimentStore, Registration};

pub const STORE_ENV: &str = "LOSSATLAS_STORE";
pub const PORT_ENV: &str = "LOSSATLAS_PORT";
pub const HOST_ENV: &str = "LOSSATLAS_HOST";
pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub store_root: PathBuf,
    pub host: String,
    pub port: u16,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            store_root: PathBuf::from("lossatlas-store"),
            host: "127.0.0.1".into(),
            port: DEFAULT_PORT,
        }
    }
}

impl ServiceConfig {
    /// Defaults overridden by `LOSSATLAS_STORE`, `LOSSATLAS_HOST` and
    /// `LOSSATLAS_PORT`.
    pub fn from_env() -> std::result::Result<Self, String> {
        let mut config = Self::default();
        if let Ok(root) = std::env::var(STORE_ENV) {
            config.store_root = root.into();
        }
        if let Ok(host) = std::env::var(HOST_ENV) {
            config.host = host;
        }
        if let Ok(port) = std::env::var(PORT_ENV) {
            config.port = port
                .parse()
                .map_err(|_| format!("{PORT_ENV}={port:?} is not a port number"))?;
        }
        Ok(config)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Server(#[source] std::io::Error),
}

/// Open the store and serve the API until the process exits.
pub async fn serve(config: ServiceConfig) -> std::result::Result<(), ServeError> {
    let store = ExperimentStore::open(&config.store_root)?;
    let app = router(AppState::new(store));
    let addr = format!("{}:{}", config.host, config.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|source| ServeError::Bind { addr: addr.clone(), source })?;
    let local: Option<SocketAddr> = listener.local_addr().ok();
    tracing::info!(addr = ?local, store = %config.store_root.display(), "serving");
    axum::serve(listener, app).await.map_err(ServeError::Server)
}
