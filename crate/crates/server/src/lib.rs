//! HTTP service over the recognition engine.

pub mod api;
pub mod config;
pub mod error;
pub mod messages;

use axum::extract::DefaultBodyLimit;
use axum::routing::{get, patch, post};
use axum::Router;
use protorec_core::ontology::{self, OntologyError, Taxonomy};
use protorec_core::pca::{PcaError, PcaModel};
use protorec_core::persistence::{apply_op, import_dataset, LogOp, PersistenceError, PrototypeLog, LOG_FILE_NAME};
use protorec_core::recognition::{RecognitionError, Recognizer, SystemClock};
use std::path::PathBuf;
use std::sync::Arc;

pub use config::ServiceConfig;
pub use error::ApiError;
pub use messages::MessageCatalog;

pub const INDEX_FILE_NAME: &str = "index.annf";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Messages(#[from] messages::MessageError),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    Persistence(#[from] PersistenceError),
    #[error(transparent)]
    Recognition(#[from] RecognitionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Recognizer>,
    pub config: Arc<ServiceConfig>,
    pub messages: Arc<MessageCatalog>,
    pub data_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(engine: Arc<Recognizer>, config: ServiceConfig, messages: MessageCatalog) -> Self {
        Self {
            engine,
            data_dir: config.store.data_dir.clone(),
            config: Arc::new(config),
            messages: Arc::new(messages),
        }
    }
}

/// Builds the engine from configuration: replays the log in `data_dir`,
/// seeds an empty store from `seed_dataset`, and attaches the log for
/// later writes.
pub fn bootstrap(cfg: ServiceConfig) -> Result<AppState, ServiceError> {
    cfg.validate()?;
    let messages = match &cfg.server.messages {
        Some(p) => MessageCatalog::load(p)?,
        None => MessageCatalog::bundled(),
    };
    let mut taxonomy = match &cfg.store.taxonomy {
        Some(p) => Some(Taxonomy::load(p)?),
        None => None,
    };
    let pca = cfg.store.pca_model.as_ref().map(PcaModel::load).transpose()?;

    let (mut log, mut state) = match &cfg.store.data_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let (log, state) = PrototypeLog::open(dir.join(LOG_FILE_NAME))?;
            (Some(log.with_limit(cfg.store.log_limit_bytes)), state)
        }
        None => (None, Default::default()),
    };
    if state.is_empty() {
        if let Some(seed) = &cfg.store.seed_dataset {
            let imported = import_dataset(seed)?;
            if taxonomy.is_none() {
                taxonomy = Some(imported.taxonomy);
            }
            for p in imported.prototypes.into_values() {
                let op = LogOp::Add { prototype: p };
                if let Some(log) = log.as_mut() {
                    log.append(&op)?;
                }
                apply_op(&mut state, &op)?;
            }
            tracing::info!(count = state.len(), "seeded store");
        }
    }
    let taxonomy = Arc::new(taxonomy.unwrap_or_else(ontology::bundled));
    let engine = Recognizer::with_parts(cfg.engine_config(), taxonomy, pca, Arc::new(SystemClock))?;
    engine.restore(state.into_values(), log)?;
    tracing::info!(prototypes = engine.len(), reliable = engine.reliable_len(), "store ready");
    Ok(AppState::new(Arc::new(engine), cfg, messages))
}

pub fn router(state: AppState) -> Router {
    // base64 inflates by 4/3; leave room for the rest of the body
    let body_limit = state.config.server.max_image_bytes / 3 * 4 + (256 << 10);
    Router::new()
        .route("/query", post(api::query))
        .route("/validate", post(api::validate))
        .route("/images", get(api::list_images))
        .route("/images/{id}", patch(api::patch_image))
        .route("/export", get(api::export))
        .route("/admin/rebuild", post(api::rebuild))
        .route("/taxonomy/search", get(api::taxonomy_search))
        .route("/messages", get(api::messages))
        .route("/health", get(api::health))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

/// Binds `server.bind` and serves until ctrl-c.
pub async fn serve(cfg: ServiceConfig) -> Result<(), ServiceError> {
    let bind = cfg.server.bind.clone();
    let state = tokio::task::spawn_blocking(move || bootstrap(cfg))
        .await
        .map_err(std::io::Error::other)??;
    let listener = tokio::net::TcpListener::bind(&bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
