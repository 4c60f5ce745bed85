//! Inference for trained checkpoints: a synchronous [`Tagger`] and an HTTP
//! front end exposing `POST /v1/suggest` and `GET /healthz`.

use std::future::Future;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};
use tagforge_core::checkpoint::load_checkpoint;
use tagforge_core::corpus::{collapse_whitespace, decompose_body, has_code_block, Post, MAX_TAGS};
use tagforge_core::model::TagModel;
use tagforge_core::vocab::{decode_top_k, TagVocabulary};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuggestRequest {
    pub title: String,
    #[serde(default)]
    pub body: String,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    DEFAULT_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestedTag {
    pub name: String,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestResponse {
    pub tags: Vec<SuggestedTag>,
    pub model_digest: String,
    pub latency_ms: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    Validation(String),
    #[error("too many requests in flight")]
    Overloaded,
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<tagforge_core::Error> for ServiceError {
    fn from(err: tagforge_core::Error) -> Self {
        ServiceError::Internal(err.to_string())
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match self {
            ServiceError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Overloaded => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

/// Turns request text into the components the model reads. Bodies with a
/// `<pre><code>` block are treated as HTML, anything else as plain
/// description text.
pub fn request_post(title: &str, body: &str) -> Post {
    let (description, code) = if has_code_block(body) {
        decompose_body(body)
    } else {
        (collapse_whitespace(body), String::new())
    };
    Post::unlabeled(collapse_whitespace(title), description, code)
}

/// A loaded model with its vocabulary, safe to share between threads.
#[derive(Debug)]
pub struct Tagger {
    model: TagModel,
    vocab: TagVocabulary,
    digest: String,
}

impl Tagger {
    pub fn new(model: TagModel, vocab: TagVocabulary, digest: String) -> Self {
        Self { model, vocab, digest }
    }

    /// Loads and integrity-checks a checkpoint directory.
    pub fn load(dir: &Path) -> tagforge_core::Result<Self> {
        let ckpt = load_checkpoint(dir, DType::F32, &Device::Cpu)?;
        Ok(Self::new(ckpt.model, ckpt.vocab, ckpt.digest))
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn vocab(&self) -> &TagVocabulary {
        &self.vocab
    }

    pub fn predict(&self, request: &SuggestRequest) -> Result<SuggestResponse, ServiceError> {
        let start = Instant::now();
        if request.title.trim().is_empty() {
            return Err(ServiceError::Validation("title must not be empty".into()));
        }
        let limit = MAX_TAGS.min(self.vocab.len());
        if !(1..=limit).contains(&request.k) {
            return Err(ServiceError::Validation(format!(
                "k must be in 1..={limit}, got {}",
                request.k
            )));
        }
        let post = request_post(&request.title, &request.body);
        let probs = self.model.forward(&post)?;
        let tags = decode_top_k(&probs.probs, &self.vocab, request.k)?
            .into_iter()
            .map(|(name, score)| SuggestedTag { name, score })
            .collect();
        Ok(SuggestResponse {
            tags,
            model_digest: self.digest.clone(),
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_in_flight: usize,
    /// Origins allowed to call the API from a browser. Empty allows any.
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            cors_origins: Vec::new(),
        }
    }
}

#[derive(Clone)]
struct AppState {
    tagger: Arc<Tagger>,
    permits: Arc<Semaphore>,
}

async fn suggest(
    State(state): State<AppState>,
    payload: Result<Json<SuggestRequest>, JsonRejection>,
) -> Result<Json<SuggestResponse>, ServiceError> {
    let Json(request) = payload.map_err(|e| ServiceError::Validation(e.body_text()))?;
    let permit = state
        .permits
        .clone()
        .try_acquire_owned()
        .map_err(|_| ServiceError::Overloaded)?;
    let tagger = state.tagger.clone();
    let response = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        tagger.predict(&request)
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Json(response))
}

async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "model_digest": state.tagger.digest() }))
}

fn cors(origins: &[String]) -> Result<CorsLayer, ServiceError> {
    let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    if origins.is_empty() {
        return Ok(layer.allow_origin(Any));
    }
    let values = origins
        .iter()
        .map(|o| HeaderValue::from_str(o).map_err(|_| ServiceError::Validation(format!("bad origin {o:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(layer.allow_origin(AllowOrigin::list(values)))
}

pub fn router(tagger: Arc<Tagger>, config: &ServiceConfig) -> Result<Router, ServiceError> {
    let state = AppState {
        tagger,
        permits: Arc::new(Semaphore::new(config.max_in_flight)),
    };
    Ok(Router::new()
        .route("/v1/suggest", post(suggest))
        .route("/healthz", get(healthz))
        .layer(cors(&config.cors_origins)?)
        .with_state(state))
}

/// Binds `addr` and serves until `shutdown` resolves, letting in-flight
/// requests finish. `on_bound` receives the actual address (useful with
/// port 0).
pub async fn serve_with_shutdown(
    tagger: Arc<Tagger>,
    addr: SocketAddr,
    config: &ServiceConfig,
    on_bound: impl FnOnce(SocketAddr),
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app =
        router(tagger, config).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tracing::info!(%local, "listening");
    on_bound(local);
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

/// Resolves on Ctrl-C.
pub async fn ctrl_c() {
    let _ = tokio::signal::ctrl_c().await;
}
