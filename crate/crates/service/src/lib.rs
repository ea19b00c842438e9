// SPDX-License-Identifier: MIT OR Apache-2.0

//! Local HTTP JSON API over one loaded model.
//!
//! Endpoints:
//!
//! - `POST /api/trace` with `{prompt | ids, tau?, position?, renormalize?}`
//! - `GET /api/heads?tau&mode&position&renormalize`
//! - `GET /api/svd/{layer}/{head}?k`
//! - `GET /api/attention/{layer}/{head}?prompt`
//! - `GET /api/meta`
//!
//! Layer indices in paths are 0-based block indices.

use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::{PathRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use flowroutes_core::analysis::{
    activation_frequency, export_attention_map, svd_head_tokens, FrequencyMode, PositionFilter,
    DEFAULT_FREQUENCY_TAU, DEFAULT_TOP_K,
};
use flowroutes_core::corpus::Prompt;
use flowroutes_core::model::{next_token, ActivationCache, Model};
use flowroutes_core::routes::{
    extract_routes, start_at, to_json_value, DEFAULT_RENORMALIZE, DEFAULT_TAU,
};
use flowroutes_core::tokenizer::TokenSeq;
use flowroutes_core::Error as CoreError;
use lru::LruCache;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{OnceCell, Semaphore};
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

pub const DEFAULT_PORT: u16 = 7431;
pub const DEFAULT_CACHE_CAP: usize = 16;

/// Header telling whether a trace reused a cached forward pass.
pub const CACHE_HEADER: &str = "x-flowroutes-cache";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Activation caches kept in the LRU.
    pub cache_cap: usize,
    /// Concurrent forward passes.
    pub workers: usize,
    /// Corpus behind `/api/heads`.
    pub corpus: Option<Vec<Prompt>>,
    /// Static explorer assets.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            cache_cap: DEFAULT_CACHE_CAP,
            workers: std::thread::available_parallelism().map_or(1, NonZeroUsize::get),
            corpus: None,
            ui_dir: None,
        }
    }
}

#[derive(Debug, Default, Serialize)]
pub struct Counters {
    pub requests: AtomicU64,
    pub cache_hits: AtomicU64,
    pub cache_misses: AtomicU64,
}

/// Shared state: the model, an LRU of activation caches keyed by token
/// ids, and the forward-pass worker permits.
pub struct AppState {
    model: Arc<Model>,
    caches: Mutex<LruCache<Vec<u32>, Arc<ActivationCache>>>,
    cache_cap: usize,
    corpus: Option<Vec<Prompt>>,
    corpus_caches: OnceCell<Arc<Vec<ActivationCache>>>,
    workers: Semaphore,
    ui_dir: Option<PathBuf>,
    pub counters: Counters,
}

impl AppState {
    pub fn new(model: Model, config: ServiceConfig) -> Arc<Self> {
        let cap = NonZeroUsize::new(config.cache_cap.max(1)).expect("non-zero");
        Arc::new(Self {
            model: Arc::new(model),
            caches: Mutex::new(LruCache::new(cap)),
            cache_cap: cap.get(),
            corpus: config.corpus,
            corpus_caches: OnceCell::new(),
            workers: Semaphore::new(config.workers.max(1)),
            ui_dir: config.ui_dir,
            counters: Counters::default(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Token ids currently cached, most recently used first.
    pub fn cached_keys(&self) -> Vec<Vec<u32>> {
        let caches = self.caches.lock().expect("cache lock");
        caches.iter().map(|(k, _)| k.clone()).collect()
    }

    async fn forward(&self, seq: TokenSeq) -> Result<(Arc<ActivationCache>, bool), ApiError> {
        if let Some(c) = self.caches.lock().expect("cache lock").get(&seq.ids) {
            self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok((Arc::clone(c), true));
        }
        self.counters.cache_misses.fetch_add(1, Ordering::Relaxed);
        let _permit = self
            .workers
            .acquire()
            .await
            .map_err(|_| ApiError::internal("worker pool closed"))?;
        let model = Arc::clone(&self.model);
        let key = seq.ids.clone();
        let cache = tokio::task::spawn_blocking(move || model.forward(&seq))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))?
            .map_err(ApiError::from_core)?;
        let cache = Arc::new(cache);
        self.caches
            .lock()
            .expect("cache lock")
            .put(key, Arc::clone(&cache));
        Ok((cache, false))
    }

    async fn corpus_caches(&self) -> Result<Arc<Vec<ActivationCache>>, ApiError> {
        let Some(corpus) = &self.corpus else {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "no corpus loaded; start the service with --corpus FILE to enable head statistics",
            ));
        };
        self.corpus_caches
            .get_or_try_init(|| async {
                let _permit = self
                    .workers
                    .acquire()
                    .await
                    .map_err(|_| ApiError::internal("worker pool closed"))?;
                let model = Arc::clone(&self.model);
                let prompts = corpus.clone();
                let caches = tokio::task::spawn_blocking(move || {
                    prompts
                        .iter()
                        .map(|p| model.forward(&p.tokens(&model)?))
                        .collect::<flowroutes_core::Result<Vec<_>>>()
                })
                .await
                .map_err(|e| ApiError::internal(e.to_string()))?
                .map_err(ApiError::from_core)?;
                Ok(Arc::new(caches))
            })
            .await
            .cloned()
    }
}

/// JSON error body `{"error": message}` with a status code.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }

    fn from_core(e: CoreError) -> Self {
        let status = match &e {
            CoreError::Context { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            CoreError::Vocabulary { .. }
            | CoreError::Encoding(_)
            | CoreError::Parse(_)
            | CoreError::Empty(_)
            | CoreError::OutOfRange(_)
            | CoreError::InvalidNode(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }

    /// Unparseable path or query parameters.
    fn rejected(e: impl std::fmt::Display) -> Self {
        Self::bad_request(e.to_string())
    }

    /// Out-of-range layer or head in a path.
    fn not_found(e: CoreError) -> Self {
        match e {
            CoreError::OutOfRange(m) => Self::new(StatusCode::NOT_FOUND, m),
            other => Self::from_core(other),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TraceRequest {
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub ids: Option<Vec<u32>>,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub position: Option<usize>,
    #[serde(default)]
    pub renormalize: Option<bool>,
}

fn tokenize(
    model: &Model,
    prompt: Option<&str>,
    ids: Option<&[u32]>,
) -> Result<TokenSeq, ApiError> {
    let p = match (prompt, ids) {
        (Some(p), None) => Prompt::Text(p.to_string()),
        (None, Some(ids)) => Prompt::Ids(ids.to_vec()),
        (None, None) => return Err(ApiError::bad_request("request needs either prompt or ids")),
        (Some(_), Some(_)) => return Err(ApiError::bad_request("give prompt or ids, not both")),
    };
    let seq = p.tokens(model).map_err(ApiError::from_core)?;
    if seq.is_empty() {
        return Err(ApiError::bad_request("prompt has no tokens"));
    }
    let limit = model.config().n_ctx;
    if seq.len() > limit {
        return Err(ApiError::from_core(CoreError::Context {
            len: seq.len(),
            limit,
        }));
    }
    Ok(seq)
}

async fn trace(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    state.counters.requests.fetch_add(1, Ordering::Relaxed);
    let req: TraceRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))?;
    let tau = req.tau.unwrap_or(DEFAULT_TAU);
    if !tau.is_finite() || tau < 0.0 {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("tau must be a non-negative number, got {tau}"),
        ));
    }
    let renormalize = req.renormalize.unwrap_or(DEFAULT_RENORMALIZE);
    let started = Instant::now();
    let seq = tokenize(state.model(), req.prompt.as_deref(), req.ids.as_deref())?;
    let (cache, hit) = state.forward(seq).await?;
    let model = Arc::clone(&state.model);
    let position = req.position;
    let (mut value, predicted) = tokio::task::spawn_blocking(move || {
        let start = start_at(&cache, position)?;
        let graph = extract_routes(&model, &cache, start, tau, renormalize)?;
        let (id, _) = next_token(&cache);
        Ok::<_, CoreError>((to_json_value(&graph)?, model.token_string(id)))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(ApiError::from_core)?;
    let obj = value
        .as_object_mut()
        .expect("route graph serializes to an object");
    obj.insert("predicted_token".into(), Value::String(predicted));
    obj.insert(
        "elapsed_ms".into(),
        json!(started.elapsed().as_secs_f64() * 1e3),
    );
    let mut resp = Json(value).into_response();
    resp.headers_mut().insert(
        CACHE_HEADER,
        HeaderValue::from_static(if hit { "hit" } else { "miss" }),
    );
    Ok(resp)
}

#[derive(Debug, Default, Deserialize)]
pub struct HeadsQuery {
    pub tau: Option<f64>,
    pub mode: Option<String>,
    pub position: Option<String>,
    pub renormalize: Option<bool>,
}

async fn heads(
    State(state): State<Arc<AppState>>,
    q: Result<Query<HeadsQuery>, QueryRejection>,
) -> Result<Json<Value>, ApiError> {
    state.counters.requests.fetch_add(1, Ordering::Relaxed);
    let Query(q) = q.map_err(ApiError::rejected)?;
    let tau = q.tau.unwrap_or(DEFAULT_FREQUENCY_TAU);
    if !tau.is_finite() || tau < 0.0 {
        return Err(ApiError::bad_request(format!(
            "tau must be a non-negative number, got {tau}"
        )));
    }
    let mode: FrequencyMode = q
        .mode
        .as_deref()
        .unwrap_or("per_example")
        .parse()
        .map_err(ApiError::from_core)?;
    let filter: PositionFilter = q
        .position
        .as_deref()
        .unwrap_or("last")
        .parse()
        .map_err(ApiError::from_core)?;
    let renormalize = q.renormalize.unwrap_or(DEFAULT_RENORMALIZE);
    let caches = state.corpus_caches().await?;
    let model = Arc::clone(&state.model);
    let freq = tokio::task::spawn_blocking(move || {
        activation_frequency(&model, &caches, tau, renormalize, filter, mode)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(ApiError::from_core)?;
    let rows: Vec<Value> = (0..freq.n_layers)
        .flat_map(|l| (0..freq.n_heads).map(move |h| (l, h)))
        .map(|(l, h)| json!({ "layer": l, "head": h, "value": freq.get(l, h) }))
        .collect();
    Ok(Json(json!({
        "tau": tau,
        "mode": mode,
        "position": filter,
        "renormalize": renormalize,
        "n_layers": freq.n_layers,
        "n_heads": freq.n_heads,
        "rows": rows,
    })))
}

#[derive(Debug, Default, Deserialize)]
pub struct SvdQuery {
    pub k: Option<usize>,
}

async fn svd(
    State(state): State<Arc<AppState>>,
    path: Result<Path<(usize, usize)>, PathRejection>,
    q: Result<Query<SvdQuery>, QueryRejection>,
) -> Result<Json<Value>, ApiError> {
    state.counters.requests.fetch_add(1, Ordering::Relaxed);
    let Path((layer, head)) = path.map_err(ApiError::rejected)?;
    let Query(q) = q.map_err(ApiError::rejected)?;
    let k = q.k.unwrap_or(DEFAULT_TOP_K);
    let model = Arc::clone(&state.model);
    let dirs = tokio::task::spawn_blocking(move || svd_head_tokens(&model, layer, head, k))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(ApiError::not_found)?;
    Ok(Json(
        json!({ "layer": layer, "head": head, "k": k, "directions": dirs }),
    ))
}

#[derive(Debug, Default, Deserialize)]
pub struct AttentionQuery {
    pub prompt: Option<String>,
}

async fn attention(
    State(state): State<Arc<AppState>>,
    path: Result<Path<(usize, usize)>, PathRejection>,
    q: Result<Query<AttentionQuery>, QueryRejection>,
) -> Result<Json<Value>, ApiError> {
    state.counters.requests.fetch_add(1, Ordering::Relaxed);
    let Path((layer, head)) = path.map_err(ApiError::rejected)?;
    let Query(q) = q.map_err(ApiError::rejected)?;
    let cfg = state.model().config();
    if layer >= cfg.n_layers || head >= cfg.n_heads {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!(
                "no head {head} in layer {layer} ({} layers, {} heads)",
                cfg.n_layers, cfg.n_heads
            ),
        ));
    }
    let prompt = q
        .prompt
        .ok_or_else(|| ApiError::bad_request("missing prompt parameter"))?;
    let seq = tokenize(state.model(), Some(&prompt), None)?;
    let (cache, _) = state.forward(seq).await?;
    let map = export_attention_map(&cache, layer, head).map_err(ApiError::not_found)?;
    let matrix: Vec<&[f32]> = (0..map.rows()).map(|i| map.row(i)).collect();
    Ok(Json(json!({
        "layer": layer,
        "head": head,
        "tokens": cache.tokens().strings,
        "matrix": matrix,
    })))
}

async fn meta(State(state): State<Arc<AppState>>) -> Result<Json<Value>, ApiError> {
    state.counters.requests.fetch_add(1, Ordering::Relaxed);
    let mut v = serde_json::to_value(state.model().config())
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let obj = v.as_object_mut().expect("config serializes to an object");
    obj.insert("name".into(), json!(state.model().name()));
    obj.insert(
        "has_tokenizer".into(),
        json!(state.model().tokenizer().is_some()),
    );
    obj.insert(
        "corpus_prompts".into(),
        json!(state.corpus.as_ref().map(Vec::len)),
    );
    obj.insert("cache_cap".into(), json!(state.cache_cap));
    obj.insert(
        "counters".into(),
        serde_json::to_value(&state.counters).map_err(|e| ApiError::internal(e.to_string()))?,
    );
    Ok(Json(v))
}

fn localhost_origin(origin: &HeaderValue) -> bool {
    let Ok(o) = origin.to_str() else {
        return false;
    };
    let rest = o
        .strip_prefix("http://")
        .or_else(|| o.strip_prefix("https://"));
    rest.is_some_and(|r| {
        let host = r.split(':').next().unwrap_or("");
        matches!(host, "localhost" | "127.0.0.1") || r == "[::1]" || r.starts_with("[::1]:")
    })
}

/// The API router, with CORS for localhost origins and optional static
/// assets.
pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::predicate(|o, _| localhost_origin(o)))
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    let ui = state.ui_dir.clone();
    let api = Router::new()
        .route("/api/trace", post(trace))
        .route("/api/heads", get(heads))
        .route("/api/svd/{layer}/{head}", get(svd))
        .route("/api/attention/{layer}/{head}", get(attention))
        .route("/api/meta", get(meta))
        .with_state(state);
    let app = match ui {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(cors)
}

/// Serves on `127.0.0.1:port` until the process ends.
pub async fn serve(state: Arc<AppState>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
