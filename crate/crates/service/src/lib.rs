//! # facehop-service
//!
//! REST API over the face-verification library: pool-based active-learning
//! sessions for a human annotator, the face images those sessions query,
//! and one-shot verification of two uploaded images.
//!
//! | Method | Path | |
//! |---|---|---|
//! | POST | `/api/sessions` | create a session (honours `Idempotency-Key`) |
//! | GET | `/api/sessions/{id}` | session summary |
//! | GET | `/api/sessions/{id}/queries` | pairs awaiting labels |
//! | POST | `/api/sessions/{id}/labels` | submit labels |
//! | GET | `/api/sessions/{id}/metrics` | accuracy trace, JSON or CSV |
//! | GET | `/api/pairs/{pid}/images/{a,b}` | a queried face as the model sees it (PNG) |
//! | POST | `/api/verify` | match probability of two images |
//!
//! Errors are `application/problem+json` with a machine-readable `reason`.
//! With a token configured, every request needs `Authorization: Bearer
//! <token>`; image URLs also accept `?token=` so they work in `<img>` tags.

pub mod dataset;
pub mod error;
pub mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use facehop_core::active::{trace_csv, Strategy, TracePoint};
use facehop_core::classify::Hyper;
use facehop_core::dataio::{ImageStore, DEFAULT_CACHE_CAPACITY};
use facehop_core::preprocess::{self, PreprocessConfig};
use facehop_core::{ActiveConfig, RgbImage, VerificationModel};
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, RwLock};

pub use dataset::{pair_id, Dataset, DatasetRef};
pub use error::{ApiError, ApiResult};
pub use session::{LabelReceipt, PostedLabel, Session, SessionMeta, Status};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    /// Directory holding pairs files and the images they name.
    pub data_root: PathBuf,
    /// Trained model; enables `/api/verify` and supplies the session
    /// feature extractor. Without it, transforms are fitted per dataset.
    pub model_path: Option<PathBuf>,
    /// Where sessions are persisted.
    pub session_store: PathBuf,
    pub token: Option<String>,
    pub cache_capacity: usize,
}

impl ServiceConfig {
    pub fn new(data_root: impl Into<PathBuf>, session_store: impl Into<PathBuf>) -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            data_root: data_root.into(),
            model_path: None,
            session_store: session_store.into(),
            token: None,
            cache_capacity: DEFAULT_CACHE_CAPACITY,
        }
    }
}

pub struct AppState {
    config: ServiceConfig,
    model: Option<Arc<VerificationModel>>,
    store: Arc<ImageStore>,
    /// Pair pools by dataset reference; builds are serialized separately so
    /// lookups never wait on one.
    datasets: RwLock<HashMap<String, Arc<Dataset>>>,
    build: Mutex<()>,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    idempotency: Mutex<HashMap<String, String>>,
}

impl AppState {
    /// Load the model (if configured) and every stored session. Sessions
    /// whose last round was fully labeled resume retraining.
    pub async fn open(config: ServiceConfig) -> ApiResult<Arc<Self>> {
        let model = match &config.model_path {
            Some(p) => {
                let p = p.clone();
                let m = tokio::task::spawn_blocking(move || facehop_core::container::load_model(&p))
                    .await
                    .map_err(|e| ApiError::internal(e.to_string()))??;
                Some(Arc::new(m))
            }
            None => None,
        };
        let preprocess = model.as_ref().map(|m| m.preprocess.clone()).unwrap_or_default();
        std::fs::create_dir_all(&config.session_store)?;
        let state = Arc::new(Self {
            store: Arc::new(ImageStore::new(preprocess, config.cache_capacity)),
            config,
            model,
            datasets: RwLock::new(HashMap::new()),
            build: Mutex::new(()),
            sessions: RwLock::new(HashMap::new()),
            idempotency: Mutex::new(HashMap::new()),
        });
        state.restore().await?;
        Ok(state)
    }

    async fn restore(self: &Arc<Self>) -> ApiResult<()> {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&self.config.session_store)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("session.json").is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let meta = Session::read_meta(&dir)?;
            let dataset = self.dataset(&meta.dataset).await?;
            let session = Arc::new(Session::open(&dir, meta, dataset)?);
            if let Some(key) = &session.meta.idempotency_key {
                self.idempotency.lock().await.insert(key.clone(), session.id().to_string());
            }
            let resume = session.inner.lock().await.status == Status::Retraining;
            self.sessions.write().await.insert(session.id().to_string(), session.clone());
            if resume {
                tokio::spawn(session.retrain());
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// The pair pool for `reference`, built on first use.
    pub async fn dataset(&self, reference: &DatasetRef) -> ApiResult<Arc<Dataset>> {
        let _building = self.build.lock().await;
        if let Some(d) = self.datasets.read().await.get(&reference.cache_key()) {
            return Ok(d.clone());
        }
        let (root, store, model, reference) =
            (self.config.data_root.clone(), self.store.clone(), self.model.clone(), reference.clone());
        let built = tokio::task::spawn_blocking(move || Dataset::build(&root, reference, &store, model.as_deref()))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))??;
        let built = Arc::new(built);
        self.datasets.write().await.insert(built.key(), built.clone());
        Ok(built)
    }

    pub async fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown_session", format!("no session {id}")))
    }

    /// Locate a pool pair by id across loaded datasets.
    async fn find_pair(&self, pid: &str) -> Option<facehop_core::dataio::FacePair> {
        let cache = self.datasets.read().await;
        cache.values().find_map(|d| d.index_of(pid).map(|i| d.pool_pairs[i].clone()))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(session_summary))
        .route("/api/sessions/{id}/queries", get(get_queries))
        .route("/api/sessions/{id}/labels", post(post_labels))
        .route("/api/sessions/{id}/metrics", get(get_metrics))
        .route("/api/pairs/{pid}/images/{side}", get(get_pair_image))
        .route("/api/verify", post(verify))
        .layer(middleware::from_fn_with_state(state.clone(), authenticate))
        .with_state(state)
}

/// Bind and serve until the process is stopped.
pub async fn serve(config: ServiceConfig) -> ApiResult<()> {
    let bind = config.bind;
    let state = AppState::open(config).await?;
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

async fn authenticate(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let Some(token) = &state.config.token else {
        return next.run(req).await;
    };
    let bearer = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    let query = req
        .uri()
        .query()
        .and_then(|q| q.split('&').find_map(|kv| kv.strip_prefix("token=")));
    let from_query = req.uri().path().starts_with("/api/pairs/") && query == Some(token.as_str());
    if bearer == Some(token.as_str()) || from_query {
        return next.run(req).await;
    }
    let mut resp = ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response();
    resp.headers_mut().insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
    resp
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub strategy: String,
    pub batch_size: usize,
    pub budget: usize,
    #[serde(default)]
    pub seed: u64,
    pub initial_fraction: Option<f64>,
    #[serde(default)]
    pub dataset: DatasetRef,
    #[serde(default = "yes")]
    pub seed_from_ground_truth: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub status: String,
    pub round: usize,
    pub labeled: usize,
    pub pending: usize,
    pub budget: usize,
    pub pool_size: usize,
    pub strategy: String,
    pub failure: Option<String>,
}

async fn summary_of(session: &Session) -> SessionSummary {
    let inner = session.inner.lock().await;
    SessionSummary {
        id: session.id().to_string(),
        status: status_name(&inner.status),
        round: inner.state.round,
        labeled: inner.state.labeled.len(),
        pending: inner.state.pending.len(),
        budget: inner.state.config.budget,
        pool_size: inner.state.pool_size,
        strategy: inner.state.config.strategy.to_string(),
        failure: inner.failure.clone(),
    }
}

fn status_name(s: &Status) -> String {
    serde_json::to_value(s).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<CreateSession>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Response> {
    let Json(body) = body.map_err(|e| ApiError::bad_request("invalid_body", e.body_text()))?;
    let key = headers.get("idempotency-key").and_then(|v| v.to_str().ok()).map(str::to_string);

    // Holding the key map for the whole creation makes duplicate keys race-free.
    let mut keys = state.idempotency.lock().await;
    if let Some(existing) = key.as_ref().and_then(|k| keys.get(k)) {
        let session = state.session(existing).await?;
        return Ok((StatusCode::OK, Json(summary_of(&session).await)).into_response());
    }

    let strategy: Strategy = body
        .strategy
        .parse()
        .map_err(|e: facehop_core::Error| ApiError::unprocessable("invalid_config", e.to_string()))?;
    let mut config = ActiveConfig::new(strategy, body.batch_size, body.budget, body.seed);
    if let Some(f) = body.initial_fraction {
        config.initial_fraction = f;
    }
    config.hyper = Hyper::default();
    // Reject bad settings before any expensive dataset work.
    config
        .validate(usize::MAX)
        .map_err(|e| ApiError::unprocessable("invalid_config", e.to_string()))?;
    let dataset = state.dataset(&body.dataset).await?;

    let meta = SessionMeta {
        id: new_session_id(),
        idempotency_key: key.clone(),
        dataset: body.dataset,
        config,
        seed_from_ground_truth: body.seed_from_ground_truth,
    };
    let session = Arc::new(Session::create(meta, dataset, &state.config.session_store)?);
    if let Some(k) = key {
        keys.insert(k, session.id().to_string());
    }
    drop(keys);
    state.sessions.write().await.insert(session.id().to_string(), session.clone());
    let retrain = session.inner.lock().await.status == Status::Retraining;
    if retrain {
        tokio::spawn(session.clone().retrain());
    }
    let location = format!("/api/sessions/{}", session.id());
    let mut resp = (StatusCode::CREATED, Json(summary_of(&session).await)).into_response();
    if let Ok(v) = HeaderValue::from_str(&location) {
        resp.headers_mut().insert(header::LOCATION, v);
    }
    Ok(resp)
}

fn new_session_id() -> String {
    let bytes: [u8; 16] = rand::random();
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

async fn session_summary(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionSummary>> {
    let session = state.session(&id).await?;
    Ok(Json(summary_of(&session).await))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryPair {
    pub pair_id: String,
    pub image_a: String,
    pub image_b: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryBatch {
    pub session_id: String,
    pub status: String,
    pub round: usize,
    pub labeled: usize,
    pub budget: usize,
    pub pairs: Vec<QueryPair>,
}

async fn get_queries(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let session = state.session(&id).await?;
    let inner = session.inner.lock().await;
    let pairs = if inner.status == Status::AwaitingLabels {
        inner
            .state
            .pending
            .iter()
            .map(|&i| {
                let pid = session.dataset.pool_ids[i].clone();
                QueryPair {
                    image_a: format!("/api/pairs/{pid}/images/a"),
                    image_b: format!("/api/pairs/{pid}/images/b"),
                    pair_id: pid,
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let batch = QueryBatch {
        session_id: session.id().to_string(),
        status: status_name(&inner.status),
        round: inner.state.round,
        labeled: inner.state.labeled.len(),
        budget: inner.state.config.budget,
        pairs,
    };
    let mut resp = Json(batch).into_response();
    if inner.status == Status::Retraining {
        resp.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from_static("1"));
    }
    Ok(resp)
}

#[derive(Debug, Deserialize, Serialize)]
pub struct LabelPost {
    pub request_id: Option<String>,
    pub labels: Vec<PostedLabel>,
}

async fn post_labels(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<LabelPost>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Json<LabelReceipt>> {
    let Json(body) = body.map_err(|e| ApiError::bad_request("invalid_body", e.body_text()))?;
    let session = state.session(&id).await?;
    let (receipt, complete) = session.post_labels(body.request_id, &body.labels).await?;
    if complete {
        tokio::spawn(session.clone().retrain());
    }
    Ok(Json(receipt))
}

#[derive(Debug, Deserialize)]
struct MetricsQuery {
    format: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub session_id: String,
    pub status: String,
    pub round: usize,
    pub labeled: usize,
    pub budget: usize,
    pub pool_size: usize,
    pub trace: Vec<TracePoint>,
}

async fn get_metrics(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<MetricsQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let session = state.session(&id).await?;
    let inner = session.inner.lock().await;
    let wants_csv = match q.format.as_deref() {
        Some("csv") => true,
        Some("json") | None => {
            q.format.is_none()
                && headers
                    .get(header::ACCEPT)
                    .and_then(|v| v.to_str().ok())
                    .is_some_and(|a| a.contains("text/csv"))
        }
        Some(other) => return Err(ApiError::bad_request("invalid_format", format!("unknown format {other}"))),
    };
    if wants_csv {
        let csv = trace_csv(&inner.state.trace);
        return Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response());
    }
    Ok(Json(Metrics {
        session_id: session.id().to_string(),
        status: status_name(&inner.status),
        round: inner.state.round,
        labeled: inner.state.labeled.len(),
        budget: inner.state.config.budget,
        pool_size: inner.state.pool_size,
        trace: inner.state.trace.clone(),
    })
    .into_response())
}

async fn get_pair_image(
    State(state): State<Arc<AppState>>,
    UrlPath((pid, side)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let pair = state
        .find_pair(&pid)
        .await
        .ok_or_else(|| ApiError::not_found("unknown_pair", format!("no pair {pid}")))?;
    let image = match side.as_str() {
        "a" => pair.a,
        "b" => pair.b,
        _ => return Err(ApiError::not_found("unknown_side", "side must be a or b")),
    };
    let store = state.store.clone();
    let png = tokio::task::spawn_blocking(move || -> ApiResult<Vec<u8>> {
        let rgb = store.rgb(&image)?;
        let seen = preprocess::normalize_geometry(&rgb, store.preprocess_config())?;
        Ok(seen.encode_png()?)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok((
        [(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "private, max-age=3600")],
        png,
    )
        .into_response())
}

#[derive(Debug, Deserialize, Serialize)]
pub struct VerifyRequest {
    /// Base64-encoded PNG or PNM bytes.
    pub image_a: String,
    pub image_b: String,
}

#[derive(Debug, Deserialize, Serialize)]
pub struct VerifyResponse {
    pub probability: f64,
    pub is_match: bool,
    pub p_y: f64,
    pub p_crcb: f64,
}

async fn verify(
    State(state): State<Arc<AppState>>,
    body: Result<Json<VerifyRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Json<VerifyResponse>> {
    let Json(body) = body.map_err(|e| ApiError::bad_request("invalid_body", e.body_text()))?;
    let model = state
        .model
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no_model", "the service runs without a model"))?;
    let decode = |field: &str, s: &str| -> ApiResult<RgbImage> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(s.trim())
            .map_err(|e| ApiError::bad_request("bad_image", format!("{field}: {e}")))?;
        RgbImage::decode_any(&bytes).map_err(|e| ApiError::unprocessable("bad_image", format!("{field}: {e}")))
    };
    let (a, b) = (decode("image_a", &body.image_a)?, decode("image_b", &body.image_b)?);
    let verdict = tokio::task::spawn_blocking(move || -> ApiResult<_> {
        let cfg: &PreprocessConfig = &model.preprocess;
        let pa = preprocess::preprocess_face(&a, cfg)?;
        let pb = preprocess::preprocess_face(&b, cfg)?;
        Ok(model.verify(&pa, &pb)?)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(VerifyResponse {
        probability: verdict.probability,
        is_match: verdict.is_match,
        p_y: verdict.p_y,
        p_crcb: verdict.p_crcb,
    }))
}
