//! JSON-over-HTTP facade: interview sessions, recommendations for known
//! users and single explanations.
//!
//! The model is loaded once and shared read-only. Interview sessions live
//! in an in-memory [`SessionStore`] with a sliding TTL; a restart loses them.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, TryLockError};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

use crate::error::{Error, Result};
use crate::persist::load_model;
use crate::recommend::{
    explain, new_session_id, recommend_topk, validate_explanation, Answer, AnswerRecord, Explanation,
    InterviewSession, Question, Recommendation, SessionStatus, Templates, UserQuery,
};
use crate::train::FacTModel;

const DEFAULT_K: usize = 10;
const MAX_K: usize = 1000;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub session_ttl: Duration,
    pub max_sessions: usize,
    /// Allowed CORS origin; `None` allows any origin.
    pub cors_origin: Option<String>,
    /// Static assets served under `/ui/`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            session_ttl: Duration::from_secs(30 * 60),
            max_sessions: 10_000,
            cors_origin: None,
            ui_dir: None,
        }
    }
}

struct Entry {
    session: Arc<Mutex<InterviewSession>>,
    touched: Instant,
}

/// Sessions by id. Expired sessions are invisible and purged lazily.
pub struct SessionStore {
    ttl: Duration,
    capacity: usize,
    sessions: Mutex<HashMap<String, Entry>>,
}

impl SessionStore {
    pub fn new(ttl: Duration, capacity: usize) -> Self {
        SessionStore {
            ttl,
            capacity,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        let now = Instant::now();
        let map = self.sessions.lock().expect("store lock");
        map.values().filter(|e| now.duration_since(e.touched) < self.ttl).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores `session` under its id. Fails when the store is full of live
    /// sessions.
    pub fn insert(&self, session: InterviewSession) -> Result<Arc<Mutex<InterviewSession>>> {
        let now = Instant::now();
        let mut map = self.sessions.lock().expect("store lock");
        if map.len() >= self.capacity {
            map.retain(|_, e| now.duration_since(e.touched) < self.ttl);
        }
        if map.len() >= self.capacity {
            return Err(Error::State("session store is full".into()));
        }
        let handle = Arc::new(Mutex::new(session.clone()));
        map.insert(
            session.session_id,
            Entry {
                session: handle.clone(),
                touched: now,
            },
        );
        Ok(handle)
    }

    /// Live session by id; refreshes its TTL.
    pub fn get(&self, id: &str) -> Option<Arc<Mutex<InterviewSession>>> {
        let now = Instant::now();
        let mut map = self.sessions.lock().expect("store lock");
        match map.get_mut(id) {
            Some(e) if now.duration_since(e.touched) < self.ttl => {
                e.touched = now;
                Some(e.session.clone())
            }
            Some(_) => {
                map.remove(id);
                None
            }
            None => None,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub model: Arc<FacTModel>,
    pub templates: Arc<Templates>,
    pub store: Arc<SessionStore>,
}

impl AppState {
    pub fn new(model: FacTModel, templates: Templates, cfg: &ServiceConfig) -> Self {
        AppState {
            model: Arc::new(model),
            templates: Arc::new(templates),
            store: Arc::new(SessionStore::new(cfg.session_ttl, cfg.max_sessions)),
        }
    }
}

/// Error body `{"error": code, "message": text}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "validation", message)
    }

    fn conflict(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::CONFLICT, "state", message)
    }

    fn no_session(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no live session {id:?}"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::UnknownUser(_) | Error::UnknownItem(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::State(_) => (StatusCode::CONFLICT, "state"),
            e if e.is_validation() => (StatusCode::BAD_REQUEST, "validation"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code,
            message: &self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub status: SessionStatus,
    /// `None` once the interview reached a leaf.
    pub question: Option<Question>,
    pub answers: Vec<AnswerRecord>,
    /// Number of answers given so far.
    pub step: usize,
    /// Most questions any path of the user tree asks.
    pub max_questions: usize,
}

fn view(state: &AppState, s: &InterviewSession) -> SessionView {
    SessionView {
        session_id: s.session_id.clone(),
        status: s.status,
        question: s.question(&state.model, &state.templates),
        answers: s.answers.clone(),
        step: s.answers.len(),
        max_questions: state.model.user_tree.depth().saturating_sub(1),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub answer: Answer,
    /// Expected number of prior answers; a mismatch is rejected with 409 so
    /// that a replayed or concurrent answer cannot advance the session twice.
    #[serde(default)]
    pub step: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendationsView {
    pub session_id: Option<String>,
    pub user: Option<String>,
    pub recommendations: Vec<Recommendation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    /// Levels of the user tree, i.e. the longest interview.
    pub depth: usize,
    pub max_depth: usize,
    pub users: usize,
    pub items: usize,
    pub features: usize,
    pub dim: usize,
    pub sessions: usize,
}

fn parse_k(q: &HashMap<String, String>) -> ApiResult<usize> {
    match q.get("k") {
        None => Ok(DEFAULT_K),
        Some(s) => match s.parse::<usize>() {
            Ok(k) if (1..=MAX_K).contains(&k) => Ok(k),
            _ => Err(ApiError::bad_request(format!("k must be an integer in 1..={MAX_K}, got {s:?}"))),
        },
    }
}

async fn create_session(State(state): State<AppState>) -> ApiResult<(StatusCode, Json<SessionView>)> {
    let session = InterviewSession::start(&state.model, new_session_id());
    let v = view(&state, &session);
    state.store.insert(session).map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "capacity", e.to_string()))?;
    Ok((StatusCode::CREATED, Json(v)))
}

async fn get_session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    let handle = state.store.get(&id).ok_or_else(|| ApiError::no_session(&id))?;
    let s = handle.lock().expect("session lock");
    Ok(Json(view(&state, &s)))
}

async fn answer_session(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<SessionView>> {
    let req: AnswerRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request(format!("expected {{\"answer\": \"like\"|\"dislike\"|\"unknown\"}}: {e}")))?;
    let handle = state.store.get(&id).ok_or_else(|| ApiError::no_session(&id))?;
    let mut s = match handle.try_lock() {
        Ok(s) => s,
        Err(TryLockError::WouldBlock) => return Err(ApiError::conflict("another answer is in progress")),
        Err(TryLockError::Poisoned(_)) => {
            return Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "session lock poisoned"))
        }
    };
    if let Some(step) = req.step {
        if step != s.answers.len() {
            return Err(ApiError::conflict(format!(
                "answer for step {step} but the session is at step {}",
                s.answers.len()
            )));
        }
    }
    s.answer(&state.model, req.answer)?;
    Ok(Json(view(&state, &s)))
}

async fn session_recommendations(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<RecommendationsView>> {
    let k = parse_k(&q)?;
    let handle = state.store.get(&id).ok_or_else(|| ApiError::no_session(&id))?;
    let s = handle.lock().expect("session lock").clone();
    let recommendations = s.recommend(&state.model, &state.templates, k)?;
    Ok(Json(RecommendationsView {
        session_id: Some(s.session_id),
        user: None,
        recommendations,
    }))
}

async fn user_recommendations(
    State(state): State<AppState>,
    UrlPath(user): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<RecommendationsView>> {
    let k = parse_k(&q)?;
    let model = &state.model;
    let u = model.user_index(&user).ok_or_else(|| Error::UnknownUser(user.clone()))?;
    let recommendations = recommend_topk(model, UserQuery::Id(u), k, true)?
        .into_iter()
        .map(|s| {
            Ok(Recommendation {
                item: model.items[s.item].clone(),
                item_id: s.item,
                score: s.score,
                explanation: explain(model, &state.templates, u, s.item)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Json(RecommendationsView {
        session_id: None,
        user: Some(user),
        recommendations,
    }))
}

async fn explanation(
    State(state): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Explanation>> {
    let (Some(user), Some(item)) = (q.get("user"), q.get("item")) else {
        return Err(ApiError::bad_request("both user and item are required"));
    };
    let model = &state.model;
    let u = model.user_index(user).ok_or_else(|| Error::UnknownUser(user.clone()))?;
    let j = model.item_index(item).ok_or_else(|| Error::UnknownItem(item.clone()))?;
    let exp = explain(model, &state.templates, u, j)?;
    validate_explanation(model, &model.user_tree.path_of_entity(u), j, &exp).map_err(Error::Internal)?;
    Ok(Json(exp))
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    let m = &state.model;
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        depth: m.user_tree.depth(),
        max_depth: m.config.h,
        users: m.n_users(),
        items: m.n_items(),
        features: m.vocab.len(),
        dim: m.dim(),
        sessions: state.store.len(),
    })
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

fn cors(origin: Option<&str>) -> Result<CorsLayer> {
    let allow = match origin {
        None => AllowOrigin::any(),
        Some(o) => AllowOrigin::exact(
            HeaderValue::from_str(o).map_err(|e| Error::Config(format!("bad CORS origin {o:?}: {e}")))?,
        ),
    };
    Ok(CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]))
}

pub fn router(state: AppState, cfg: &ServiceConfig) -> Result<Router> {
    let mut app = Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/answer", post(answer_session))
        .route("/api/sessions/{id}/recommendations", get(session_recommendations))
        .route("/api/users/{id}/recommendations", get(user_recommendations))
        .route("/api/explanations", get(explanation))
        .route("/api/health", get(health));
    if let Some(dir) = &cfg.ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    Ok(app.fallback(not_found).layer(cors(cfg.cors_origin.as_deref())?).with_state(state))
}

/// Serves until ctrl-c.
pub async fn serve(state: AppState, addr: SocketAddr, cfg: &ServiceConfig) -> Result<()> {
    let app = router(state, cfg)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(addr.to_string(), e))?;
    log::info!("listening on {}", listener.local_addr().map_err(|e| Error::io(addr.to_string(), e))?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(addr.to_string(), e))
}

/// Loads the model and serves it on a fresh runtime.
pub fn run_server(model_path: &Path, addr: SocketAddr, templates: Templates, cfg: &ServiceConfig, threads: Option<usize>) -> Result<()> {
    let model = load_model(model_path)?;
    let state = AppState::new(model, templates, cfg);
    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = threads {
        rt.worker_threads(n.max(1));
    }
    let rt = rt.enable_all().build().map_err(|e| Error::Internal(e.to_string()))?;
    rt.block_on(serve(state, addr, cfg))
}
