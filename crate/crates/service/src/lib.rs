//! HTTP/JSON session API over [`embnav_core::feedback`].
//!
//! Sessions live in memory. Every mutating request on one session runs under
//! that session's lock; a request that finds the lock taken, or that names a
//! step the session has already left, gets `409`.

mod dto;
mod error;

use std::collections::HashMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, Method, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use embnav_core::feedback::{replay, SessionLog};
use embnav_core::{FeedbackConfig, Generator, PromptText, Session};
use serde::Deserialize;
use tokio::sync::{Mutex, OwnedMutexGuard};
use tower_http::cors::{Any, CorsLayer};

pub use dto::{ChoiceDto, HistoryEntryDto, PointDto, SessionStateDto};
pub use error::ApiError;

pub const DEFAULT_PORT: u16 = 7860;

type Shared = Arc<Mutex<Session>>;

pub struct AppState {
    gen: Arc<Generator>,
    defaults: FeedbackConfig,
    sessions: RwLock<HashMap<String, Shared>>,
    next_id: AtomicU64,
    journal: Option<PathBuf>,
}

impl AppState {
    pub fn new(gen: Generator, defaults: FeedbackConfig) -> Self {
        Self {
            gen: Arc::new(gen),
            defaults,
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            journal: None,
        }
    }

    /// Writes `<dir>/<session id>.jsonl` after every change.
    pub fn with_journal(mut self, dir: impl Into<PathBuf>) -> Self {
        self.journal = Some(dir.into());
        self
    }

    /// Replays every `*.jsonl` log in `dir` into the store. Returns the
    /// restored session ids.
    pub fn restore(&self, dir: &Path) -> embnav_core::Result<Vec<String>> {
        let mut ids = Vec::new();
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for p in paths {
            let events = SessionLog::parse_jsonl(&fs::read_to_string(&p)?)?;
            let mut s = replay(&self.gen, &events)?;
            if s.choices().is_none() {
                s.generate_choices(&self.gen)?;
            }
            let id = s.id().to_string();
            if let Some(n) = id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                self.next_id.fetch_max(n + 1, Ordering::Relaxed);
            }
            self.sessions.write().unwrap().insert(id.clone(), Arc::new(Mutex::new(s)));
            ids.push(id);
        }
        Ok(ids)
    }

    pub fn generator(&self) -> &Generator {
        &self.gen
    }

    fn lookup(&self, id: &str) -> Result<Shared, ApiError> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    fn lock(&self, id: &str) -> Result<OwnedMutexGuard<Session>, ApiError> {
        self.lookup(id)?
            .try_lock_owned()
            .map_err(|_| ApiError::conflict(format!("session {id} is busy")))
    }

    fn journal(&self, s: &Session) {
        let Some(dir) = &self.journal else { return };
        let write = || -> embnav_core::Result<()> {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(format!("{}.jsonl", s.id())), s.log().to_jsonl()?)?;
            Ok(())
        };
        if let Err(e) = write() {
            log::warn!("journal write for {} failed: {e}", s.id());
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct CreateRequest {
    pub prompt: String,
    pub seed: u64,
    pub k: Option<usize>,
    pub kappa: Option<f64>,
}

#[derive(Debug, Deserialize)]
pub struct StepRequest {
    pub choice_index: usize,
    pub alpha: f64,
    /// Step the client believes it is on; a mismatch is a conflict.
    pub step: Option<usize>,
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/api/sessions", post(create))
        .route("/api/sessions/{id}", get(fetch))
        .route("/api/sessions/{id}/step", post(step))
        .route("/api/sessions/{id}/undo", post(undo))
        .route("/api/sessions/{id}/export", get(export))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

/// Runs `f` on the blocking pool with the session lock held.
async fn locked<F>(state: Arc<AppState>, guard: OwnedMutexGuard<Session>, f: F) -> Result<SessionStateDto, ApiError>
where
    F: FnOnce(&Generator, &mut Session) -> embnav_core::Result<()> + Send + 'static,
{
    tokio::task::spawn_blocking(move || -> Result<_, ApiError> {
        let mut guard = guard;
        f(&state.gen, &mut guard)?;
        state.journal(&guard);
        Ok(SessionStateDto::from_session(&guard)?)
    })
    .await
    .map_err(ApiError::internal)?
}

async fn create(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateRequest>,
) -> Result<(StatusCode, Json<SessionStateDto>), ApiError> {
    if req.prompt.trim().is_empty() {
        return Err(ApiError::bad_request("prompt is empty"));
    }
    let mut config = state.defaults.clone();
    config.k = req.k.unwrap_or(config.k);
    config.kappa = req.kappa.unwrap_or(config.kappa);
    config.validate()?;

    let id = format!("s{}", state.next_id.fetch_add(1, Ordering::Relaxed));
    let st = state.clone();
    let (session, dto) = tokio::task::spawn_blocking(move || -> Result<_, ApiError> {
        let mut s = Session::create(&st.gen, id, PromptText::new(req.prompt), req.seed, config)?;
        s.generate_choices(&st.gen)?;
        st.journal(&s);
        let dto = SessionStateDto::from_session(&s)?;
        Ok((s, dto))
    })
    .await
    .map_err(ApiError::internal)??;
    state
        .sessions
        .write()
        .unwrap()
        .insert(dto.session_id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(dto)))
}

async fn fetch(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<SessionStateDto>, ApiError> {
    let shared = state.lookup(&id)?;
    let s = shared.lock().await;
    Ok(Json(SessionStateDto::from_session(&s)?))
}

async fn step(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<StepRequest>,
) -> Result<Json<SessionStateDto>, ApiError> {
    let guard = state.lock(&id)?;
    if let Some(expected) = req.step {
        if expected != guard.step() {
            return Err(ApiError::conflict(format!(
                "step {expected} requested but session {id} is at step {}",
                guard.step()
            )));
        }
    }
    let dto = locked(state, guard, move |gen, s| {
        s.apply_choice(gen, req.choice_index, req.alpha)?;
        s.generate_choices(gen)?;
        Ok(())
    })
    .await?;
    Ok(Json(dto))
}

async fn undo(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<SessionStateDto>, ApiError> {
    let guard = state.lock(&id)?;
    let dto = locked(state, guard, |gen, s| {
        s.undo(gen)?;
        s.generate_choices(gen)?;
        Ok(())
    })
    .await?;
    Ok(Json(dto))
}

async fn export(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<impl IntoResponse, ApiError> {
    let shared = state.lookup(&id)?;
    let body = shared.lock().await.log().to_jsonl()?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body))
}
