//! HTTP front end for interactive restoration sessions.
//!
//! A session holds a text with `-` runs for missing characters. Clients ask
//! for ranked proposals over a span of that text and accept one (or their
//! own reading). Accepted steps are appended to a per-session log so the
//! current text can always be rebuilt from the initial text.

pub mod error;
pub mod store;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use lacuna_core::beam::scale_attention_for_viz;
use lacuna_core::restore::{centered_window, find_gap};
use lacuna_core::vocab::{MISSING, PAD, PREDICT, START};
use lacuna_core::{BeamConfig, Restorer};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub use error::ApiError;
pub use store::{HistoryEntry, Session, SessionStore};

/// Largest window of characters handed to the model around a gap.
pub const MAX_CONTEXT: usize = 1000;

pub struct AppState {
    pub restorer: Arc<dyn Restorer>,
    pub store: SessionStore,
    pub model_id: String,
    pub default_beam: BeamConfig,
}

impl AppState {
    pub fn new(restorer: Arc<dyn Restorer>, data_dir: &Path, model_id: impl Into<String>) -> Result<Self, ApiError> {
        Ok(Self {
            restorer,
            store: SessionStore::open(data_dir)?,
            model_id: model_id.into(),
            default_beam: BeamConfig::default(),
        })
    }
}

#[derive(Debug, Deserialize)]
pub struct CreateRequest {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateResponse {
    pub id: String,
    pub session: Session,
}

#[derive(Debug, Deserialize)]
pub struct ProposeRequest {
    pub start: usize,
    pub length: usize,
    pub beam_width: Option<usize>,
    pub top_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposedHypothesis {
    pub text: String,
    pub log_prob: f64,
    /// Rows per predicted character, columns per window position, in `[0, 1]`.
    pub attention: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposeResponse {
    pub start: usize,
    pub length: usize,
    /// Character offsets of the model's context window in the session text.
    pub window_start: usize,
    pub window_end: usize,
    pub hypotheses: Vec<ProposedHypothesis>,
}

#[derive(Debug, Deserialize)]
pub struct AcceptRequest {
    pub start: usize,
    pub length: usize,
    pub text: String,
}

#[derive(Debug, Deserialize)]
pub struct RestoreRequest {
    pub text: String,
    pub beam_width: Option<usize>,
    pub top_k: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RestoreResponse {
    pub start: usize,
    pub length: usize,
    pub hypotheses: Vec<ProposedHypothesis>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model: String,
    pub sessions: usize,
}

/// Builds the API router. When `ui_dir` is given its files are served
/// under `/ui`.
pub fn router(state: Arc<AppState>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/v1/health", get(health))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/propose", post(propose))
        .route("/v1/sessions/{id}/accept", post(accept))
        .route("/v1/restore", post(restore))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.nest_service("/ui", ServeDir::new(dir)),
        None => api,
    }
}

fn beam_config(default: &BeamConfig, width: Option<usize>, top_k: Option<usize>) -> Result<BeamConfig, ApiError> {
    Ok(BeamConfig::new(
        width.unwrap_or(default.beam_width),
        top_k.unwrap_or(default.top_k),
    )?)
}

/// Characters a session may contain: alphabet symbols plus `-`, without
/// `?` or the padding and start markers.
fn check_session_text(restorer: &dyn Restorer, text: &str) -> Result<(), ApiError> {
    let alphabet = restorer.alphabet();
    for (position, ch) in text.chars().enumerate() {
        if ch == PREDICT || ch == PAD || ch == START || alphabet.index(ch).is_none() {
            return Err(ApiError::InvalidChar {
                message: format!("character {ch:?} at position {position} is not allowed in a session text"),
                position,
            });
        }
    }
    Ok(())
}

fn check_fill(restorer: &dyn Restorer, fill: &str) -> Result<(), ApiError> {
    let alphabet = restorer.alphabet();
    for (position, ch) in fill.chars().enumerate() {
        if ch == PREDICT || ch == PAD || ch == START || ch == MISSING || alphabet.index(ch).is_none() {
            return Err(ApiError::InvalidChar {
                message: format!("character {ch:?} at position {position} cannot be used in a restoration"),
                position,
            });
        }
    }
    Ok(())
}

/// Window of `text` around `[start, start + length)` with the span marked
/// as `?`, plus the window offsets. The span must be a run of `-`.
fn masked_window(text: &str, start: usize, length: usize) -> Result<(String, usize, usize), ApiError> {
    let chars: Vec<char> = text.chars().collect();
    let end = start
        .checked_add(length)
        .filter(|&e| length > 0 && e <= chars.len())
        .ok_or_else(|| ApiError::BadRequest(format!("span {start}+{length} is outside the text")))?;
    if let Some(i) = (start..end).find(|&i| chars[i] != MISSING) {
        return Err(ApiError::BadRequest(format!("position {i} is not a missing character")));
    }
    let (a, b) = centered_window(chars.len(), start, length, MAX_CONTEXT);
    let masked = (a..b)
        .map(|i| if (start..end).contains(&i) { PREDICT } else { chars[i] })
        .collect();
    Ok((masked, a, b))
}

fn present(masked: &str, hyps: Vec<lacuna_core::Hypothesis>) -> Result<Vec<ProposedHypothesis>, ApiError> {
    let mask: Vec<bool> = masked.chars().map(|c| c == PREDICT || c == MISSING).collect();
    hyps.into_iter()
        .map(|h| {
            let attention = if h.attention.is_empty() {
                Vec::new()
            } else {
                scale_attention_for_viz(&h.attention, &mask)?
            };
            Ok(ProposedHypothesis {
                text: h.text,
                log_prob: h.log_prob,
                attention,
            })
        })
        .collect()
}

async fn blocking<R: Send + 'static>(f: impl FnOnce() -> Result<R, ApiError> + Send + 'static) -> Result<R, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model: state.model_id.clone(),
        sessions: state.store.ids().await.len(),
    })
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateRequest>,
) -> Result<Json<CreateResponse>, ApiError> {
    check_session_text(state.restorer.as_ref(), &req.text)?;
    let session = state.store.create(req.text, state.model_id.clone()).await?;
    Ok(Json(CreateResponse {
        id: session.id.clone(),
        session,
    }))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Session>, ApiError> {
    Ok(Json(state.store.get(&id).await?))
}

async fn propose(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<ProposeRequest>,
) -> Result<Json<ProposeResponse>, ApiError> {
    let beam = beam_config(&state.default_beam, req.beam_width, req.top_k)?;
    let text = state.store.get(&id).await?.text;
    let (masked, window_start, window_end) = masked_window(&text, req.start, req.length)?;
    let restorer = state.restorer.clone();
    let hypotheses = blocking(move || {
        let hyps = restorer.propose(&masked, &beam)?;
        present(&masked, hyps)
    })
    .await?;
    Ok(Json(ProposeResponse {
        start: req.start,
        length: req.length,
        window_start,
        window_end,
        hypotheses,
    }))
}

async fn accept(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<AcceptRequest>,
) -> Result<Json<Session>, ApiError> {
    let n = req.text.chars().count();
    if n != req.length {
        return Err(ApiError::BadRequest(format!(
            "restoration has {n} characters for a span of {}",
            req.length
        )));
    }
    check_fill(state.restorer.as_ref(), &req.text)?;
    let handle = state.store.handle(&id).await?;
    let mut session = handle.lock().await;
    let (masked, _, _) = masked_window(&session.text, req.start, req.length)?;
    let restorer = state.restorer.clone();
    let fill = req.text.clone();
    let log_prob = blocking(move || Ok(restorer.score(&masked, &fill)?)).await?;
    let entry = HistoryEntry {
        start: req.start,
        length: req.length,
        text: req.text,
        log_prob,
        timestamp_ms: store::now_ms(),
    };
    state.store.commit(&mut session, entry)?;
    Ok(Json(session.clone()))
}

async fn restore(
    State(state): State<Arc<AppState>>,
    Json(req): Json<RestoreRequest>,
) -> Result<Json<RestoreResponse>, ApiError> {
    let beam = beam_config(&state.default_beam, req.beam_width, req.top_k)?;
    state.restorer.alphabet().encode_str(&req.text)?;
    let (start, length) = find_gap(&req.text)?;
    let chars: Vec<char> = req.text.chars().collect();
    let (a, b) = centered_window(chars.len(), start, length, MAX_CONTEXT);
    let masked: String = chars[a..b].iter().collect();
    let restorer = state.restorer.clone();
    let hypotheses = blocking(move || {
        let hyps = restorer.propose(&masked, &beam)?;
        present(&masked, hyps)
    })
    .await?;
    Ok(Json(RestoreResponse {
        start,
        length,
        hypotheses,
    }))
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, ui_dir: Option<PathBuf>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state, ui_dir)).await
}
