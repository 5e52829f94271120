//! Experiment service: hosts live sessions over HTTP and WebSocket.
//!
//! Each session sits behind its own mutex, so all mutations of one session
//! are serialized while different sessions proceed independently. A
//! background ticker drives deadlines and inter-round pauses. Every change
//! bumps a per-session watch channel carrying the latest event seq, which
//! WebSocket connections use to push filtered updates.

mod ws;

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kpr_core::session::{
    new_token, ClientMessage, Role, RosterSpec, ServerMessage, Session, SessionError,
    SessionOptions,
};
use kpr_core::GameConfig;
use serde::{Deserialize, Serialize};
use tokio::sync::{watch, Mutex, RwLock};

pub const DEFAULT_TICK_MS: u64 = 100;

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    pub config: GameConfig,
    pub roster: RosterSpec,
    #[serde(default)]
    pub options: Option<SessionOptions>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
    pub admin_token: String,
    /// Token for seat `i` at index `i`.
    pub participant_tokens: Vec<String>,
    pub log_path: PathBuf,
}

pub struct SessionSlot {
    session: Mutex<Session>,
    changed: watch::Sender<u64>,
}

impl SessionSlot {
    pub async fn lock(&self) -> tokio::sync::MutexGuard<'_, Session> {
        self.session.lock().await
    }

    fn subscribe(&self) -> watch::Receiver<u64> {
        self.changed.subscribe()
    }

    fn publish(&self, session: &Session) {
        self.changed.send_if_modified(|seq| {
            let changed = *seq != session.seq();
            *seq = session.seq();
            changed
        });
    }
}

pub struct AppState {
    log_dir: PathBuf,
    sessions: RwLock<HashMap<String, Arc<SessionSlot>>>,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("session {0} already exists")]
    Duplicate(String),
    #[error("cannot create log file {path}: {source}")]
    Log {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Session(#[from] SessionError),
}

impl AppState {
    pub fn new(log_dir: impl Into<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            log_dir: log_dir.into(),
            sessions: RwLock::new(HashMap::new()),
        })
    }

    pub fn log_dir(&self) -> &Path {
        &self.log_dir
    }

    pub fn log_path(&self, session_id: &str) -> PathBuf {
        self.log_dir.join(format!("{session_id}.log"))
    }

    pub async fn create_session(
        &self,
        request: CreateSessionRequest,
    ) -> Result<CreatedSession, ServiceError> {
        let id = request.session_id.unwrap_or_else(new_token);
        let mut sessions = self.sessions.write().await;
        if sessions.contains_key(&id) {
            return Err(ServiceError::Duplicate(id));
        }
        let path = self.log_path(&id);
        let file = File::create(&path).map_err(|source| ServiceError::Log {
            path: path.clone(),
            source,
        })?;
        let session = Session::create(
            id.clone(),
            request.config,
            &request.roster,
            request.options.unwrap_or_default(),
            Some(Box::new(file)),
            now_ms(),
        )?;
        let created = CreatedSession {
            session_id: id.clone(),
            admin_token: session.admin_token().to_string(),
            participant_tokens: session.human_tokens().to_vec(),
            log_path: path,
        };
        let (changed, _) = watch::channel(session.seq());
        sessions.insert(
            id,
            Arc::new(SessionSlot {
                session: Mutex::new(session),
                changed,
            }),
        );
        Ok(created)
    }

    pub async fn session(&self, id: &str) -> Option<Arc<SessionSlot>> {
        self.sessions.read().await.get(id).cloned()
    }

    /// Applies time-driven transitions to every session once.
    pub async fn tick_all(&self, now: u64) {
        let slots: Vec<_> = self.sessions.read().await.values().cloned().collect();
        for slot in slots {
            let mut session = slot.lock().await;
            if let Err(e) = session.tick(now) {
                tracing::error!(session = session.id(), error = %e, "tick failed");
            }
            slot.publish(&session);
        }
    }
}

/// Runs `tick_all` every `period` until the runtime shuts down.
pub fn spawn_ticker(state: Arc<AppState>, period: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(period);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            interval.tick().await;
            state.tick_all(now_ms()).await;
        }
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}/join", post(join))
        .route("/sessions/{id}/choose", post(choose))
        .route("/sessions/{id}/state", get(state_of))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/log", get(log))
        .route("/sessions/{id}/advance", post(advance))
        .route("/sessions/{id}/end", post(end))
        .route("/sessions/{id}/ws", get(ws::upgrade))
        .with_state(state)
}

/// Serves `router(state)` with a ticker until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    let ticker = spawn_ticker(state.clone(), Duration::from_millis(DEFAULT_TICK_MS));
    let result = axum::serve(listener, router(state)).await;
    ticker.abort();
    result
}

#[derive(Debug, Clone, Serialize)]
struct ErrorBody {
    code: String,
    message: String,
}

enum ApiError {
    NoSession(String),
    Service(ServiceError),
    /// Session errors are reported as stamped server messages.
    Session(StatusCode, Box<ServerMessage>),
}

fn status_of(err: &SessionError) -> StatusCode {
    match err {
        SessionError::Game(_) | SessionError::Strategy(_) | SessionError::Roster(_) => {
            StatusCode::BAD_REQUEST
        }
        SessionError::UnknownToken => StatusCode::FORBIDDEN,
        SessionError::InvalidChoice { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        SessionError::WrongPhase { .. }
        | SessionError::DeadlineNotReached { .. }
        | SessionError::DeadlinePassed => StatusCode::CONFLICT,
        SessionError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl ApiError {
    fn from_session(session: &Session, err: SessionError) -> Self {
        ApiError::Session(status_of(&err), Box::new(session.error_message(&err)))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            ApiError::NoSession(id) => (
                StatusCode::NOT_FOUND,
                Json(ErrorBody {
                    code: "unknown_session".into(),
                    message: format!("no session {id}"),
                }),
            )
                .into_response(),
            ApiError::Service(e) => {
                let (status, code) = match &e {
                    ServiceError::Duplicate(_) => (StatusCode::CONFLICT, "duplicate"),
                    ServiceError::Log { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "io"),
                    ServiceError::Session(s) => (status_of(s), s.code()),
                };
                (
                    status,
                    Json(ErrorBody {
                        code: code.into(),
                        message: e.to_string(),
                    }),
                )
                    .into_response()
            }
            ApiError::Session(status, msg) => (status, Json(*msg)).into_response(),
        }
    }
}

async fn slot(state: &AppState, id: &str) -> Result<Arc<SessionSlot>, ApiError> {
    state
        .session(id)
        .await
        .ok_or_else(|| ApiError::NoSession(id.to_string()))
}

async fn create(
    State(state): State<Arc<AppState>>,
    Json(request): Json<CreateSessionRequest>,
) -> Result<(StatusCode, Json<CreatedSession>), ApiError> {
    let created = state
        .create_session(request)
        .await
        .map_err(ApiError::Service)?;
    Ok((StatusCode::CREATED, Json(created)))
}

#[derive(Debug, Deserialize)]
struct TokenBody {
    token: String,
}

#[derive(Debug, Deserialize)]
struct ChooseBody {
    token: String,
    restaurant: usize,
}

#[derive(Debug, Deserialize)]
struct TokenQuery {
    token: String,
    after: Option<u64>,
}

async fn apply(
    state: &AppState,
    id: &str,
    message: ClientMessage,
) -> Result<Json<ServerMessage>, ApiError> {
    let slot = slot(state, id).await?;
    let mut session = slot.lock().await;
    let result = session.handle(&message, now_ms());
    slot.publish(&session);
    result
        .map(Json)
        .map_err(|e| ApiError::from_session(&session, e))
}

async fn join(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<TokenBody>,
) -> Result<Json<ServerMessage>, ApiError> {
    apply(&state, &id, ClientMessage::Join { token: body.token }).await
}

async fn choose(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<ChooseBody>,
) -> Result<Json<ServerMessage>, ApiError> {
    apply(
        &state,
        &id,
        ClientMessage::Choose {
            token: body.token,
            restaurant: body.restaurant,
        },
    )
    .await
}

async fn state_of(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<TokenQuery>,
) -> Result<Json<ServerMessage>, ApiError> {
    apply(&state, &id, ClientMessage::State { token: q.token }).await
}

/// Polling equivalent of the WebSocket push: filtered events after `after`
/// followed by the current state.
async fn events(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<TokenQuery>,
) -> Result<Json<Vec<ServerMessage>>, ApiError> {
    let slot = slot(&state, &id).await?;
    let session = slot.lock().await;
    let role = session
        .authorize(&q.token)
        .map_err(|e| ApiError::from_session(&session, e))?;
    Ok(Json(session.messages_since(role, q.after)))
}

fn require_experimenter(session: &Session, token: &str) -> Result<(), ApiError> {
    match session.authorize(token) {
        Ok(Role::Experimenter) => Ok(()),
        Ok(Role::Participant(_)) | Err(_) => {
            Err(ApiError::from_session(session, SessionError::UnknownToken))
        }
    }
}

async fn log(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<TokenQuery>,
) -> Result<Response, ApiError> {
    let slot = slot(&state, &id).await?;
    let session = slot.lock().await;
    require_experimenter(&session, &q.token)?;
    Ok((
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        session.log_ndjson(),
    )
        .into_response())
}

async fn control(
    state: &AppState,
    id: &str,
    token: &str,
    action: impl FnOnce(&mut Session, u64) -> Result<(), SessionError>,
) -> Result<Json<ServerMessage>, ApiError> {
    let slot = slot(state, id).await?;
    let mut session = slot.lock().await;
    require_experimenter(&session, token)?;
    let result = action(&mut session, now_ms());
    slot.publish(&session);
    result.map_err(|e| ApiError::from_session(&session, e))?;
    Ok(Json(session.state_message(Role::Experimenter)))
}

async fn advance(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<TokenBody>,
) -> Result<Json<ServerMessage>, ApiError> {
    control(&state, &id, &body.token, |s, now| {
        s.force_advance(now).map(|_| ())
    })
    .await
}

async fn end(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<TokenBody>,
) -> Result<Json<ServerMessage>, ApiError> {
    control(&state, &id, &body.token, |s, now| s.finish_early(now)).await
}
