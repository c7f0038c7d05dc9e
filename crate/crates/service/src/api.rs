use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};

use crate::error::{Result, ServiceError};
use crate::source::GameSource;
use crate::store::{now_ms, Ack, ConfigAggregate, Session, SessionStatus, SessionSummary, Store};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub source: Arc<dyn GameSource>,
}

impl AppState {
    pub fn new(store: Store, source: impl GameSource + 'static) -> Self {
        Self {
            store: Arc::new(store),
            source: Arc::new(source),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub config_id: String,
    pub participant: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhotoView {
    pub photo_ref: String,
    pub url: String,
}

/// What the client sees of a game: no identities, labels or target position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameView {
    pub session_id: String,
    pub index: usize,
    pub total: usize,
    pub sketch_url: String,
    pub photos: Vec<PhotoView>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub photo_ref: String,
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    kind: &'static str,
}

impl ServiceError {
    fn status(&self) -> (StatusCode, &'static str) {
        match self {
            Self::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Self::UnknownConfig(_) => (StatusCode::NOT_FOUND, "unknown_config"),
            Self::OutOfOrder { .. } => (StatusCode::CONFLICT, "out_of_order"),
            Self::AlreadyAnswered { .. } => (StatusCode::CONFLICT, "already_answered"),
            Self::Incomplete { .. } => (StatusCode::CONFLICT, "incomplete"),
            Self::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            Self::ForeignPhoto(_) => (StatusCode::UNPROCESSABLE_ENTITY, "foreign_photo"),
            Self::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            Self::SimulatedCrash => (StatusCode::SERVICE_UNAVAILABLE, "crash"),
            Self::Corrupt(_) | Self::Core(_) | Self::Io(_) | Self::Json(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, kind) = self.status();
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        let body = ErrorBody {
            error: self.to_string(),
            kind,
        };
        (status, Json(body)).into_response()
    }
}

async fn blocking<T, F>(f: F) -> Result<T>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Io(std::io::Error::other(e)))?
}

pub fn image_url(hash: &str) -> String {
    format!("/images/{hash}.png")
}

async fn create_session(State(app): State<AppState>, Json(req): Json<CreateSession>) -> Result<impl IntoResponse> {
    if req.participant.trim().is_empty() {
        return Err(ServiceError::BadRequest("participant must not be empty".into()));
    }
    let status = blocking(move || {
        let seed = req.seed.unwrap_or_else(rand::random);
        let games = app.source.generate(&req.config_id, seed, &app.store)?;
        let session = Session {
            id: uuid::Uuid::new_v4().simple().to_string(),
            participant: req.participant,
            config_id: req.config_id,
            seed,
            created_unix_ms: now_ms(),
            games,
        };
        app.store.create(&session)?;
        tracing::info!(session = %session.id, config = %session.config_id, seed, "session created");
        app.store.status(&session.id)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(status)))
}

async fn session_status(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionStatus>> {
    Ok(Json(blocking(move || app.store.status(&id)).await?))
}

async fn get_game(State(app): State<AppState>, Path((id, index)): Path<(String, usize)>) -> Result<Json<GameView>> {
    let (session, game) = blocking(move || app.store.game(&id, index)).await?;
    Ok(Json(GameView {
        session_id: session.id,
        index,
        total: session.games.len(),
        sketch_url: image_url(&game.sketch),
        photos: game
            .photos
            .into_iter()
            .map(|p| PhotoView {
                url: image_url(&p.photo_ref),
                photo_ref: p.photo_ref,
            })
            .collect(),
    }))
}

async fn submit_answer(
    State(app): State<AppState>,
    Path((id, index)): Path<(String, usize)>,
    Json(req): Json<AnswerRequest>,
) -> Result<Json<Ack>> {
    Ok(Json(blocking(move || app.store.submit(&id, index, &req.photo_ref)).await?))
}

async fn summary(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionSummary>> {
    Ok(Json(blocking(move || app.store.summary(&id)).await?))
}

async fn image(State(app): State<AppState>, Path(file): Path<String>) -> Result<Response> {
    let hash = file
        .strip_suffix(".png")
        .ok_or_else(|| ServiceError::NotFound(format!("image {file}")))?
        .to_string();
    let bytes = blocking(move || app.store.image(&hash)).await?;
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("image/png")),
            (header::CACHE_CONTROL, HeaderValue::from_static("public, max-age=31536000, immutable")),
        ],
        bytes,
    )
        .into_response())
}

async fn configs(State(app): State<AppState>) -> Result<Json<Vec<String>>> {
    Ok(Json(blocking(move || app.source.configs()).await?))
}

async fn config_aggregate(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<ConfigAggregate>> {
    Ok(Json(blocking(move || app.store.aggregate(&id)).await?))
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_status))
        .route("/sessions/{id}/games/{index}", get(get_game))
        .route("/sessions/{id}/games/{index}/answer", post(submit_answer))
        .route("/sessions/{id}/summary", get(summary))
        .route("/images/{file}", get(image))
        .route("/configs", get(configs))
        .route("/configs/{id}/aggregate", get(config_aggregate))
        .layer(cors)
        .with_state(state)
}
