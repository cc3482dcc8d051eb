//! JSON API and console socket.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use infohub_core::network::HubIdentity;
use infohub_core::store::ChunkFilter;
use infohub_core::survey::SurveyDefinition;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;
use tower_http::services::ServeDir;

use crate::hub::{action_json, Hub, HubError};

pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1}))).into_response()
    }
}

impl From<HubError> for ApiError {
    fn from(e: HubError) -> Self {
        use infohub_core::survey::SurveyError;
        let status = match &e {
            HubError::BadRequest(_) | HubError::Config(_) => StatusCode::BAD_REQUEST,
            HubError::NotFound(_) => StatusCode::NOT_FOUND,
            HubError::Survey(SurveyError::RunNotActive) => StatusCode::CONFLICT,
            HubError::Survey(SurveyError::DuplicateQuestionId(_)) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

type ApiResult = Result<Response, ApiError>;

/// Runs blocking hub work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, HubError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

pub fn router(hub: Arc<Hub>) -> Router {
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/teach", post(teach))
        .route("/ask", post(ask))
        .route("/chunks", get(list_chunks))
        .route("/chunks/{id}", get(get_chunk).patch(patch_chunk))
        .route("/sessions/{id}/knowledge", delete(forget))
        .route("/peers", get(list_peers).post(add_peer))
        .route("/surveys", get(list_surveys).post(register_survey))
        .route("/surveys/{id}/start", post(start_survey))
        .route("/surveys/runs/{run}/submit", post(submit_survey))
        .route("/surveys/runs/{run}/abort", post(abort_survey))
        .route("/export/events", get(export_events))
        .route("/export/surveys", get(export_surveys))
        .route("/ws/console", get(console_ws));
    let api = match hub.config().static_dir.trim() {
        "" => api,
        dir => api.fallback_service(ServeDir::new(dir)),
    };
    api.with_state(hub)
}

async fn healthz(State(hub): State<Arc<Hub>>) -> Json<Value> {
    Json(json!({"status": "ok", "hub_id": hub.store().hub_id(), "chunks": hub.store().len()}))
}

#[derive(Deserialize)]
struct TeachBody {
    text: String,
    #[serde(default)]
    tags: Vec<String>,
    #[serde(default)]
    share: bool,
    #[serde(default)]
    session: Option<String>,
}

async fn teach(State(hub): State<Arc<Hub>>, body: Result<Json<TeachBody>, JsonRejection>) -> ApiResult {
    let Json(body) = body?;
    let h = Arc::clone(&hub);
    let session = body.session.unwrap_or_else(|| "console".into());
    let ids = blocking(move || h.teach(&body.text, &body.tags, body.share, &session)).await?;
    Ok(Json(json!({"chunk_ids": ids, "store_size": hub.store().len()})).into_response())
}

#[derive(Deserialize)]
struct AskBody {
    question: String,
    #[serde(default)]
    session: Option<String>,
}

async fn ask(State(hub): State<Arc<Hub>>, body: Result<Json<AskBody>, JsonRejection>) -> ApiResult {
    let Json(body) = body?;
    let answer = blocking(move || hub.ask(&body.question, body.session.as_deref())).await?;
    Ok(Json(answer).into_response())
}

#[derive(Deserialize)]
struct ChunkQuery {
    shareable: Option<bool>,
    tag: Option<String>,
    session: Option<String>,
}

async fn list_chunks(
    State(hub): State<Arc<Hub>>,
    q: Result<Query<ChunkQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult {
    let Query(q) = q.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let filter =
        ChunkFilter { shareable: q.shareable, any_tags: q.tag.into_iter().collect(), source_session: q.session };
    Ok(Json(hub.chunks(&filter)?).into_response())
}

async fn get_chunk(State(hub): State<Arc<Hub>>, Path(id): Path<String>) -> ApiResult {
    Ok(Json(hub.chunk(&id)?).into_response())
}

#[derive(Deserialize)]
struct PatchChunk {
    shareable: bool,
}

async fn patch_chunk(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
    body: Result<Json<PatchChunk>, JsonRejection>,
) -> ApiResult {
    let Json(body) = body?;
    let view = blocking(move || hub.set_shareable(&id, body.shareable)).await?;
    Ok(Json(view).into_response())
}

async fn forget(State(hub): State<Arc<Hub>>, Path(id): Path<String>) -> ApiResult {
    let removed = blocking(move || hub.forget(&id)).await?;
    Ok(Json(json!({"removed": removed})).into_response())
}

async fn list_peers(State(hub): State<Arc<Hub>>) -> Json<Value> {
    Json(json!(hub.peers()))
}

async fn add_peer(State(hub): State<Arc<Hub>>, body: Result<Json<HubIdentity>, JsonRejection>) -> ApiResult {
    let Json(peer) = body?;
    let h = Arc::clone(&hub);
    blocking(move || h.add_peer(peer)).await?;
    Ok(Json(json!(hub.peers())).into_response())
}

async fn list_surveys(State(hub): State<Arc<Hub>>) -> Json<Value> {
    Json(json!(hub.survey_definitions().iter().map(|d| &**d).collect::<Vec<_>>()))
}

async fn register_survey(
    State(hub): State<Arc<Hub>>,
    body: Result<Json<SurveyDefinition>, JsonRejection>,
) -> ApiResult {
    let Json(def) = body?;
    let id = def.id.clone();
    hub.register_survey(def)?;
    Ok((StatusCode::CREATED, Json(json!({"id": id}))).into_response())
}

#[derive(Deserialize, Default)]
struct StartBody {
    #[serde(default)]
    session: Option<String>,
}

async fn start_survey(State(hub): State<Arc<Hub>>, Path(id): Path<String>, body: Option<Json<StartBody>>) -> ApiResult {
    let session = body.and_then(|Json(b)| b.session).unwrap_or_else(|| "console".into());
    let progress = blocking(move || hub.start_survey(&id, &session)).await?;
    Ok(Json(progress).into_response())
}

#[derive(Deserialize)]
struct SubmitBody {
    utterance: String,
}

async fn submit_survey(
    State(hub): State<Arc<Hub>>,
    Path(run): Path<String>,
    body: Result<Json<SubmitBody>, JsonRejection>,
) -> ApiResult {
    let Json(body) = body?;
    let progress = blocking(move || hub.submit_survey(&run, &body.utterance)).await?;
    Ok(Json(progress).into_response())
}

async fn abort_survey(State(hub): State<Arc<Hub>>, Path(run): Path<String>) -> ApiResult {
    blocking(move || hub.abort_survey(&run)).await?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

fn ndjson(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
}

async fn export_events(State(hub): State<Arc<Hub>>) -> ApiResult {
    Ok(ndjson(blocking(move || Ok(hub.events().export()?)).await?))
}

async fn export_surveys(State(hub): State<Arc<Hub>>) -> ApiResult {
    Ok(ndjson(blocking(move || hub.export_surveys()).await?))
}

/// Messages from the console. Chat turns go through the same engine step
/// as agent transcripts.
#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ConsoleRequest {
    Chat { session: Option<String>, text: String },
    Ping,
}

async fn console_ws(State(hub): State<Arc<Hub>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| console_session(hub, socket))
}

async fn console_session(hub: Arc<Hub>, mut socket: WebSocket) {
    let mut events = hub.events().subscribe();
    let default_session = infohub_core::engine::SessionTable::fresh_id("console");
    loop {
        tokio::select! {
            event = events.recv() => {
                let msg = match event {
                    Ok(record) => json!({"type": "event", "event": record}),
                    Err(RecvError::Lagged(n)) => json!({"type": "lagged", "missed": n}),
                    Err(RecvError::Closed) => return,
                };
                if socket.send(Message::Text(msg.to_string().into())).await.is_err() {
                    return;
                }
            }
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                    Some(Ok(_)) => continue,
                };
                let reply = match serde_json::from_str::<ConsoleRequest>(&text) {
                    Ok(ConsoleRequest::Ping) => json!({"type": "pong"}),
                    Ok(ConsoleRequest::Chat { session, text }) => {
                        let session = session.unwrap_or_else(|| default_session.clone());
                        let h = Arc::clone(&hub);
                        let sid = session.clone();
                        match tokio::task::spawn_blocking(move || h.step(&sid, &text)).await {
                            Ok(actions) => json!({
                                "type": "chat_result",
                                "session": session,
                                "actions": actions.iter().map(action_json).collect::<Vec<_>>(),
                            }),
                            Err(e) => json!({"type": "error", "error": e.to_string()}),
                        }
                    }
                    Err(e) => json!({"type": "error", "error": e.to_string()}),
                };
                if socket.send(Message::Text(reply.to_string().into())).await.is_err() {
                    return;
                }
            }
        }
    }
}
