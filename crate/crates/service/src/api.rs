//! Routes. Every error body is `{"error": {"kind": ..., "message": ...}}`.

use std::convert::Infallible;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use drawgen_core::history::{summarize, HistoryError, Origin};
use drawgen_core::layout::LayoutConfig;
use drawgen_core::pipeline::{run_generation, GenerationOutcome, GenerationRequest, PipelineError, PipelineEvent};
use drawgen_core::prompt::{ChatTurn, ImageAttachment};
use drawgen_core::provider::{ProviderConfig, ProviderError, Usage};
use drawgen_core::stream::Phase;
use drawgen_core::Diagram;
use futures::stream;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::mpsc;
use tokio_util::sync::CancellationToken;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::state::{ActiveGuard, AppState, Session, StateError};

/// Chat bodies may carry a base64 image.
const BODY_LIMIT: usize = 32 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Unavailable(String),
    #[error(transparent)]
    BadGateway(ProviderError),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::BadGateway(_) => StatusCode::BAD_GATEWAY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            ApiError::NotFound(_) => "not_found",
            ApiError::Conflict(_) => "conflict",
            ApiError::Unprocessable(_) => "invalid",
            ApiError::Unavailable(_) => "unavailable",
            ApiError::BadGateway(e) => e.kind(),
            ApiError::Internal(_) => "internal",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "kind": self.kind(), "message": self.to_string() } });
        (self.status(), Json(body)).into_response()
    }
}

impl From<StateError> for ApiError {
    fn from(e: StateError) -> Self {
        match e {
            StateError::UnknownSession(_) => ApiError::NotFound(e.to_string()),
            StateError::SessionLimit(_) => ApiError::Unavailable(e.to_string()),
            StateError::Busy => ApiError::Conflict(e.to_string()),
            StateError::Provider(p) => ApiError::Unprocessable(p.to_string()),
            StateError::Layout(_) => ApiError::Unprocessable(e.to_string()),
            StateError::History(h) => h.into(),
        }
    }
}

impl From<HistoryError> for ApiError {
    fn from(e: HistoryError) -> Self {
        match e {
            HistoryError::UnknownVersion(_) => ApiError::NotFound(e.to_string()),
            HistoryError::InvalidDiagram(_) | HistoryError::InvalidXml(_) => ApiError::Unprocessable(e.to_string()),
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

pub fn router(state: AppState, ui_origin: Option<&str>) -> Router {
    let api = Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}/chat", post(chat).delete(stop))
        .route("/api/sessions/{id}/diagram", get(diagram))
        .route("/api/sessions/{id}/history", get(history).post(import))
        .route("/api/sessions/{id}/history/{version}", get(snapshot))
        .route("/api/sessions/{id}/history/{version}/restore", post(restore))
        .route("/api/settings", get(get_settings).put(put_settings))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state);
    match ui_origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(origin) => api.layer(
            CorsLayer::new()
                .allow_origin(AllowOrigin::exact(origin))
                .allow_methods([Method::GET, Method::POST, Method::PUT, Method::DELETE])
                .allow_headers([header::CONTENT_TYPE]),
        ),
        None => api,
    }
}

async fn create_session(State(app): State<AppState>) -> Result<(StatusCode, Json<Value>), ApiError> {
    let session = app.create_session()?;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": session.id }))))
}

fn xml_response(xml: String) -> Response {
    ([(header::CONTENT_TYPE, "application/xml")], xml).into_response()
}

async fn diagram(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = app.session(&id)?;
    let xml = session
        .with_history(|h| h.head().map(|e| e.xml_snapshot.clone()))
        .ok_or_else(|| ApiError::Internal("session has no history".into()))?;
    Ok(xml_response(xml))
}

async fn history(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let session = app.session(&id)?;
    Ok(Json(json!(session.with_history(|h| h.log()))))
}

async fn snapshot(State(app): State<AppState>, Path((id, version)): Path<(String, u64)>) -> Result<Response, ApiError> {
    let session = app.session(&id)?;
    let xml = session
        .with_history(|h| h.entry(version).map(|e| e.xml_snapshot.clone()))
        .ok_or(HistoryError::UnknownVersion(version))?;
    Ok(xml_response(xml))
}

async fn restore(State(app): State<AppState>, Path((id, version)): Path<(String, u64)>) -> Result<Json<Value>, ApiError> {
    let session = app.session(&id)?;
    let (new_version, xml) = session.with_history(|h| -> Result<_, HistoryError> {
        let v = h.restore(version)?;
        Ok((v, h.head().map(|e| e.xml_snapshot.clone()).unwrap_or_default()))
    })?;
    Ok(Json(json!({ "version": new_version, "xml": xml })))
}

#[derive(Debug, Deserialize)]
struct ImportBody {
    xml: String,
    #[serde(default)]
    summary: String,
}

/// Records an externally edited diagram (the editor frame's save).
async fn import(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<ImportBody>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let session = app.session(&id)?;
    let version = session.with_history(|h| h.append_xml(&body.xml, &body.summary, Origin::Import))?;
    Ok((StatusCode::CREATED, Json(json!({ "version": version }))))
}

async fn get_settings(State(app): State<AppState>) -> Json<Value> {
    Json(json!(app.settings().view()))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Partial update: fields left out keep their current values. `api_key` is
/// accepted but never shown again; an empty string clears it.
async fn put_settings(State(app): State<AppState>, Json(body): Json<Value>) -> Result<Json<Value>, ApiError> {
    let Value::Object(mut patch) = body else {
        return Err(ApiError::Unprocessable("settings body must be a JSON object".into()));
    };
    let api_key = match patch.remove("api_key") {
        None | Some(Value::Null) => None,
        Some(Value::String(k)) => Some(k),
        Some(_) => return Err(ApiError::Unprocessable("api_key must be a string".into())),
    };
    let current = app.settings();
    let mut provider = json!(current.provider_config);
    let mut layout = json!(current.layout);
    for (k, v) in patch {
        match k.as_str() {
            "provider" => merge(&mut provider, v),
            "layout" => merge(&mut layout, v),
            other => return Err(ApiError::Unprocessable(format!("unknown settings field {other:?}"))),
        }
    }
    let provider: ProviderConfig =
        serde_json::from_value(provider).map_err(|e| ApiError::Unprocessable(format!("provider: {e}")))?;
    let layout: LayoutConfig = serde_json::from_value(layout).map_err(|e| ApiError::Unprocessable(format!("layout: {e}")))?;
    let view = app.update_settings(provider, layout, api_key)?;
    Ok(Json(json!(view)))
}

async fn stop(State(app): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    let session = app.session(&id)?;
    if session.stop() {
        Ok(StatusCode::ACCEPTED)
    } else {
        Err(ApiError::NotFound("no active generation".into()))
    }
}

#[derive(Debug, Deserialize)]
struct ChatBody {
    #[serde(default)]
    text: String,
    /// Base64, optionally as a `data:` URL.
    image: Option<String>,
}

fn decode_image(raw: &str) -> Result<ImageAttachment, ApiError> {
    let (media, data) = match raw.strip_prefix("data:").and_then(|r| r.split_once(";base64,")) {
        Some((media, data)) => (Some(media), data),
        None => (None, raw),
    };
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(data.trim())
        .map_err(|e| ApiError::Unprocessable(format!("image is not valid base64: {e}")))?;
    if bytes.is_empty() {
        return Err(ApiError::Unprocessable("image is empty".into()));
    }
    let mut image = ImageAttachment::from_bytes(bytes);
    if let Some(m) = media.filter(|m| !m.is_empty()) {
        image.media_type = m.to_string();
    }
    Ok(image)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundStatus {
    Ok,
    Failed,
    Stopped,
}

#[derive(Debug, Serialize)]
struct DonePayload {
    status: RoundStatus,
    correction_iterations: u32,
    version: Option<u64>,
    usage: Usage,
    elapsed_ms: u128,
}

enum Out {
    Event(Event),
    /// Provider failed before anything was streamed.
    Reject(ProviderError),
}

fn event(name: &str, data: impl AsRef<str>) -> Event {
    Event::default().event(name).data(data)
}

fn pipeline_event(e: PipelineEvent) -> Event {
    match e {
        PipelineEvent::Text(t) => event("text", json!(t).to_string()),
        PipelineEvent::Phase(p) => event("phase", phase_name(p)),
        PipelineEvent::Repair(issues) => event("repair", json!(issues).to_string()),
    }
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Textual => "textual",
        Phase::Visual => "visual",
        Phase::Failed => "failed",
        Phase::Stopped => "stopped",
    }
}

fn error_body(e: &PipelineError) -> Value {
    let mut body = json!({ "kind": e.kind(), "message": e.to_string() });
    match e {
        PipelineError::Provider(_) => body["status"] = json!(StatusCode::BAD_GATEWAY.as_u16()),
        PipelineError::Validation { outcome, .. } => body["issues"] = json!(outcome.issues),
        PipelineError::Integrity(v) => body["issues"] = json!(v.iter().map(|v| v.to_string()).collect::<Vec<_>>()),
        PipelineError::Stopped { partial } => body["partial"] = json!(partial),
        PipelineError::Prompt(_) => {}
    }
    body
}

fn commit(session: &Session, text: &str, out: &GenerationOutcome) -> Result<u64, HistoryError> {
    let version = session.with_history(|h| {
        let previous = h.head_diagram().unwrap_or_else(|| Diagram::new_empty(out.diagram.name.clone()));
        h.append(&out.diagram, &summarize(&previous, &out.diagram), Origin::UserPrompt)
    })?;
    session.push_turns([ChatTurn::user(text), ChatTurn::assistant(out.response_text.clone())]);
    Ok(version)
}

struct Round {
    app: AppState,
    session: Arc<Session>,
    request: GenerationRequest,
    text: String,
    cancel: CancellationToken,
    _guard: ActiveGuard,
}

async fn run_round(round: Round, tx: mpsc::UnboundedSender<Out>) {
    let started = Instant::now();
    let settings = round.app.settings();
    let provider = settings.provider();
    let cfg = settings.pipeline_config();
    let mut streamed = false;
    let cancel = round.cancel.clone();
    let result = run_generation(&provider, &cfg, round.request, round.cancel.clone(), |e| {
        streamed = true;
        if tx.send(Out::Event(pipeline_event(e))).is_err() {
            // Client went away.
            cancel.cancel();
        }
    })
    .await;

    let mut done = DonePayload {
        status: RoundStatus::Ok,
        correction_iterations: 0,
        version: None,
        usage: Usage::default(),
        elapsed_ms: 0,
    };
    let terminal = match result {
        Ok(out) => {
            done.correction_iterations = out.correction_iterations;
            done.usage = out.usage;
            match commit(&round.session, &round.text, &out) {
                Ok(v) => {
                    done.version = Some(v);
                    event("diagram", &out.xml)
                }
                Err(e) => {
                    done.status = RoundStatus::Failed;
                    event("error", json!({ "kind": "storage", "message": e.to_string() }).to_string())
                }
            }
        }
        Err(PipelineError::Provider(e)) if !streamed => {
            let _ = tx.send(Out::Reject(e));
            return;
        }
        Err(e) => {
            done.status = match e {
                PipelineError::Stopped { .. } => RoundStatus::Stopped,
                _ => RoundStatus::Failed,
            };
            if let PipelineError::Validation { correction_iterations, .. } = &e {
                done.correction_iterations = *correction_iterations;
            }
            event("error", error_body(&e).to_string())
        }
    };
    done.elapsed_ms = started.elapsed().as_millis();
    let _ = tx.send(Out::Event(terminal));
    let _ = tx.send(Out::Event(event("done", json!(done).to_string())));
}

async fn chat(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<ChatBody>,
) -> Result<Response, ApiError> {
    let session = app.session(&id)?;
    let image = body.image.as_deref().map(decode_image).transpose()?;
    if body.text.trim().is_empty() && image.is_none() {
        return Err(ApiError::Unprocessable("text must not be empty".into()));
    }
    let cancel = CancellationToken::new();
    let guard = session.begin(cancel.clone())?;
    let request = GenerationRequest {
        user_text: body.text.clone(),
        image,
        history: session.chat_history(),
        current: session.head_diagram().filter(|d| d.cells.len() > 2),
    };
    let (tx, mut rx) = mpsc::unbounded_channel();
    let round = Round {
        app,
        session,
        request,
        text: body.text,
        cancel,
        _guard: guard,
    };
    tokio::spawn(run_round(round, tx));

    let first = match rx.recv().await {
        Some(Out::Event(e)) => e,
        Some(Out::Reject(e)) => return Err(ApiError::BadGateway(e)),
        None => return Err(ApiError::Internal("generation ended without output".into())),
    };
    let rest = stream::unfold(rx, |mut rx| async move {
        match rx.recv().await {
            Some(Out::Event(e)) => Some((Ok::<_, Infallible>(e), rx)),
            _ => None,
        }
    });
    let events = futures::StreamExt::chain(stream::once(async move { Ok(first) }), rest);
    Ok(Sse::new(events).keep_alive(KeepAlive::default()).into_response())
}
