use std::sync::Arc;

use alleviate_core::engine::{AlertRecord, EngineError, TurnExplanation};
use alleviate_core::ingest::ProviderNote;
use alleviate_core::kg::{EntityId, Namespace, Path, Triple};
use alleviate_core::policy::{FeedbackSource, Signal};
use alleviate_core::safety::ActionType;
use alleviate_core::screeners::Alert;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::app::{App, POLICY_SNAPSHOT_EVERY};

pub type AppState = Arc<App>;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into() }
    }

    fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "code": self.code, "message": self.message }))).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let msg = e.to_string();
        match e {
            EngineError::UnknownPatient(_)
            | EngineError::UnknownSession(_)
            | EngineError::UnknownMessage(_)
            | EngineError::UnknownAlert(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", msg),
            EngineError::Conflict(_) => ApiError::new(StatusCode::CONFLICT, "conflict", msg),
            EngineError::Validation(_) => ApiError::validation(msg),
            EngineError::Sink(_) | EngineError::Replay(_) => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg)
            }
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::validation(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::validation(e.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Accepts `p1` or `patient:p1`.
pub fn parse_patient(raw: &str) -> Result<EntityId, ApiError> {
    let id = if raw.contains(':') { raw.parse::<EntityId>() } else { EntityId::patient(raw) }
        .map_err(|e| ApiError::validation(e.to_string()))?;
    if id.namespace() != Namespace::Patient {
        return Err(ApiError::validation(format!("{id} is not a patient id")));
    }
    Ok(id)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn dispatch_alerts(app: &AppState, alerts: Vec<Alert>) {
    for alert in alerts {
        let app = app.clone();
        tokio::spawn(async move {
            app.notifier.deliver(&alert).await;
        });
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoteRequest {
    pub patient_id: String,
    pub note_id: String,
    pub text: String,
    pub authored_at: Option<DateTime<Utc>>,
}

#[derive(Serialize, Deserialize)]
pub struct NoteResponse {
    pub triples_added: usize,
    pub triples: Vec<Triple>,
    pub links_accepted: usize,
    pub warnings: Vec<String>,
}

async fn post_note(State(app): State<AppState>, body: Result<Json<NoteRequest>, JsonRejection>) -> ApiResult<Json<NoteResponse>> {
    let Json(req) = body?;
    let patient = parse_patient(&req.patient_id)?;
    if req.note_id.trim().is_empty() {
        return Err(ApiError::validation("note_id must not be empty"));
    }
    blocking(move || {
        let note = ProviderNote {
            note_id: req.note_id,
            patient_id: patient.clone(),
            text: req.text,
            authored_at: req.authored_at.unwrap_or_else(|| app.clock.now()),
        };
        let report = app.engine.ingest_note(&note, &app.log)?;
        if let Err(e) = app.snapshot_graph(&patient) {
            tracing::error!("graph snapshot for {patient} failed: {e}");
        }
        Ok(Json(NoteResponse {
            triples_added: report.triples.len(),
            links_accepted: report.links.len(),
            triples: report.triples,
            warnings: report.warnings,
        }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRequest {
    pub patient_id: String,
}

async fn post_session(State(app): State<AppState>, body: Result<Json<SessionRequest>, JsonRejection>) -> ApiResult<Json<serde_json::Value>> {
    let Json(req) = body?;
    let patient = parse_patient(&req.patient_id)?;
    blocking(move || {
        let id = app.engine.open_session(&patient, app.clock.now(), &app.log)?;
        Ok(Json(json!({ "session_id": id, "patient_id": patient })))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessageRequest {
    pub text: String,
}

#[derive(Serialize, Deserialize)]
pub struct MessageResponse {
    pub message_id: String,
    pub patient_message_id: String,
    pub reply: String,
    pub action_type: ActionType,
    pub template_id: String,
    pub fallback: bool,
    pub explanation: Vec<Path>,
    pub alerts: Vec<Alert>,
}

async fn post_message(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<MessageRequest>, JsonRejection>,
) -> ApiResult<Json<MessageResponse>> {
    let Json(req) = body?;
    let app2 = app.clone();
    let out = blocking(move || Ok(app2.engine.send_message(&id, &req.text, app2.clock.now(), &app2.log)?)).await?;
    dispatch_alerts(&app, out.alerts.clone());
    Ok(Json(MessageResponse {
        message_id: out.reply_message_id,
        patient_message_id: out.patient_message_id,
        reply: out.reply.text,
        action_type: out.reply.action_type,
        template_id: out.reply.template_id,
        fallback: out.fallback,
        explanation: out.explanation,
        alerts: out.alerts,
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRequest {
    pub message_id: String,
    pub source: FeedbackSource,
    pub signal: Signal,
}

async fn post_feedback(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<FeedbackRequest>, JsonRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let Json(req) = body?;
    blocking(move || {
        let before = app.engine.policy_update_count();
        let out = app.engine.feedback(&id, &req.message_id, req.source, req.signal, app.clock.now(), &app.log)?;
        let after = app.engine.policy_update_count();
        if after / POLICY_SNAPSHOT_EVERY > before / POLICY_SNAPSHOT_EVERY {
            if let Err(e) = app.snapshot_policy() {
                tracing::error!("policy snapshot failed: {e}");
            }
        }
        Ok(Json(json!({ "q_after": out.q_after })))
    })
    .await
}

#[derive(Deserialize)]
pub struct AlertQuery {
    #[serde(default)]
    pub since_seq: u64,
}

async fn get_alerts(State(app): State<AppState>, q: Result<Query<AlertQuery>, QueryRejection>) -> ApiResult<Json<serde_json::Value>> {
    let Query(q) = q?;
    let alerts: Vec<AlertRecord> = app.engine.alerts_since(q.since_seq);
    Ok(Json(json!({ "alerts": alerts })))
}

async fn ack_alert(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<AlertRecord>> {
    blocking(move || Ok(Json(app.engine.acknowledge_alert(&id, app.clock.now(), &app.log)?))).await
}

async fn get_graph(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let patient = parse_patient(&id)?;
    let g = app
        .engine
        .patient_graph(&patient)
        .ok_or_else(|| ApiError::from(EngineError::UnknownPatient(patient.to_string())))?;
    Ok(([(header::CONTENT_TYPE, "text/tab-separated-values; charset=utf-8")], g.to_tsv()).into_response())
}

async fn get_explanations(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let turns: Vec<TurnExplanation> = app.engine.explanations(&id)?;
    Ok(Json(json!({ "session_id": id, "explanations": turns })))
}

async fn get_policy(State(app): State<AppState>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], app.engine.policy().to_json()).into_response()
}

async fn health(State(app): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "uptime_s": app.started.elapsed().as_secs() }))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

async fn require_token(State(app): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.config.bearer_token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|v| v == token);
        if !ok && req.uri().path() != "/v1/health" {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/notes", post(post_note))
        .route("/v1/sessions", post(post_session))
        .route("/v1/sessions/{id}/messages", post(post_message))
        .route("/v1/sessions/{id}/feedback", post(post_feedback))
        .route("/v1/sessions/{id}/explanations", get(get_explanations))
        .route("/v1/alerts", get(get_alerts))
        .route("/v1/alerts/{id}/ack", post(ack_alert))
        .route("/v1/patients/{id}/graph", get(get_graph))
        .route("/v1/policy", get(get_policy))
        .fallback(not_found)
        .layer(middleware::from_fn_with_state(app.clone(), require_token))
        .with_state(app)
}

/// Serves until `shutdown` resolves, then writes a policy snapshot.
pub async fn serve(
    app: AppState,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    dispatch_alerts(&app, app.undelivered.clone());
    axum::serve(listener, router(app.clone())).with_graceful_shutdown(shutdown).await?;
    app.snapshot_policy()
}
