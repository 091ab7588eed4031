//! HTTP front end for the exposure-therapy engine.
//!
//! Chat endpoints answer with JSON by default. With `Accept:
//! text/event-stream` they stream `delta` events (`{"text": ...}`) followed
//! by one terminal `done` event carrying the full turn, or an `error` event.

use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use vchatter_core::agents::plan::PlanEdits;
use vchatter_core::agents::template::TemplateStore;
use vchatter_core::instruments::{Instrument, ScaleResponses};
use vchatter_core::presence::{synthesizer_from_lookup, SentimentClassifier};
use vchatter_core::protocol::{transition_table, ProtocolConfig, TaskOutcome};
use vchatter_core::provider::ProviderConfig;
use vchatter_core::service::{ApiError, Engine, EngineConfig};
use vchatter_core::store::{ScaleTiming, Store};

pub const ENV_TEMPLATE_DIR: &str = "VCHATTER_TEMPLATE_DIR";
pub const ENV_ADDR: &str = "VCHATTER_ADDR";

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
}

impl AppState {
    pub fn new(engine: Engine) -> Self {
        Self { engine: Arc::new(engine) }
    }
}

/// Builds the engine from environment variables. `data_dir` overrides the
/// store location.
pub fn engine_from_env(data_dir: Option<PathBuf>, protocol: ProtocolConfig) -> Result<Engine, String> {
    let get = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
    let store = match data_dir {
        Some(d) => Store::open(d),
        None => Store::from_env(),
    }
    .map_err(|e| e.to_string())?;
    let pcfg = ProviderConfig::from_lookup(get).map_err(|e| e.to_string())?;
    let provider = pcfg.build().map_err(|e| e.to_string())?;
    let mut config = EngineConfig { protocol, ..Default::default() };
    let sentiment = match &pcfg {
        ProviderConfig::Http { model, .. } => {
            config.params.model_id = model.clone();
            SentimentClassifier::with_provider(provider.clone())
        }
        ProviderConfig::Mock { .. } => SentimentClassifier::lexicon_only(),
    };
    let templates = match get(ENV_TEMPLATE_DIR) {
        Some(dir) => TemplateStore::from_dir(dir).map_err(|e| e.to_string())?,
        None => TemplateStore::bundled(),
    };
    Ok(Engine::new(Arc::new(store), provider)
        .with_config(config)
        .with_sentiment(sentiment)
        .with_synthesizer(synthesizer_from_lookup(get))
        .with_templates(Arc::new(templates)))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/therapist/messages", post(therapist_message))
        .route("/sessions/{id}/plan/confirm", post(confirm_plan))
        .route("/sessions/{id}/scenario/{slot}/messages", post(scenario_message))
        .route("/sessions/{id}/task", post(complete_task))
        .route("/sessions/{id}/day/close", post(close_day))
        .route("/sessions/{id}/scales/{instrument}/{timing}", post(submit_scale))
        .route("/outcomes", get(outcomes))
        .route("/protocol/transitions", get(transitions))
        .with_state(state)
}

// ---------------------------------------------------------------------------
// Plumbing

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a ApiError,
}

pub struct Failure(pub ApiError);

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        Self(e)
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(ErrorBody { error: &self.0 })).into_response()
    }
}

fn parse<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::validation(format!("invalid request body: {e}")))
}

fn parse_required<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::validation(format!("invalid request body: {e}")))
}

fn wants_stream(headers: &HeaderMap) -> bool {
    headers
        .get_all(header::ACCEPT)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .any(|v| v.contains("text/event-stream"))
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new("storage_error", format!("worker failed: {e}"))
}

/// Runs a blocking engine call off the async runtime.
async fn blocking<T, F>(state: AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&state.engine)).await.map_err(internal)?
}

#[derive(Serialize)]
struct Delta<'a> {
    text: &'a str,
}

/// Runs a chat turn, either as one JSON response or as a server-sent event
/// stream.
async fn turn<T, F>(state: AppState, headers: &HeaderMap, f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce(&Engine, &mut dyn FnMut(&str)) -> Result<T, ApiError> + Send + 'static,
{
    if !wants_stream(headers) {
        return match blocking(state, move |e| f(e, &mut |_| {})).await {
            Ok(v) => Json(v).into_response(),
            Err(e) => Failure(e).into_response(),
        };
    }
    let (tx, rx) = mpsc::channel::<Event>(64);
    tokio::task::spawn_blocking(move || {
        let deltas = tx.clone();
        let result = f(&state.engine, &mut |d| {
            if let Ok(ev) = Event::default().event("delta").json_data(Delta { text: d }) {
                let _ = deltas.blocking_send(ev);
            }
        });
        let last = match result {
            Ok(v) => Event::default().event("done").json_data(&v),
            Err(e) => Event::default().event("error").json_data(ErrorBody { error: &e }),
        };
        match last {
            Ok(ev) => {
                let _ = tx.blocking_send(ev);
            }
            Err(e) => tracing::error!(error = %e, "cannot encode terminal event"),
        }
    });
    let stream = futures::stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|ev| (Ok::<_, Infallible>(ev), rx)) });
    Sse::new(stream).into_response()
}

// ---------------------------------------------------------------------------
// Handlers

#[derive(Debug, Default, Deserialize)]
struct CreateSession {
    #[serde(default)]
    pseudonym: String,
    #[serde(default)]
    opt_in: bool,
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<Response, Failure> {
    let req: CreateSession = parse(&body)?;
    let s = blocking(state, move |e| e.create_session(&req.pseudonym, req.opt_in)).await?;
    Ok((StatusCode::CREATED, Json(s)).into_response())
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, Failure> {
    Ok(Json(blocking(state, move |e| e.get_session(&id)).await?).into_response())
}

#[derive(Debug, Deserialize)]
struct TherapistMessage {
    text: String,
    #[serde(default)]
    finish: bool,
}

async fn therapist_message(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let req: TherapistMessage = match parse_required(&body) {
        Ok(r) => r,
        Err(e) => return Failure(e).into_response(),
    };
    turn(state, &headers, move |e, sink| e.post_therapist_message(&id, &req.text, req.finish, sink)).await
}

async fn confirm_plan(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, Failure> {
    let edits: PlanEdits = parse(&body)?;
    Ok(Json(blocking(state, move |e| e.confirm_plan(&id, &edits)).await?).into_response())
}

#[derive(Debug, Deserialize)]
struct ScenarioMessage {
    text: String,
    #[serde(default)]
    help: bool,
}

async fn scenario_message(
    State(state): State<AppState>,
    Path((id, slot)): Path<(String, usize)>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let req: ScenarioMessage = match parse_required(&body) {
        Ok(r) => r,
        Err(e) => return Failure(e).into_response(),
    };
    turn(state, &headers, move |e, sink| e.post_scenario_message(&id, slot, &req.text, req.help, sink)).await
}

#[derive(Debug, Deserialize)]
struct TaskReport {
    outcome: TaskOutcome,
    #[serde(default)]
    summary: String,
}

async fn complete_task(State(state): State<AppState>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let req: TaskReport = match parse_required(&body) {
        Ok(r) => r,
        Err(e) => return Failure(e).into_response(),
    };
    turn(state, &headers, move |e, sink| e.complete_task(&id, req.outcome, &req.summary, sink)).await
}

async fn close_day(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, Failure> {
    Ok(Json(blocking(state, move |e| e.close_day(&id)).await?).into_response())
}

async fn submit_scale(
    State(state): State<AppState>,
    Path((id, instrument, timing)): Path<(String, String, String)>,
    body: Bytes,
) -> Result<Response, Failure> {
    let instrument = Instrument::from_id(&instrument)
        .ok_or_else(|| ApiError::validation(format!("unknown instrument {instrument:?}")))?;
    let timing = ScaleTiming::parse(&timing).ok_or_else(|| ApiError::validation(format!("unknown timing {timing:?}")))?;
    let responses: ScaleResponses = parse_required(&body)?;
    Ok(Json(blocking(state, move |e| e.submit_scale(&id, instrument, timing, &responses)).await?).into_response())
}

#[derive(Debug, Default, Deserialize)]
struct OutcomeQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn outcomes(State(state): State<AppState>, Query(q): Query<OutcomeQuery>) -> Result<Response, Failure> {
    let report = blocking(state, |e| e.get_outcomes()).await?;
    Ok(match q.format.as_deref() {
        Some("text") => ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], report.render_table()).into_response(),
        None | Some("json") => Json(report).into_response(),
        Some(other) => return Err(ApiError::validation(format!("unknown format {other:?}")).into()),
    })
}

async fn transitions() -> Response {
    Json(transition_table()).into_response()
}
