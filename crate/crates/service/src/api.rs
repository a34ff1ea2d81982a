use std::convert::Infallible;
use std::sync::Arc;

use aftercast_core::data::{parse_csv, prepare, BaselineKind, DatasetConfig, PredictionFile, PredictionMeta, PredictionSource, WindowSpec};
use aftercast_core::feedback::{inject, parse_grammar, parse_llm, validate_directive, FeedbackDirective};
use aftercast_core::metrics::SplitSpec;
use aftercast_core::optimize::{evaluate_plan, DEFAULT_GUARD_TOLERANCE};
use aftercast_core::OptimizerConfig;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::app::{load_prepared, now_millis, AppState};
use crate::error::{ApiError, ApiResult};
use crate::session::{DataSpec, FeedbackEntry, Session, SessionDoc, SessionState, SourceSpec};

pub fn router(state: AppState) -> Router {
    let limit = state.config().max_upload_mb * 1024 * 1024;
    let api = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/data", post(upload_data))
        .route("/sessions/{id}/optimize", post(optimize))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/feedback", post(feedback))
        .route("/sessions/{id}/finalize", post(finalize))
        .route("/sessions/{id}/report", get(report))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/health", get(health))
        .merge(api)
        .fallback(|| async { ApiError::not_found("route") })
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let Some(token) = state.config().token.as_deref() else {
        return next.run(req).await;
    };
    let bearer = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    // Browsers cannot set headers on event streams, so a query token is accepted too.
    let query = req
        .uri()
        .query()
        .into_iter()
        .flat_map(|q| q.split('&'))
        .find_map(|kv| kv.strip_prefix("access_token="));
    if bearer == Some(token) || query == Some(token) {
        next.run(req).await
    } else {
        ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid token").into_response()
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("invalid request body: {e}")))
}

fn persist(state: &AppState, doc: &SessionDoc) -> ApiResult<()> {
    state.store().save(doc).map_err(|e| ApiError::internal(e.to_string()))
}

fn wrong_state(doc: &SessionDoc, action: &str) -> ApiError {
    ApiError::conflict(format!("cannot {action} while session is {}", doc.state.name()))
        .with_details(json!({ "state": doc.state }))
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let config: OptimizerConfig = if body.iter().all(u8::is_ascii_whitespace) {
        OptimizerConfig::default()
    } else {
        serde_json::from_slice(&body)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", e.to_string()))?
    };
    let doc = state.create(config)?;
    Ok((StatusCode::CREATED, Json(json!({ "id": doc.id, "state": doc.state }))))
}

async fn list_sessions(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    let mut out = Vec::new();
    for id in state.session_ids() {
        let session = state.session(&id)?;
        let doc = session.doc.lock().await;
        out.push(json!({ "id": doc.id, "state": doc.state, "round": doc.round, "created_at": doc.created_at }));
    }
    Ok(Json(json!({ "sessions": out })))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionDoc>> {
    let session = state.session(&id)?;
    let doc = session.doc.lock().await.clone();
    Ok(Json(doc))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UploadedPredictions {
    csv: String,
    meta: PredictionMeta,
}

fn one() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UploadBody {
    csv: String,
    #[serde(alias = "window_size")]
    window: usize,
    #[serde(alias = "prediction_horizon")]
    horizon: usize,
    #[serde(default = "one")]
    stride: usize,
    #[serde(default)]
    split: SplitSpec,
    #[serde(default)]
    normalize: bool,
    baseline: Option<BaselineKind>,
    predictions: Option<UploadedPredictions>,
}

async fn upload_data(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let session = state.session(&id)?;
    let mut doc = session.doc.lock().await;
    if doc.state != SessionState::Created {
        return Err(wrong_state(&doc, "upload data"));
    }
    let upload: UploadBody = parse_body(&body)?;
    let dataset = DatasetConfig {
        windows: WindowSpec::new(upload.window, upload.horizon, upload.stride)?,
        split: upload.split,
        normalize: upload.normalize,
    };
    dataset.split.validate()?;
    let (spec_source, file) = match (upload.baseline, upload.predictions) {
        (Some(_), Some(_)) => return Err(ApiError::invalid("give either baseline or predictions, not both")),
        (kind, None) => (
            SourceSpec::Baseline {
                kind: kind.unwrap_or(BaselineKind::Persistence),
            },
            None,
        ),
        (None, Some(p)) => {
            let file = PredictionFile::from_csv(p.csv.as_bytes(), p.meta.clone())?;
            (SourceSpec::File { meta: p.meta }, Some(file))
        }
    };
    let source = match (&spec_source, &file) {
        (_, Some(f)) => PredictionSource::File(f.clone()),
        (SourceSpec::Baseline { kind }, None) => PredictionSource::Baseline(*kind),
        (SourceSpec::File { .. }, None) => unreachable!("file sources carry a file"),
    };
    let csv = upload.csv;
    let ds = dataset.clone();
    let (summary, csv) = tokio::task::spawn_blocking(move || {
        let series = parse_csv(csv.as_bytes())?;
        let prepared = prepare(&series, &ds, &source)?;
        Ok::<_, aftercast_core::Error>((prepared.summary, csv))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    state
        .store()
        .write_data(&id, csv.as_bytes(), file.as_ref())
        .map_err(|e| ApiError::internal(e.to_string()))?;
    doc.data = Some(DataSpec {
        dataset,
        source: spec_source,
    });
    doc.summary = Some(summary);
    doc.state = SessionState::DataLoaded;
    persist(&state, &doc)?;
    Ok(Json(json!({ "state": doc.state, "summary": summary })))
}

async fn optimize(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<(StatusCode, Json<Value>)> {
    let session = state.session(&id)?;
    let mut doc = session.doc.lock().await;
    if !matches!(doc.state, SessionState::DataLoaded | SessionState::AwaitingFeedback) {
        return Err(wrong_state(&doc, "optimize"));
    }
    let from = state.start_round(&session, &mut doc)?;
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "state": doc.state, "round": doc.round, "from": from })),
    ))
}

#[derive(Deserialize)]
struct EventsQuery {
    from: Option<usize>,
}

async fn events(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let wants_stream = headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("text/event-stream"));
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok())
        .map(|last| last + 1);
    let from = q.from.or(resume).unwrap_or(0);
    if wants_stream {
        Ok(event_stream(session, from).into_response())
    } else {
        let running = session.log.is_running();
        let lines = session.log.since(from);
        let events: Vec<Value> = lines
            .iter()
            .map(|l| serde_json::from_str(l).expect("log lines are JSON"))
            .collect();
        let state = session.doc.lock().await.state;
        Ok(Json(json!({
            "from": from,
            "next": from + events.len(),
            "running": running,
            "state": state,
            "events": events,
        }))
        .into_response())
    }
}

/// Replays the log from `from`, follows it while a round runs, and ends
/// with a `done` event once the round is over.
fn event_stream(
    session: Arc<Session>,
    from: usize,
) -> Sse<impl futures_util::Stream<Item = Result<Event, Infallible>>> {
    let rx = session.log.subscribe();
    let stream = futures_util::stream::unfold(
        (session, rx, from, false),
        |(session, mut rx, next, done)| async move {
            if done {
                return None;
            }
            loop {
                let running = rx.borrow_and_update().running;
                if let Some(line) = session.log.get(next) {
                    let event = Event::default().id(next.to_string()).event("episode").data(&*line);
                    return Some((Ok(event), (session, rx, next + 1, false)));
                }
                if !running {
                    let state = session.doc.lock().await.state;
                    let event = Event::default()
                        .event("done")
                        .data(json!({ "state": state, "next": next }).to_string());
                    return Some((Ok(event), (session, rx, next, true)));
                }
                if rx.changed().await.is_err() {
                    return None;
                }
            }
        },
    );
    Sse::new(stream).keep_alive(KeepAlive::default())
}

#[derive(Clone, Copy, Debug, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
enum FeedbackPath {
    #[default]
    Grammar,
    Llm,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FeedbackBody {
    text: String,
    #[serde(default)]
    path: FeedbackPath,
}

async fn feedback(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let session = state.session(&id)?;
    let mut doc = session.doc.lock().await;
    if doc.state != SessionState::AwaitingFeedback {
        return Err(wrong_state(&doc, "take feedback"));
    }
    let req: FeedbackBody = parse_body(&body)?;
    let result = match req.path {
        FeedbackPath::Grammar => parse_grammar(&req.text),
        FeedbackPath::Llm => {
            let (cfg, transport, text) = (state.config().llm.clone(), state.0.transport.clone(), req.text.clone());
            tokio::task::spawn_blocking(move || parse_llm(&text, &cfg, transport.as_ref()))
                .await
                .map_err(|e| ApiError::internal(e.to_string()))?
        }
    }
    .and_then(|d: FeedbackDirective| validate_directive(&d).map(|()| d));
    let path = match req.path {
        FeedbackPath::Grammar => "grammar",
        FeedbackPath::Llm => "llm",
    };
    let outcome = match &result {
        Ok(d) => json!({ "outcome": "accepted", "directive": d }),
        Err(e) => json!({ "outcome": "rejected", "error": e }),
    };
    let record = json!({
        "ts": now_millis(),
        "session": doc.id,
        "round": doc.round,
        "path": path,
        "text": req.text,
        "result": outcome,
    });
    if let Err(e) = state.store().audit(&record) {
        log::error!("cannot write audit record: {e}");
    }
    let directive = result?;
    doc.config = inject(&directive, &doc.base_config);
    let round = doc.round;
    doc.feedback.push(FeedbackEntry {
        round,
        directive: directive.clone(),
    });
    persist(&state, &doc)?;
    Ok(Json(json!({ "directive": directive, "space": doc.config.space })))
}

async fn finalize(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = state.session(&id)?;
    let mut doc = session.doc.lock().await;
    if doc.state == SessionState::Finalized {
        return Err(ApiError::conflict("session is already finalized")
            .with_details(json!({ "report": doc.final_report, "plan": doc.best.as_ref().map(|b| &b.plan) })));
    }
    if doc.state != SessionState::AwaitingFeedback {
        return Err(wrong_state(&doc, "finalize"));
    }
    let (Some(data), Some(best)) = (doc.data.clone(), doc.best.clone()) else {
        return Err(ApiError::conflict("nothing to finalize"));
    };
    let st = state.clone();
    let id2 = id.clone();
    let report = tokio::task::spawn_blocking(move || {
        let prepared = load_prepared(st.store(), &id2, &data)?;
        // The only place the test split is ever materialized.
        let test = prepared.test.unseal();
        evaluate_plan(&best.plan, &prepared.train, &test, DEFAULT_GUARD_TOLERANCE)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    doc.final_report = Some(report.clone());
    doc.state = SessionState::Finalized;
    persist(&state, &doc)?;
    Ok(Json(serde_json::to_value(report).expect("reports serialize")))
}

async fn report(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = state.session(&id)?;
    let doc = session.doc.lock().await;
    let plan = doc.best.as_ref().map(|b| &b.plan);
    match (&doc.final_report, &doc.interim_report) {
        (Some(r), _) => Ok(Json(json!({ "final": true, "split": "test", "report": r, "plan": plan }))),
        (None, Some(r)) => Ok(Json(json!({ "final": false, "split": "val", "report": r, "plan": plan }))),
        (None, None) => Err(ApiError::not_found("report")),
    }
}
