//! HTTP/JSON adapter over [`Engine`]. Session events stream as SSE.

use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{Multipart, Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use datafactory_core::ingest::RawTable;
use datafactory_core::kgbuild::KgConfig;
use futures::stream::Stream;
use serde::Deserialize;
use serde_json::json;

use crate::service::{AskRequest, Engine, ServiceError};

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/tables", post(upload_table).get(list_tables))
        .route("/kg/build", post(build_kg))
        .route("/ask", post(ask))
        .route("/sessions/:id/events", get(session_events))
        .route("/graph/schema", get(graph_schema))
        .route("/graph/query", post(graph_query))
        .route("/graph/subgraph", get(subgraph))
        .with_state(engine)
}

pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1}))).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::EmptyQuestion | ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::NoData | ServiceError::NotPaused(_) | ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::UnknownSession(_) | ServiceError::UnknownTable(_) => StatusCode::NOT_FOUND,
            ServiceError::Query(_) => StatusCode::BAD_REQUEST,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self(status, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

fn table_stem(file_name: &str) -> String {
    let base = file_name.rsplit(['/', '\\']).next().unwrap_or(file_name);
    base.rsplit_once('.').map_or(base, |(stem, _)| stem).to_string()
}

async fn upload_table(State(engine): State<Arc<Engine>>, mut form: Multipart) -> ApiResult<Response> {
    let mut file: Option<(String, Vec<u8>)> = None;
    let mut name: Option<String> = None;
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(e.to_string()))?
    {
        match field.name() {
            Some("file") => {
                let fname = field.file_name().unwrap_or("upload.csv").to_string();
                let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
                file = Some((fname, bytes.to_vec()));
            }
            Some("name") => {
                name = Some(field.text().await.map_err(|e| ApiError::bad_request(e.to_string()))?);
            }
            _ => {}
        }
    }
    let (fname, bytes) =
        file.ok_or_else(|| ApiError(StatusCode::UNPROCESSABLE_ENTITY, "missing `file` field".into()))?;
    let delim = if fname.to_ascii_lowercase().ends_with(".tsv") {
        b'\t'
    } else {
        b','
    };
    let table = name
        .filter(|n| !n.trim().is_empty())
        .unwrap_or_else(|| table_stem(&fname));
    let report = blocking(move || {
        let raw = RawTable::from_delimited(&table, &bytes, delim).map_err(|e| ServiceError::Invalid(e.to_string()))?;
        engine.ingest(&raw)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(report)).into_response())
}

async fn list_tables(State(engine): State<Arc<Engine>>) -> ApiResult<Response> {
    let tables = blocking(move || engine.tables()).await?;
    Ok(Json(tables).into_response())
}

#[derive(Debug, Deserialize)]
struct BuildRequest {
    table: String,
    #[serde(default)]
    config: Option<serde_json::Value>,
    #[serde(default)]
    suggest: bool,
}

async fn build_kg(State(engine): State<Arc<Engine>>, Json(req): Json<BuildRequest>) -> ApiResult<Response> {
    let config = req
        .config
        .map(serde_json::from_value::<KgConfig>)
        .transpose()
        .map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid config: {e}")))?;
    let report = blocking(move || engine.build_kg(&req.table, config, req.suggest)).await?;
    Ok(Json(report).into_response())
}

async fn ask(State(engine): State<Arc<Engine>>, Json(req): Json<AskRequest>) -> ApiResult<Response> {
    let (session, job) = engine.start_ask(req)?;
    tokio::task::spawn_blocking(job);
    Ok((StatusCode::ACCEPTED, Json(json!({"session_id": session.id}))).into_response())
}

async fn session_events(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let session = engine.session(&id).ok_or(ServiceError::UnknownSession(id))?;
    let stream = futures::stream::unfold((session, 0usize, false), |(session, seen, ended)| async move {
        if ended {
            return None;
        }
        session.wait_past(seen).await;
        let (events, done) = session.events_from(seen);
        let next = seen + events.len();
        let items: Vec<Result<Event, Infallible>> = events
            .into_iter()
            .map(|e| {
                let kind = serde_json::to_value(e.kind)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string));
                Ok(Event::default()
                    .event(kind.unwrap_or_default())
                    .id(e.seq.to_string())
                    .json_data(&e)
                    .unwrap_or_default())
            })
            .collect();
        Some((futures::stream::iter(items), (session, next, done)))
    });
    use futures::StreamExt;
    Ok(Sse::new(stream.flatten()).keep_alive(KeepAlive::default()))
}

async fn graph_schema(State(engine): State<Arc<Engine>>) -> ApiResult<Response> {
    let schema = blocking(move || Ok(engine.graph_schema())).await?;
    Ok(Json(json!({"schema": schema, "text": schema.render()})).into_response())
}

#[derive(Debug, Deserialize)]
struct GraphQueryRequest {
    cypher: String,
}

async fn graph_query(State(engine): State<Arc<Engine>>, Json(req): Json<GraphQueryRequest>) -> ApiResult<Response> {
    let out = blocking(move || engine.query_graph(&req.cypher)).await?;
    Ok(Json(json!({"table": out.table, "bound_ids": out.bound_ids})).into_response())
}

#[derive(Debug, Deserialize)]
struct SubgraphParams {
    ids: String,
    #[serde(default = "default_radius")]
    radius: usize,
}

fn default_radius() -> usize {
    1
}

async fn subgraph(State(engine): State<Arc<Engine>>, Query(p): Query<SubgraphParams>) -> ApiResult<Response> {
    let ids: Vec<String> = p
        .ids
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    let view = blocking(move || Ok(engine.subgraph(&ids, p.radius))).await?;
    Ok(Json(view).into_response())
}
