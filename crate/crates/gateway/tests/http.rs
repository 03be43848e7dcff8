use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use datafactory::http::router;
use datafactory::service::{Engine, TraceEvent};
use datafactory_core::config::EngineConfig;
use datafactory_core::llm::ReplayLlm;
use datafactory_core::workspace::{Clock, Workspace};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const CITIES: &str = "city,population,region\nOslo,700000,east\nBergen,285000,west\nStavanger,145000,west\n";

fn app(script: &[&str]) -> (Router, Arc<Engine>) {
    let ws = Workspace::in_memory(EngineConfig::default())
        .unwrap()
        .with_clock(Clock::Fixed("2024-01-01T00:00:00Z".into()));
    let llm = ReplayLlm::scripted(script.iter().map(|s| s.to_string()));
    let engine = Arc::new(Engine::new(ws, Arc::new(llm)));
    (router(engine.clone()), engine)
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

async fn json_req(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut b = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            b = b.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let (status, bytes) = send(app, b.body(body).unwrap()).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn upload(app: &Router, file_name: &str, content: &str, name: Option<&str>) -> (StatusCode, Value) {
    let boundary = "XBOUNDARYX";
    let mut body = format!(
        "--{boundary}\r\nContent-Disposition: form-data; name=\"file\"; filename=\"{file_name}\"\r\nContent-Type: text/csv\r\n\r\n{content}\r\n"
    );
    if let Some(n) = name {
        body += &format!("--{boundary}\r\nContent-Disposition: form-data; name=\"name\"\r\n\r\n{n}\r\n");
    }
    body += &format!("--{boundary}--\r\n");
    let req = Request::post("/tables")
        .header(
            header::CONTENT_TYPE,
            format!("multipart/form-data; boundary={boundary}"),
        )
        .body(Body::from(body))
        .unwrap();
    let (status, bytes) = send(app, req).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn events(app: &Router, session_id: &str) -> Vec<TraceEvent> {
    let req = Request::get(format!("/sessions/{session_id}/events"))
        .body(Body::empty())
        .unwrap();
    let (status, bytes) = send(app, req).await;
    assert_eq!(status, StatusCode::OK);
    String::from_utf8(bytes)
        .unwrap()
        .lines()
        .filter_map(|l| l.strip_prefix("data: "))
        .map(|d| serde_json::from_str(d).unwrap())
        .collect()
}

fn kinds(ev: &[TraceEvent]) -> Vec<String> {
    ev.iter()
        .map(|e| serde_json::to_value(e.kind).unwrap().as_str().unwrap().to_string())
        .collect()
}

fn assert_sequenced(ev: &[TraceEvent], id: &str) {
    for (i, e) in ev.iter().enumerate() {
        assert_eq!(e.seq, i as u64 + 1);
        assert_eq!(e.session_id, id);
    }
}

#[tokio::test]
async fn ask_validation_codes() {
    let (app, _) = app(&[]);
    let (s, body) = json_req(&app, "POST", "/ask", Some(json!({"question": "  "}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].is_string());
    let (s, _) = json_req(&app, "POST", "/ask", Some(json!({"question": "how many cities?"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    upload(&app, "cities.csv", CITIES, None).await;
    let (s, _) = json_req(
        &app,
        "POST",
        "/ask",
        Some(json!({"question": "x", "session_id": "nope"})),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json_req(&app, "POST", "/ask", Some(json!({"question": "x", "mode": "sideways"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn tables_upload_list_and_collision() {
    let (app, _) = app(&[]);
    let (s, report) = upload(&app, "cities.csv", CITIES, None).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(report["table"], "cities");
    let (s, report) = upload(&app, "x.tsv", "a\tb\n1\t2\n", Some("pairs")).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(report["table"], "pairs");
    let (s, list) = json_req(&app, "GET", "/tables", None).await;
    assert_eq!(s, StatusCode::OK);
    let names: Vec<&str> = list
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["cities", "pairs"]);
    let (s, _) = upload(&app, "cities.csv", CITIES, None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = upload(&app, "bad.csv", "a,b\n1,2,3\n", None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn kg_build_and_graph_endpoints() {
    let (app, _) = app(&[]);
    upload(&app, "cities.csv", CITIES, None).await;
    let (s, _) = json_req(&app, "POST", "/kg/build", Some(json!({"table": "nowhere"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json_req(
        &app,
        "POST",
        "/kg/build",
        Some(json!({"table": "cities", "config": {"entities": 7}})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, report) = json_req(&app, "POST", "/kg/build", Some(json!({"table": "cities"}))).await;
    assert_eq!(s, StatusCode::OK, "{report}");
    assert_eq!(report["config_source"], "default");
    assert!(report["nodes_added"].as_u64().unwrap() >= 3);

    let (s, schema) = json_req(&app, "GET", "/graph/schema", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(schema["text"].as_str().unwrap().contains("Record"));

    let (s, out) = json_req(
        &app,
        "POST",
        "/graph/query",
        Some(json!({"cypher": "MATCH (r:Record) WHERE r.region = 'west' RETURN r.city ORDER BY r.city"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{out}");
    assert_eq!(out["table"]["rows"].as_array().unwrap().len(), 2);
    let ids: Vec<String> = out["bound_ids"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    assert!(!ids.is_empty());

    let (s, err) = json_req(
        &app,
        "POST",
        "/graph/query",
        Some(json!({"cypher": "MATCH (n RETURN n"})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(err["error"].is_string());

    let uri = format!("/graph/subgraph?ids={}&radius=1", ids.join(","));
    let (s, view) = json_req(&app, "GET", &uri, None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(view["nodes"].as_array().unwrap().len() >= ids.len());
}

#[tokio::test]
async fn database_mode_streams_ordered_events() {
    let (app, _) = app(&[
        "```sql\nSELECT city FROM cities ORDER BY population DESC LIMIT 1\n```",
        "Oslo is the largest city.",
    ]);
    upload(&app, "cities.csv", CITIES, None).await;
    let (s, body) = json_req(
        &app,
        "POST",
        "/ask",
        Some(json!({"question": "largest city in cities", "mode": "database"})),
    )
    .await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let id = body["session_id"].as_str().unwrap().to_string();
    let ev = events(&app, &id).await;
    assert_sequenced(&ev, &id);
    assert_eq!(kinds(&ev), ["action", "observation", "final"]);
    let fin = &ev[2].payload;
    assert_eq!(fin["answer"]["text"], "Oslo is the largest city.");
    assert_eq!(fin["result"]["rows"][0][0], "Oslo");
    // A finished session replays the same log.
    assert_eq!(events(&app, &id).await, ev);
}

#[tokio::test]
async fn knowledge_graph_mode_emits_chart_and_subgraph() {
    let (app, _) = app(&[
        "```cypher\nMATCH (r:Record) WHERE r.region = 'west' RETURN r.city, r.population ORDER BY r.city\n```",
        "Bergen and Stavanger are in the west.",
        "```json\n{\"kind\": \"bar\", \"x\": \"r.city\", \"y\": \"r.population\", \"title\": \"West\"}\n```",
    ]);
    upload(&app, "cities.csv", CITIES, None).await;
    json_req(&app, "POST", "/kg/build", Some(json!({"table": "cities"}))).await;
    let (_, body) = json_req(
        &app,
        "POST",
        "/ask",
        Some(json!({"question": "west cities", "mode": "knowledge_graph"})),
    )
    .await;
    let id = body["session_id"].as_str().unwrap().to_string();
    let ev = events(&app, &id).await;
    assert_sequenced(&ev, &id);
    assert_eq!(kinds(&ev), ["action", "chart", "subgraph", "observation", "final"]);
    assert_eq!(ev[1].payload["spec"]["kind"], "bar");
    assert!(ev[4].payload["chart"].is_object());
}

#[tokio::test]
async fn leader_clarification_pauses_and_resumes() {
    let (app, engine) = app(&[
        "Thought: The question is ambiguous.\nAction: clarify_user\nAction Input: Largest by population or by area?",
        "Thought: Population it is.\nAction: database_team\nAction Input: city in cities with the largest population",
        "```sql\nSELECT city FROM cities ORDER BY population DESC LIMIT 1\n```",
        "Oslo.",
        "Thought: Done.\nFinal Answer: Oslo",
    ]);
    upload(&app, "cities.csv", CITIES, None).await;
    let (s, body) = json_req(&app, "POST", "/ask", Some(json!({"question": "largest city?"}))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let id = body["session_id"].as_str().unwrap().to_string();
    let first = events(&app, &id).await;
    assert_eq!(kinds(&first), ["thought", "action", "final"]);
    assert_eq!(first[2].payload["answer"]["kind"], "clarification");
    assert!(engine.session(&id).unwrap().is_paused());

    let (s, _) = json_req(
        &app,
        "POST",
        "/ask",
        Some(json!({"question": "population", "session_id": id})),
    )
    .await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let all = events(&app, &id).await;
    assert_sequenced(&all, &id);
    assert_eq!(&all[..3], &first[..]);
    assert_eq!(
        kinds(&all[3..]),
        ["observation", "thought", "action", "observation", "thought", "final"]
    );
    assert_eq!(all.last().unwrap().payload["answer"]["text"], "Oslo");

    let (s, _) = json_req(
        &app,
        "POST",
        "/ask",
        Some(json!({"question": "again", "session_id": id})),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn leader_llm_failure_ends_with_error_event() {
    let (app, _) = app(&[]);
    upload(&app, "cities.csv", CITIES, None).await;
    let (_, body) = json_req(&app, "POST", "/ask", Some(json!({"question": "largest city?"}))).await;
    let id = body["session_id"].as_str().unwrap().to_string();
    let ev = events(&app, &id).await;
    assert_eq!(kinds(&ev), ["error"]);
    assert!(ev[0].payload["message"].as_str().unwrap().contains("LLM unavailable"));
}

#[tokio::test]
async fn unknown_session_stream_is_404() {
    let (app, _) = app(&[]);
    let (s, _) = send(
        &app,
        Request::get("/sessions/missing/events").body(Body::empty()).unwrap(),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
