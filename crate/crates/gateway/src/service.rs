//! Session-level service shared by the CLI and the HTTP adapter. It adds
//! sessions, event sequencing and write serialization on top of the core
//! operations and nothing else.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use datafactory_core::agents::{run_team, Team, TeamOptions};
use datafactory_core::graphquery::{GraphSchema, QueryOutput, SubgraphView};
use datafactory_core::ingest::{IngestReport, RawTable, TableSchema};
use datafactory_core::kgbuild::KgConfig;
use datafactory_core::leader::{
    resume_session, run_session_with, SessionEvent, SessionFinal, SessionOptions, SessionTrace,
};
use datafactory_core::llm::{ChatRequest, Completion, LlmError, LlmPort, Usage};
use datafactory_core::workspace::{KgBuildReport, Workspace, WorkspaceError};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Notify;

pub const DEFAULT_IDLE_TTL: Duration = Duration::from_secs(30 * 60);

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("no data loaded; ingest a table first")]
    NoData,
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{0}` is not waiting for a clarification")]
    NotPaused(String),
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Query(String),
    #[error("{0}")]
    Internal(String),
}

impl From<WorkspaceError> for ServiceError {
    fn from(e: WorkspaceError) -> Self {
        use datafactory_core::ingest::IngestError;
        use datafactory_core::kgbuild::KgError;
        use datafactory_core::relstore::StoreError;
        match &e {
            WorkspaceError::Ingest(IngestError::NameCollision(_))
            | WorkspaceError::Store(StoreError::NameCollision(_)) => ServiceError::Conflict(e.to_string()),
            WorkspaceError::Ingest(IngestError::Format { .. } | IngestError::EmptyTable) => {
                ServiceError::Invalid(e.to_string())
            }
            WorkspaceError::Store(StoreError::UnknownRelation(_)) => ServiceError::UnknownTable(e.to_string()),
            WorkspaceError::Graph(
                KgError::ConfigInvalid(_)
                | KgError::InvalidSuggestion(_)
                | KgError::UnparseableSuggestion(_)
                | KgError::Format(_)
                | KgError::MissingIdValue { .. },
            ) => ServiceError::Invalid(e.to_string()),
            WorkspaceError::Query(_) => ServiceError::Query(e.to_string()),
            _ => ServiceError::Internal(e.to_string()),
        }
    }
}

/// Stand-in port used when no provider is configured; every call fails
/// with the configuration error.
#[derive(Debug)]
pub struct UnavailableLlm(pub String);

impl LlmPort for UnavailableLlm {
    fn complete(&self, _req: &ChatRequest) -> Result<Completion, LlmError> {
        Err(LlmError::NotConfigured(self.0.clone()))
    }

    fn total_usage(&self) -> Usage {
        Usage::default()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Database,
    KnowledgeGraph,
    #[default]
    Leader,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskRequest {
    pub question: String,
    #[serde(default)]
    pub mode: Mode,
    /// Continues a session paused for clarification; the question is the
    /// user's reply.
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Thought,
    Action,
    Observation,
    Final,
    Error,
    Chart,
    Subgraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub session_id: String,
    pub seq: u64,
    pub kind: EventKind,
    pub payload: serde_json::Value,
}

#[derive(Debug, Default)]
struct SessionState {
    events: Vec<TraceEvent>,
    running: bool,
    paused: Option<SessionTrace>,
    trace: Option<SessionTrace>,
    last_access: Option<Instant>,
}

/// Ordered, append-only event log of one session plus a wakeup for
/// subscribers.
#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub mode: Mode,
    state: Mutex<SessionState>,
    notify: Notify,
}

impl Session {
    fn new(id: String, mode: Mode) -> Self {
        Self {
            id,
            mode,
            state: Mutex::new(SessionState {
                last_access: Some(Instant::now()),
                ..SessionState::default()
            }),
            notify: Notify::new(),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, SessionState> {
        self.state.lock().expect("session state poisoned")
    }

    fn push(&self, kind: EventKind, payload: serde_json::Value) {
        {
            let mut st = self.lock();
            let seq = st.events.len() as u64 + 1;
            st.events.push(TraceEvent {
                session_id: self.id.clone(),
                seq,
                kind,
                payload,
            });
        }
        self.notify.notify_waiters();
    }

    fn finish(&self, trace: Option<SessionTrace>) {
        {
            let mut st = self.lock();
            st.running = false;
            st.paused = trace
                .as_ref()
                .filter(|t| matches!(t.final_, SessionFinal::Clarification { .. }))
                .cloned();
            st.trace = trace;
            st.last_access = Some(Instant::now());
        }
        self.notify.notify_waiters();
    }

    /// Events from index `from` on, and whether the run has ended.
    pub fn events_from(&self, from: usize) -> (Vec<TraceEvent>, bool) {
        let mut st = self.lock();
        st.last_access = Some(Instant::now());
        (
            st.events.get(from..).map(<[_]>::to_vec).unwrap_or_default(),
            !st.running,
        )
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.events_from(0).0
    }

    /// The leader trace of the latest run, if it completed.
    pub fn trace(&self) -> Option<SessionTrace> {
        self.lock().trace.clone()
    }

    pub fn is_paused(&self) -> bool {
        self.lock().paused.is_some()
    }

    /// Waits until an event past `seen` exists or the run ends.
    pub async fn wait_past(&self, seen: usize) {
        loop {
            let notified = self.notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            let (new, done) = self.events_from(seen);
            if !new.is_empty() || done {
                return;
            }
            notified.await;
        }
    }
}

fn emit(session: &Session, event: SessionEvent) {
    use serde_json::json;
    let (kind, payload) = match event {
        SessionEvent::Thought { step, text } => (EventKind::Thought, json!({"step": step, "text": text})),
        SessionEvent::Action { step, action, input } => (
            EventKind::Action,
            json!({"step": step, "action": action, "input": input}),
        ),
        SessionEvent::Observation { step, text } => (EventKind::Observation, json!({"step": step, "text": text})),
        SessionEvent::Error { step, message } => (EventKind::Error, json!({"step": step, "message": message})),
        SessionEvent::Chart { step, spec } => (EventKind::Chart, json!({"step": step, "spec": spec})),
        SessionEvent::Subgraph { step, view } => (EventKind::Subgraph, json!({"step": step, "view": view})),
        SessionEvent::Final { answer } => (EventKind::Final, json!({"answer": answer})),
    };
    session.push(kind, payload);
}

/// Result of a synchronous ask.
#[derive(Debug, Clone, PartialEq)]
pub struct AskOutcome {
    pub session_id: String,
    pub events: Vec<TraceEvent>,
    pub trace: Option<SessionTrace>,
    pub final_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableInfo {
    pub name: String,
    pub schema: TableSchema,
}

pub struct Engine {
    ws: Workspace,
    llm: Arc<dyn LlmPort>,
    write_lock: Mutex<()>,
    sessions: Mutex<HashMap<String, Arc<Session>>>,
    idle_ttl: Duration,
}

impl Engine {
    pub fn new(ws: Workspace, llm: Arc<dyn LlmPort>) -> Self {
        Self {
            ws,
            llm,
            write_lock: Mutex::new(()),
            sessions: Mutex::new(HashMap::new()),
            idle_ttl: DEFAULT_IDLE_TTL,
        }
    }

    pub fn with_idle_ttl(mut self, ttl: Duration) -> Self {
        self.idle_ttl = ttl;
        self
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    fn writing(&self) -> std::sync::MutexGuard<'_, ()> {
        self.write_lock.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn ingest(&self, raw: &RawTable) -> Result<IngestReport, ServiceError> {
        let _w = self.writing();
        Ok(self.ws.ingest(raw, None)?)
    }

    pub fn tables(&self) -> Result<Vec<TableInfo>, ServiceError> {
        let store = &self.ws.store;
        let names = store.table_names().map_err(|e| ServiceError::Internal(e.to_string()))?;
        names
            .into_iter()
            .map(|name| {
                let schema = store
                    .introspect(&name)
                    .map_err(|e| ServiceError::Internal(e.to_string()))?;
                Ok(TableInfo { name, schema })
            })
            .collect()
    }

    /// Builds the graph for a table. `suggest` asks the LLM for the
    /// configuration when none is supplied.
    pub fn build_kg(
        &self,
        table: &str,
        config: Option<KgConfig>,
        suggest: bool,
    ) -> Result<KgBuildReport, ServiceError> {
        let _w = self.writing();
        if !self
            .ws
            .store
            .has_table(table)
            .map_err(|e| ServiceError::Internal(e.to_string()))?
        {
            return Err(ServiceError::UnknownTable(table.to_string()));
        }
        let llm: Option<&dyn LlmPort> = if suggest { Some(self.llm.as_ref()) } else { None };
        Ok(self.ws.build_kg(table, config, llm)?)
    }

    pub fn graph_schema(&self) -> GraphSchema {
        self.ws.graph_schema()
    }

    pub fn query_graph(&self, cypher: &str) -> Result<QueryOutput, ServiceError> {
        Ok(self.ws.query_graph(cypher)?)
    }

    pub fn subgraph(&self, ids: &[String], radius: usize) -> SubgraphView {
        self.ws.subgraph(ids, radius)
    }

    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.lock().expect("sessions poisoned").get(id).cloned()
    }

    /// Drops finished sessions idle for longer than the TTL.
    pub fn evict_idle(&self) -> usize {
        let ttl = self.idle_ttl;
        let mut sessions = self.sessions.lock().expect("sessions poisoned");
        let before = sessions.len();
        sessions.retain(|_, s| {
            let st = s.lock();
            st.running || st.last_access.is_none_or(|t| t.elapsed() <= ttl)
        });
        before - sessions.len()
    }

    /// Validates the request and registers the session. The returned job
    /// runs the session to completion; call it on a blocking thread.
    pub fn start_ask(
        self: &Arc<Self>,
        req: AskRequest,
    ) -> Result<(Arc<Session>, impl FnOnce() + Send + 'static), ServiceError> {
        self.evict_idle();
        if req.question.trim().is_empty() {
            return Err(ServiceError::EmptyQuestion);
        }
        if !self.ws.has_data().map_err(|e| ServiceError::Internal(e.to_string()))? {
            return Err(ServiceError::NoData);
        }
        let (session, resume) = match &req.session_id {
            Some(id) => {
                let s = self
                    .session(id)
                    .ok_or_else(|| ServiceError::UnknownSession(id.clone()))?;
                let mut st = s.lock();
                let paused = st.paused.take().ok_or_else(|| ServiceError::NotPaused(id.clone()))?;
                st.running = true;
                drop(st);
                (s, Some(paused))
            }
            None => {
                let s = Arc::new(Session::new(uuid::Uuid::new_v4().to_string(), req.mode));
                s.lock().running = true;
                self.sessions
                    .lock()
                    .expect("sessions poisoned")
                    .insert(s.id.clone(), s.clone());
                (s, None)
            }
        };
        let engine = Arc::clone(self);
        let job_session = Arc::clone(&session);
        let job = move || {
            let trace = engine.run(&job_session, req, resume);
            job_session.finish(trace);
        };
        Ok((session, job))
    }

    /// Runs an ask on the calling thread and returns its events.
    pub fn ask_blocking(self: &Arc<Self>, req: AskRequest) -> Result<AskOutcome, ServiceError> {
        let (session, job) = self.start_ask(req)?;
        job();
        let events = session.events();
        let final_text = events.iter().rev().find(|e| e.kind == EventKind::Final).and_then(|e| {
            e.payload
                .pointer("/answer/text")
                .or_else(|| e.payload.pointer("/answer/summary"))
                .or_else(|| e.payload.pointer("/answer/question"))
                .and_then(|v| v.as_str())
                .map(str::to_string)
        });
        Ok(AskOutcome {
            session_id: session.id.clone(),
            events,
            trace: session.trace(),
            final_text,
        })
    }

    fn run(&self, session: &Session, req: AskRequest, resume: Option<SessionTrace>) -> Option<SessionTrace> {
        let mode = if resume.is_some() { Mode::Leader } else { req.mode };
        match mode {
            Mode::Database | Mode::KnowledgeGraph => {
                let team = if mode == Mode::Database {
                    Team::DatabaseTeam
                } else {
                    Team::KnowledgeGraphTeam
                };
                self.run_team_mode(session, team, &req.question);
                None
            }
            Mode::Leader => {
                let mut opts = SessionOptions::from_config(&self.ws.config);
                opts.team = TeamOptions {
                    chart: true,
                    subgraph: true,
                };
                let mut on_event = |e: SessionEvent| emit(session, e);
                let result = match resume {
                    Some(paused) => {
                        resume_session(paused, &req.question, &opts, &self.ws, self.llm.as_ref(), &mut on_event)
                    }
                    None => run_session_with(&req.question, &opts, &self.ws, self.llm.as_ref(), &mut on_event),
                };
                match result {
                    Ok(trace) => Some(trace),
                    Err(e) => {
                        session.push(EventKind::Error, serde_json::json!({"message": e.to_string()}));
                        None
                    }
                }
            }
        }
    }

    fn run_team_mode(&self, session: &Session, team: Team, question: &str) {
        use serde_json::json;
        session.push(EventKind::Action, json!({"step": 1, "action": team, "input": question}));
        let report = run_team(
            team,
            question,
            &self.ws,
            self.llm.as_ref(),
            TeamOptions {
                chart: true,
                subgraph: true,
            },
        );
        if let Some(spec) = &report.chart {
            session.push(EventKind::Chart, json!({"step": 1, "spec": spec}));
        }
        if let Some(view) = &report.subgraph {
            session.push(EventKind::Subgraph, json!({"step": 1, "view": view}));
        }
        let digest_rows = self.ws.config.agents.digest_rows;
        session.push(
            EventKind::Observation,
            json!({"step": 1, "text": report.observation(digest_rows)}),
        );
        let text = report
            .analysis
            .clone()
            .or_else(|| report.error.as_ref().map(|e| format!("ERROR: {e}")))
            .unwrap_or_default();
        session.push(
            EventKind::Final,
            json!({
                "answer": {"kind": "answer", "text": text},
                "query": report.query,
                "result": report.result,
                "error": report.error,
                "chart": report.chart,
                "subgraph": report.subgraph,
            }),
        );
    }
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("idle_ttl", &self.idle_ttl)
            .finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use datafactory_core::config::EngineConfig;
    use datafactory_core::llm::ReplayLlm;

    fn engine(ttl: Duration) -> Arc<Engine> {
        let ws = Workspace::in_memory(EngineConfig::default()).unwrap();
        let raw = RawTable::from_delimited("t", b"a,b\nx,1\n", b',').unwrap();
        ws.ingest(&raw, None).unwrap();
        let llm = ReplayLlm::scripted(["```sql\nSELECT a FROM t\n```", "x."]);
        Arc::new(Engine::new(ws, Arc::new(llm)).with_idle_ttl(ttl))
    }

    fn ask(e: &Arc<Engine>) -> AskOutcome {
        e.ask_blocking(AskRequest {
            question: "a in t".into(),
            mode: Mode::Database,
            session_id: None,
        })
        .unwrap()
    }

    #[test]
    fn idle_sessions_are_evicted() {
        let e = engine(Duration::ZERO);
        let id = ask(&e).session_id;
        std::thread::sleep(Duration::from_millis(5));
        assert_eq!(e.evict_idle(), 1);
        assert!(e.session(&id).is_none());
    }

    #[test]
    fn fresh_sessions_survive() {
        let e = engine(DEFAULT_IDLE_TTL);
        let out = ask(&e);
        assert_eq!(out.final_text.as_deref(), Some("x."));
        assert_eq!(e.evict_idle(), 0);
        assert!(e.session(&out.session_id).is_some());
    }
}
