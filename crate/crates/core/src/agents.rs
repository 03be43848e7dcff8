//! Database and knowledge-graph team agents.
//!
//! Each team turns a task into a validated query, runs it, and has the
//! result explained. Generation retrieves similar past questions from
//! memory and records every successful query back into it.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphquery::{self, EvalLimits, Query, QueryError, SubgraphView};
use crate::llm::{extract_fenced, ChatRequest, LlmError, LlmPort, Message, Metered, Usage};
use crate::memory::{make_record, tokenize, MemoryError, QueryKind, StructSignature};
use crate::relstore::StoreError;
use crate::value::ResultTable;
use crate::workspace::Workspace;

pub mod prompts {
    //! Versioned prompt templates and placeholder substitution.

    /// Replaces `{key}` for each supplied key in one left-to-right pass.
    /// Other braces are left alone, and substituted text is not rescanned.
    pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(template.len());
        let mut rest = template;
        'scan: while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            for (k, v) in vars {
                if after.starts_with(k) && after[k.len()..].starts_with('}') {
                    out.push_str(v);
                    rest = &after[k.len() + 1..];
                    continue 'scan;
                }
            }
            out.push('{');
            rest = after;
        }
        out.push_str(rest);
        out
    }

}

const SQL_PROMPT: &str = include_str!("../assets/prompts/sql_generation.v1.txt");
const CYPHER_PROMPT: &str = include_str!("../assets/prompts/cypher_generation.v1.txt");
const REPAIR_PROMPT: &str = include_str!("../assets/prompts/repair.v1.txt");
const ANALYSIS_PROMPT: &str = include_str!("../assets/prompts/analysis.v1.txt");
const CHART_PROMPT: &str = include_str!("../assets/prompts/chart.v1.txt");

/// Directive added to the analysis prompt when the result has no rows.
pub const EMPTY_RESULT_DIRECTIVE: &str =
    "The query returned no rows, so there is no matching data. Say that no matching data was found and suggest what to check next.";
/// Rows shown to the chart prompt.
const CHART_PREVIEW_ROWS: usize = 10;
/// Fewer rows than this are not worth a chart.
pub const MIN_CHART_ROWS: usize = 2;
const SUBGRAPH_RADIUS: usize = 1;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("generation failed after {attempts} attempt(s): {last_error}")]
    GenerationFailed { attempts: u32, last_error: String },
    #[error("only read-only queries are allowed: {0}")]
    NonSelectRejected(String),
    #[error("LLM unavailable: {0}")]
    LlmUnavailable(#[from] LlmError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shot {
    pub question: String,
    pub query: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    pub question: String,
    pub kind: QueryKind,
    pub schema_text: String,
    pub domain_knowledge: Option<String>,
    pub shots: Vec<Shot>,
    /// Schema elements the question mentions; used for retrieval.
    pub signature: StructSignature,
}

/// A schema name is mentioned when all of its word parts occur in the text.
fn mentions(tokens: &HashSet<String>, name: &str) -> bool {
    let parts = tokenize(name);
    !parts.is_empty() && parts.iter().all(|p| tokens.contains(p))
}

fn sql_schema_names(ws: &Workspace) -> Result<(Vec<String>, Vec<String>), AgentError> {
    let tables = ws.store.table_names()?;
    let mut columns = Vec::new();
    for t in &tables {
        columns.extend(ws.store.introspect(t)?.column_names());
    }
    Ok((tables, columns))
}

/// Tables and columns (or labels and relationship types) named in a
/// natural-language question.
pub fn question_signature(question: &str, kind: QueryKind, ws: &Workspace) -> Result<StructSignature, AgentError> {
    let tokens: HashSet<String> = tokenize(question).into_iter().collect();
    let pick = |names: &[String]| -> BTreeSet<String> {
        names
            .iter()
            .filter(|n| mentions(&tokens, n))
            .map(|n| n.to_lowercase())
            .collect()
    };
    Ok(match kind {
        QueryKind::Sql => {
            let (tables, columns) = sql_schema_names(ws)?;
            StructSignature::Sql {
                tables: pick(&tables),
                columns: pick(&columns),
            }
        }
        QueryKind::Cypher => {
            let s = ws.graph_schema();
            StructSignature::Cypher {
                labels: pick(&s.labels.into_iter().collect::<Vec<_>>()),
                rel_types: pick(&s.rel_types.into_iter().collect::<Vec<_>>()),
            }
        }
    })
}

/// Schema tables and columns whose exact names appear as identifiers in
/// the SQL text.
pub fn sql_signature(sql: &str, ws: &Workspace) -> Result<StructSignature, AgentError> {
    let idents: HashSet<String> = sql
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();
    let (tables, columns) = sql_schema_names(ws)?;
    let pick = |names: Vec<String>| -> BTreeSet<String> {
        names
            .into_iter()
            .map(|n| n.to_lowercase())
            .filter(|n| idents.contains(n))
            .collect()
    };
    Ok(StructSignature::Sql {
        tables: pick(tables),
        columns: pick(columns),
    })
}

pub fn cypher_signature(q: &Query) -> StructSignature {
    let mut labels = BTreeSet::new();
    let mut rel_types = BTreeSet::new();
    for p in &q.paths {
        labels.extend(p.start.label.iter().map(|l| l.to_lowercase()));
        for (e, n) in &p.steps {
            rel_types.extend(e.rel_type.iter().map(|t| t.to_lowercase()));
            labels.extend(n.label.iter().map(|l| l.to_lowercase()));
        }
    }
    StructSignature::Cypher { labels, rel_types }
}

pub fn assemble_context(question: &str, kind: QueryKind, ws: &Workspace) -> Result<PromptContext, AgentError> {
    let schema_text = match kind {
        QueryKind::Sql => {
            let ddl = ws.store.schema_ddl()?;
            if ddl.is_empty() {
                "(no tables)".to_string()
            } else {
                ddl.join("\n")
            }
        }
        QueryKind::Cypher => ws.graph_schema().render(),
    };
    let signature = question_signature(question, kind, ws)?;
    let k = ws.config.retrieval.k;
    let shots = if k == 0 {
        Vec::new()
    } else {
        ws.memory
            .retrieve_similar(ws.embedder.as_ref(), question, kind, k, Some(&signature))
            .into_iter()
            .map(|s| Shot {
                question: s.record.question,
                query: s.record.query_text,
            })
            .collect()
    };
    Ok(PromptContext {
        question: question.to_string(),
        kind,
        schema_text,
        domain_knowledge: ws.config.domain_knowledge.clone(),
        shots,
        signature,
    })
}

fn fence(kind: QueryKind) -> &'static str {
    match kind {
        QueryKind::Sql => "sql",
        QueryKind::Cypher => "cypher",
    }
}

fn render_shots(shots: &[Shot], kind: QueryKind) -> String {
    if shots.is_empty() {
        return "(none)".into();
    }
    shots
        .iter()
        .map(|s| format!("Q: {}\n```{}\n{}\n```", s.question, fence(kind), s.query))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// The generation prompt for a context.
pub fn generation_prompt(ctx: &PromptContext) -> String {
    let template = match ctx.kind {
        QueryKind::Sql => SQL_PROMPT,
        QueryKind::Cypher => CYPHER_PROMPT,
    };
    prompts::render(
        template,
        &[
            ("schema", &ctx.schema_text),
            ("domain_knowledge", ctx.domain_knowledge.as_deref().unwrap_or("(none)")),
            ("shots", &render_shots(&ctx.shots, ctx.kind)),
            ("question", &ctx.question),
        ],
    )
}

pub(crate) fn request(ws: &Workspace, messages: Vec<Message>) -> ChatRequest {
    let mut req = ChatRequest::new(messages);
    req.temperature = ws.config.llm.temperature;
    req.max_tokens = ws.config.llm.max_tokens;
    req
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub query: String,
    pub attempts: u32,
    /// Memory id of the record written for this query.
    pub record_id: u64,
}

enum Rejection {
    NonSelect(String),
    Invalid(String),
}

fn generate(
    ctx: &PromptContext,
    ws: &Workspace,
    llm: &dyn LlmPort,
    validate: impl Fn(&str) -> Result<StructSignature, Rejection>,
) -> Result<Generated, AgentError> {
    if ctx.question.trim().is_empty() {
        return Err(AgentError::EmptyQuestion);
    }
    let lang = fence(ctx.kind);
    let mut messages = vec![Message::user(generation_prompt(ctx))];
    let rounds = 1 + ws.config.agents.repair_budget;
    let mut last = Rejection::Invalid(String::new());
    for attempt in 1..=rounds {
        let reply = llm.complete(&request(ws, messages.clone()))?;
        let query = extract_fenced(&reply.text, lang);
        match validate(&query) {
            Ok(signature) => {
                let record = make_record(
                    ws.embedder.as_ref(),
                    &ctx.question,
                    &query,
                    signature,
                    "",
                    &ws.clock.now(),
                )?;
                let record_id = ws.memory.record_qa(record)?;
                return Ok(Generated {
                    query,
                    attempts: attempt,
                    record_id,
                });
            }
            Err(r) => {
                let msg = match &r {
                    Rejection::NonSelect(m) | Rejection::Invalid(m) => m.clone(),
                };
                last = r;
                messages.push(Message::assistant(reply.text));
                let language = match ctx.kind {
                    QueryKind::Sql => "SQL",
                    QueryKind::Cypher => "Cypher",
                };
                messages.push(Message::user(prompts::render(
                    REPAIR_PROMPT,
                    &[("language", language), ("error", &msg), ("fence", lang)],
                )));
            }
        }
    }
    Err(match last {
        Rejection::NonSelect(m) => AgentError::NonSelectRejected(m),
        Rejection::Invalid(m) => AgentError::GenerationFailed {
            attempts: rounds,
            last_error: m,
        },
    })
}

/// Generates a SELECT for the context, validated by a dry run against the
/// store, with one repair round by default.
pub fn generate_sql(ctx: &PromptContext, ws: &Workspace, llm: &dyn LlmPort) -> Result<Generated, AgentError> {
    generate(ctx, ws, llm, |sql| {
        if sql.trim().is_empty() {
            return Err(Rejection::Invalid("empty query".into()));
        }
        match ws.store.dry_run(sql) {
            Ok(()) => sql_signature(sql, ws).map_err(|e| Rejection::Invalid(e.to_string())),
            Err(StoreError::NonSelectRejected(m)) => Err(Rejection::NonSelect(m)),
            Err(e) => Err(Rejection::Invalid(e.to_string())),
        }
    })
}

/// Generates a Cypher query, validated by parsing it and evaluating it
/// against the current graph.
pub fn generate_cypher(ctx: &PromptContext, ws: &Workspace, llm: &dyn LlmPort) -> Result<Generated, AgentError> {
    generate(ctx, ws, llm, |text| {
        let q = graphquery::parse_cypher(text).map_err(|e| Rejection::Invalid(e.to_string()))?;
        graphquery::eval_query_with(&ws.graph(), &q, &EvalLimits::default())
            .map_err(|e| Rejection::Invalid(e.to_string()))?;
        Ok(cypher_signature(&q))
    })
}

/// Serialized result as shown to the analysis prompt: at most `cap` rows,
/// followed by a marker when rows were cut.
pub fn render_result(result: &ResultTable, cap: usize) -> String {
    let (mut text, cut) = result.render(cap);
    if cut {
        text.push_str(&format!("[truncated: showing {cap} of {} rows]\n", result.rows.len()));
    }
    text
}

pub fn analysis_prompt(question: &str, query: Option<&str>, result: &ResultTable, cap: usize) -> String {
    let directive = if result.is_empty() { EMPTY_RESULT_DIRECTIVE } else { "" };
    prompts::render(
        ANALYSIS_PROMPT,
        &[
            ("question", question),
            ("query", query.unwrap_or("(unknown query)")),
            ("result", &render_result(result, cap)),
            ("directive", directive),
        ],
    )
}

/// The LLM's explanation of a result, returned verbatim.
pub fn analyze_result(
    question: &str,
    query: Option<&str>,
    result: &ResultTable,
    ws: &Workspace,
    llm: &dyn LlmPort,
) -> Result<String, AgentError> {
    let prompt = analysis_prompt(question, query, result, ws.config.agents.row_cap);
    Ok(llm.complete(&request(ws, vec![Message::user(prompt)]))?.text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChartKind {
    Bar,
    Line,
    Pie,
    Scatter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartSpec {
    pub kind: ChartKind,
    pub x: String,
    /// A column, or `agg(column)` with agg one of sum, avg, count, min, max.
    pub y: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub series: Option<String>,
}

impl ChartSpec {
    /// Every referenced column exists in `columns`.
    pub fn is_valid_for(&self, columns: &[String]) -> bool {
        let has = |c: &str| columns.iter().any(|x| x == c);
        let y_ok = has(&self.y)
            || self
                .y
                .strip_suffix(')')
                .and_then(|s| s.split_once('('))
                .is_some_and(|(f, arg)| {
                    let f = f.trim().to_ascii_lowercase();
                    let arg = arg.trim();
                    ["sum", "avg", "count", "min", "max"].contains(&f.as_str())
                        && (has(arg) || (f == "count" && arg == "*"))
                });
        has(&self.x) && y_ok && self.series.as_deref().is_none_or(has)
    }
}

pub fn parse_chart_spec(reply: &str, columns: &[String]) -> Option<ChartSpec> {
    let body = extract_fenced(reply, "json");
    if body.trim().trim_matches('.').eq_ignore_ascii_case("none") {
        return None;
    }
    let spec: ChartSpec = serde_json::from_str(&body).ok()?;
    spec.is_valid_for(columns).then_some(spec)
}

/// Best-effort chart proposal. Results with fewer than [`MIN_CHART_ROWS`]
/// rows, LLM failures and invalid specs all yield `None`.
pub fn make_chart_spec(question: &str, result: &ResultTable, ws: &Workspace, llm: &dyn LlmPort) -> Option<ChartSpec> {
    if result.rows.len() < MIN_CHART_ROWS || result.columns.is_empty() {
        return None;
    }
    let prompt = prompts::render(
        CHART_PROMPT,
        &[
            ("question", question),
            ("columns", &result.columns.join(", ")),
            ("result", &result.render(CHART_PREVIEW_ROWS).0),
        ],
    );
    let reply = llm.complete(&request(ws, vec![Message::user(prompt)])).ok()?;
    parse_chart_spec(&reply.text, &result.columns)
}

// ---------------------------------------------------------------------------
// Teams
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Team {
    DatabaseTeam,
    KnowledgeGraphTeam,
}

impl Team {
    pub fn name(self) -> &'static str {
        match self {
            Team::DatabaseTeam => "database_team",
            Team::KnowledgeGraphTeam => "knowledge_graph_team",
        }
    }

    pub fn kind(self) -> QueryKind {
        match self {
            Team::DatabaseTeam => QueryKind::Sql,
            Team::KnowledgeGraphTeam => QueryKind::Cypher,
        }
    }
}

impl std::fmt::Display for Team {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TeamOptions {
    pub chart: bool,
    pub subgraph: bool,
}

/// Everything one team call produced. A failure at any stage is kept in
/// `error`; the stages before it stay filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TeamReport {
    pub team: Team,
    pub task: String,
    pub query: Option<String>,
    pub result: Option<ResultTable>,
    pub analysis: Option<String>,
    pub chart: Option<ChartSpec>,
    pub subgraph: Option<SubgraphView>,
    pub error: Option<String>,
    pub usage: Usage,
    pub llm_calls: u64,
}

impl TeamReport {
    fn new(team: Team, task: &str) -> Self {
        Self {
            team,
            task: task.to_string(),
            query: None,
            result: None,
            analysis: None,
            chart: None,
            subgraph: None,
            error: None,
            usage: Usage::default(),
            llm_calls: 0,
        }
    }

    /// Row count of the result, if the query ran.
    pub fn size(&self) -> Option<usize> {
        self.result.as_ref().map(|r| r.rows.len())
    }

    pub fn digest(&self, preview_rows: usize) -> String {
        match (&self.result, &self.error) {
            (Some(r), _) => format!("Result: {}", r.digest(preview_rows)),
            (None, Some(e)) => format!("ERROR: {e}"),
            (None, None) => "no result".into(),
        }
    }

    /// What the leader sees: the analysis and a compact result digest, or
    /// the error.
    pub fn observation(&self, preview_rows: usize) -> String {
        let mut parts = Vec::new();
        if let Some(a) = &self.analysis {
            parts.push(a.trim().to_string());
        }
        if let Some(r) = &self.result {
            parts.push(format!("Result: {}", r.digest(preview_rows)));
        }
        if let Some(e) = &self.error {
            parts.push(format!("ERROR: {e}"));
        }
        parts.join("\n")
    }
}

/// Runs one team pipeline: context, generation, execution, analysis, and
/// optionally a chart or subgraph.
pub fn run_team(team: Team, task: &str, ws: &Workspace, llm: &dyn LlmPort, opts: TeamOptions) -> TeamReport {
    let metered = Metered::new(llm);
    let mut report = TeamReport::new(team, task);
    if let Err(e) = run_team_stages(team, task, ws, &metered, opts, &mut report) {
        report.error = Some(e.to_string());
    }
    report.usage = metered.total_usage();
    report.llm_calls = metered.calls();
    report
}

fn run_team_stages(
    team: Team,
    task: &str,
    ws: &Workspace,
    llm: &dyn LlmPort,
    opts: TeamOptions,
    report: &mut TeamReport,
) -> Result<(), AgentError> {
    let ctx = assemble_context(task, team.kind(), ws)?;
    let generated = match team {
        Team::DatabaseTeam => generate_sql(&ctx, ws, llm)?,
        Team::KnowledgeGraphTeam => generate_cypher(&ctx, ws, llm)?,
    };
    report.query = Some(generated.query.clone());
    let table = match team {
        Team::DatabaseTeam => ws.store.run_select(&generated.query)?,
        Team::KnowledgeGraphTeam => {
            let q = graphquery::parse_cypher(&generated.query)?;
            let out = graphquery::eval_query_with(&ws.graph(), &q, &EvalLimits::default())?;
            if opts.subgraph && !out.bound_ids.is_empty() {
                report.subgraph = Some(ws.subgraph(&out.bound_ids, SUBGRAPH_RADIUS));
            }
            out.table
        }
    };
    report.result = Some(table);
    let table = report.result.as_ref().expect("just set");
    report.analysis = Some(analyze_result(task, Some(&generated.query), table, ws, llm)?);
    if opts.chart {
        report.chart = make_chart_spec(task, table, ws, llm);
    }
    Ok(())
}
