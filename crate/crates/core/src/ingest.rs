//! Table ingestion: CSV/TSV parsing, column type inference, DDL generation,
//! row cleaning, and loading into the relational store.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{extract_fenced, ChatRequest, LlmPort, Message};
use crate::relstore::{RelStore, StoreError};
use crate::value::{parse_finite, Value};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("table has no columns")]
    EmptyTable,
    #[error("table `{0}` already exists")]
    NameCollision(String),
    #[error("malformed input at record {record}: {message}")]
    Format { record: usize, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ColumnType {
    Integer,
    Real,
    Boolean,
    Date,
    Text,
}

impl ColumnType {
    /// Inference preference order; the first type every cell satisfies wins.
    pub const PRIORITY: [ColumnType; 5] = [
        ColumnType::Integer,
        ColumnType::Real,
        ColumnType::Boolean,
        ColumnType::Date,
        ColumnType::Text,
    ];

    pub fn sql_name(self) -> &'static str {
        match self {
            ColumnType::Integer => "INTEGER",
            ColumnType::Real => "REAL",
            ColumnType::Boolean => "BOOLEAN",
            ColumnType::Date => "DATE",
            ColumnType::Text => "TEXT",
        }
    }

    /// Maps a declared SQL type back onto the inference lattice.
    pub fn from_decl(decl: &str) -> Option<ColumnType> {
        let upper = decl.trim().to_ascii_uppercase();
        let base = upper.split('(').next().unwrap_or("").trim();
        Some(match base {
            "INTEGER" | "INT" | "BIGINT" | "SMALLINT" => ColumnType::Integer,
            "REAL" | "FLOAT" | "DOUBLE" | "NUMERIC" | "DECIMAL" => ColumnType::Real,
            "BOOLEAN" | "BOOL" => ColumnType::Boolean,
            "DATE" => ColumnType::Date,
            "TEXT" | "VARCHAR" | "CHAR" | "STRING" => ColumnType::Text,
            _ => return None,
        })
    }

    /// Whether a trimmed, non-empty cell parses as this type.
    pub fn accepts(self, cell: &str) -> bool {
        self.coerce(cell).is_some()
    }

    /// Parses a trimmed, non-empty cell into a typed value.
    pub fn coerce(self, cell: &str) -> Option<Value> {
        match self {
            ColumnType::Integer => parse_integer(cell).map(Value::Int),
            ColumnType::Real => parse_finite(cell).map(Value::Real),
            ColumnType::Boolean => parse_bool(cell).map(Value::Bool),
            ColumnType::Date => parse_iso_date(cell).map(|_| Value::Text(cell.to_string())),
            ColumnType::Text => Some(Value::Text(cell.to_string())),
        }
    }
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.sql_name())
    }
}

fn parse_integer(s: &str) -> Option<i64> {
    let digits = s.strip_prefix(['+', '-']).unwrap_or(s);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn parse_iso_date(s: &str) -> Option<NaiveDate> {
    let b = s.as_bytes();
    let shape_ok = b.len() == 10
        && b[4] == b'-'
        && b[7] == b'-'
        && b.iter()
            .enumerate()
            .all(|(i, c)| i == 4 || i == 7 || c.is_ascii_digit());
    if !shape_ok {
        return None;
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok()
}

/// A table as read from a file: header names plus raw cell strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTable {
    pub name: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    /// Builds a table, checking that every row is as wide as the header.
    pub fn new(name: impl Into<String>, headers: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self, IngestError> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != headers.len() {
                return Err(IngestError::Format {
                    record: i + 1,
                    message: format!("expected {} cells, found {}", headers.len(), row.len()),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            headers,
            rows,
        })
    }

    /// Parses delimited text whose first record is the header.
    pub fn from_delimited(name: impl Into<String>, data: &[u8], delimiter: u8) -> Result<Self, IngestError> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .has_headers(true)
            .flexible(false)
            .from_reader(data);
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| csv_error(e, 0))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| csv_error(e, i + 1))?;
            rows.push(record.iter().map(str::to_string).collect());
        }
        Self::new(name, headers, rows)
    }

    /// Reads a CSV file, or TSV when the extension is `.tsv`/`.tab`.
    pub fn read_file(path: &Path, name: impl Into<String>) -> Result<Self, IngestError> {
        let data = std::fs::read(path).map_err(|e| IngestError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let delimiter = match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("tsv") || ext.eq_ignore_ascii_case("tab") => b'\t',
            _ => b',',
        };
        Self::from_delimited(name, &data, delimiter)
    }
}

fn csv_error(err: csv::Error, fallback_record: usize) -> IngestError {
    let record = err.position().map(|p| p.record() as usize).unwrap_or(fallback_record);
    IngestError::Format {
        record,
        message: err.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub inferred_type: ColumnType,
    pub nullable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_header: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl Column {
    pub fn new(name: impl Into<String>, inferred_type: ColumnType) -> Self {
        Self {
            name: name.into(),
            inferred_type,
            nullable: true,
            source_header: None,
            description: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    pub table_name: String,
    pub columns: Vec<Column>,
}

impl TableSchema {
    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    /// Names and types only, for comparisons that ignore annotations.
    pub fn shape(&self) -> (String, Vec<(String, ColumnType)>) {
        (
            self.table_name.clone(),
            self.columns.iter().map(|c| (c.name.clone(), c.inferred_type)).collect(),
        )
    }
}

const SQL_KEYWORDS: &[&str] = &[
    "all",
    "and",
    "as",
    "asc",
    "between",
    "by",
    "case",
    "cast",
    "check",
    "collate",
    "create",
    "default",
    "delete",
    "desc",
    "distinct",
    "drop",
    "else",
    "end",
    "except",
    "exists",
    "from",
    "group",
    "having",
    "in",
    "index",
    "insert",
    "intersect",
    "into",
    "is",
    "join",
    "key",
    "like",
    "limit",
    "not",
    "null",
    "offset",
    "on",
    "or",
    "order",
    "primary",
    "references",
    "select",
    "set",
    "table",
    "then",
    "union",
    "update",
    "values",
    "when",
    "where",
];

/// Lowercases, maps non-alphanumerics to `_`, collapses runs, trims edge
/// underscores, prefixes `_` before a leading digit and suffixes `_` on SQL
/// keywords. Returns `None` when nothing usable is left.
pub fn sanitize_identifier(raw: &str) -> Option<String> {
    let mut out = String::with_capacity(raw.len());
    for ch in raw.chars() {
        let c = if ch.is_ascii_alphanumeric() {
            ch.to_ascii_lowercase()
        } else {
            '_'
        };
        if c == '_' && out.ends_with('_') {
            continue;
        }
        out.push(c);
    }
    let trimmed = out.trim_matches('_');
    if trimmed.is_empty() {
        return None;
    }
    let mut name = trimmed.to_string();
    if name.starts_with(|c: char| c.is_ascii_digit()) {
        name.insert(0, '_');
    }
    if SQL_KEYWORDS.contains(&name.as_str()) {
        name.push('_');
    }
    Some(name)
}

fn sanitized_headers(headers: &[String]) -> Vec<String> {
    let mut seen = HashSet::new();
    headers
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let base = sanitize_identifier(h).unwrap_or_else(|| format!("col_{}", i + 1));
            let mut name = base.clone();
            let mut n = 2;
            while !seen.insert(name.clone()) {
                name = format!("{base}_{n}");
                n += 1;
            }
            name
        })
        .collect()
}

/// Narrowest type in [`ColumnType::PRIORITY`] accepted by every non-empty cell.
pub fn infer_column_type<'a>(cells: impl Iterator<Item = &'a str> + Clone) -> ColumnType {
    ColumnType::PRIORITY
        .into_iter()
        .find(|ty| {
            cells
                .clone()
                .map(str::trim)
                .filter(|c| !c.is_empty())
                .all(|c| ty.accepts(c))
        })
        .unwrap_or(ColumnType::Text)
}

/// Infers a sanitized schema over all rows. An LLM hint, when given, may
/// rename or describe columns but never changes their types.
pub fn infer_schema(raw: &RawTable, llm_hint: Option<&dyn LlmPort>) -> Result<TableSchema, IngestError> {
    if raw.headers.is_empty() {
        return Err(IngestError::EmptyTable);
    }
    let names = sanitized_headers(&raw.headers);
    let columns = names
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let cells = raw.rows.iter().map(move |r| r[i].as_str());
            let all_present = raw.rows.iter().all(|r| !r[i].trim().is_empty());
            Column {
                name,
                inferred_type: infer_column_type(cells),
                nullable: raw.rows.is_empty() || !all_present,
                source_header: Some(raw.headers[i].clone()),
                description: None,
            }
        })
        .collect();
    let table_name = sanitize_identifier(&raw.name).unwrap_or_else(|| "table_1".to_string());
    let mut schema = TableSchema { table_name, columns };
    if let Some(llm) = llm_hint {
        annotate_with_llm(&mut schema, raw, llm);
    }
    Ok(schema)
}

#[derive(Deserialize)]
struct Annotation {
    name: String,
    #[serde(default)]
    rename: Option<String>,
    #[serde(default)]
    description: Option<String>,
}

#[derive(Deserialize)]
struct AnnotationDoc {
    columns: Vec<Annotation>,
}

const SCHEMA_ANNOTATION_PROMPT: &str = include_str!("../assets/prompts/schema_annotation.v1.txt");

fn annotate_with_llm(schema: &mut TableSchema, raw: &RawTable, llm: &dyn LlmPort) {
    let columns: Vec<String> = schema
        .columns
        .iter()
        .map(|c| {
            format!(
                "- {} ({}) from header {:?}",
                c.name,
                c.inferred_type,
                c.source_header.as_deref().unwrap_or("")
            )
        })
        .collect();
    let sample: Vec<String> = raw.rows.iter().take(5).map(|r| r.join(" | ")).collect();
    let prompt = crate::agents::prompts::render(
        SCHEMA_ANNOTATION_PROMPT,
        &[
            ("table", schema.table_name.as_str()),
            ("columns", &columns.join("\n")),
            ("sample", &sample.join("\n")),
        ],
    );
    let completion = match llm.complete(&ChatRequest::new(vec![Message::user(prompt)])) {
        Ok(c) => c,
        Err(e) => {
            tracing::warn!(error = %e, "schema annotation skipped");
            return;
        }
    };
    let doc: AnnotationDoc = match serde_json::from_str(&extract_fenced(&completion.text, "json")) {
        Ok(d) => d,
        Err(e) => {
            tracing::warn!(error = %e, "schema annotation unparseable");
            return;
        }
    };
    for ann in doc.columns {
        let Some(idx) = schema.columns.iter().position(|c| c.name == ann.name) else {
            continue;
        };
        if let Some(desc) = ann.description.filter(|d| !d.trim().is_empty()) {
            schema.columns[idx].description = Some(desc.trim().to_string());
        }
        if let Some(new_name) = ann.rename.as_deref().and_then(sanitize_identifier) {
            let taken = schema
                .columns
                .iter()
                .enumerate()
                .any(|(j, c)| j != idx && c.name == new_name);
            if !taken {
                schema.columns[idx].name = new_name;
            }
        }
    }
}

/// `CREATE TABLE <name> (<col> <TYPE>, ...);` in declaration order.
pub fn generate_ddl(schema: &TableSchema) -> String {
    let cols: Vec<String> = schema
        .columns
        .iter()
        .map(|c| format!("{} {}", c.name, c.inferred_type.sql_name()))
        .collect();
    format!("CREATE TABLE {} ({});", schema.table_name, cols.join(", "))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub row_count: usize,
    pub dropped_rows: usize,
    pub coerced_cells: usize,
    pub null_cells: usize,
    pub warnings: Vec<String>,
}

/// Typed rows aligned with a schema's columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanRows {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl CleanRows {
    /// Renders the rows back to raw strings (nulls become empty cells).
    pub fn to_raw(&self, name: &str) -> RawTable {
        RawTable {
            name: name.to_string(),
            headers: self.columns.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(Value::render).collect())
                .collect(),
        }
    }
}

/// Trims, nulls empty cells, coerces to the schema's types, and drops rows
/// with no content. Cleaning never fails.
pub fn clean_rows(raw: &RawTable, schema: &TableSchema) -> (CleanRows, QualityReport) {
    let mut report = QualityReport {
        row_count: raw.rows.len(),
        ..QualityReport::default()
    };
    let mut coerced_per_column = vec![0usize; schema.columns.len()];
    let mut rows = Vec::with_capacity(raw.rows.len());
    for row in &raw.rows {
        if row.iter().all(|c| c.trim().is_empty()) {
            report.dropped_rows += 1;
            continue;
        }
        let mut out = Vec::with_capacity(schema.columns.len());
        for (i, col) in schema.columns.iter().enumerate() {
            let cell = row.get(i).map(|c| c.trim()).unwrap_or("");
            let value = if cell.is_empty() {
                Value::Null
            } else {
                match col.inferred_type.coerce(cell) {
                    Some(v) => v,
                    None => {
                        report.coerced_cells += 1;
                        coerced_per_column[i] += 1;
                        Value::Null
                    }
                }
            };
            if value.is_null() {
                report.null_cells += 1;
            }
            out.push(value);
        }
        rows.push(out);
    }
    if report.dropped_rows > 0 {
        report
            .warnings
            .push(format!("dropped {} empty row(s)", report.dropped_rows));
    }
    for (col, n) in schema.columns.iter().zip(coerced_per_column) {
        if n > 0 {
            report.warnings.push(format!(
                "column {}: {n} cell(s) not parseable as {} set to null",
                col.name, col.inferred_type
            ));
        }
    }
    (
        CleanRows {
            columns: schema.column_names(),
            rows,
        },
        report,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub table: String,
    pub ddl: String,
    pub schema: TableSchema,
    pub quality: QualityReport,
}

/// Infers, creates, cleans and loads a table. Refuses to overwrite.
pub fn ingest_table(raw: &RawTable, store: &RelStore) -> Result<IngestReport, IngestError> {
    ingest_table_with(raw, store, None).map(|(report, _)| report)
}

/// Like [`ingest_table`], optionally with an LLM schema hint; also returns
/// the cleaned rows for downstream graph construction.
pub fn ingest_table_with(
    raw: &RawTable,
    store: &RelStore,
    llm_hint: Option<&dyn LlmPort>,
) -> Result<(IngestReport, CleanRows), IngestError> {
    let schema = infer_schema(raw, llm_hint)?;
    let ddl = generate_ddl(&schema);
    let (clean, quality) = clean_rows(raw, &schema);
    match store.create_table(&ddl) {
        Ok(()) => {}
        Err(StoreError::NameCollision(name)) => return Err(IngestError::NameCollision(name)),
        Err(e) => return Err(e.into()),
    }
    store.load_rows(&schema.table_name, &clean.columns, &clean.rows)?;
    Ok((
        IngestReport {
            table: schema.table_name.clone(),
            ddl,
            schema,
            quality,
        },
        clean,
    ))
}
