//! Relational store port backed by embedded SQLite.
//!
//! Only `CREATE TABLE` (through [`RelStore::create_table`]), bulk loads, and
//! read-only `SELECT`/`WITH` queries are accepted. Every `ORDER BY` term
//! without an explicit `NULLS` clause is rewritten to `NULLS LAST`.

use std::path::Path;
use std::sync::Mutex;

use rusqlite::types::ValueRef;
use rusqlite::{params_from_iter, Connection};
use thiserror::Error;

use crate::ingest::{Column, ColumnType, TableSchema};
use crate::value::{ResultTable, Value};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown relation: {0}")]
    UnknownRelation(String),
    #[error("unknown column: {0}")]
    UnknownColumn(String),
    #[error("only SELECT queries are allowed: {0}")]
    NonSelectRejected(String),
    #[error("table `{0}` already exists")]
    NameCollision(String),
    #[error("engine error: {0}")]
    Engine(String),
}

fn engine_error(err: rusqlite::Error) -> StoreError {
    match err {
        rusqlite::Error::SqliteFailure(_, Some(msg)) => classify_message(msg),
        rusqlite::Error::MultipleStatement => StoreError::Syntax("multiple statements are not supported".into()),
        other => classify_message(other.to_string()),
    }
}

fn classify_message(msg: String) -> StoreError {
    if msg.starts_with("no such table") {
        StoreError::UnknownRelation(msg)
    } else if msg.starts_with("no such column") {
        StoreError::UnknownColumn(msg)
    } else if msg.contains("syntax error") || msg.starts_with("incomplete input") {
        StoreError::Syntax(msg)
    } else {
        StoreError::Engine(msg)
    }
}

pub struct RelStore {
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for RelStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RelStore").finish_non_exhaustive()
    }
}

impl RelStore {
    pub fn in_memory() -> Result<Self, StoreError> {
        Ok(Self {
            conn: Mutex::new(Connection::open_in_memory().map_err(engine_error)?),
        })
    }

    pub fn open(path: &Path) -> Result<Self, StoreError> {
        Ok(Self {
            conn: Mutex::new(Connection::open(path).map_err(engine_error)?),
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Creates a table from a single `CREATE TABLE` statement.
    pub fn create_table(&self, ddl: &str) -> Result<(), StoreError> {
        let parsed = parse_create_table(ddl)?;
        let conn = self.lock();
        if table_exists(&conn, &parsed.table_name)? {
            return Err(StoreError::NameCollision(parsed.table_name));
        }
        conn.execute_batch(ddl).map_err(engine_error)
    }

    /// Inserts rows in one transaction. Column order follows `columns`.
    pub fn load_rows(&self, table: &str, columns: &[String], rows: &[Vec<Value>]) -> Result<(), StoreError> {
        let mut conn = self.lock();
        let tx = conn.transaction().map_err(engine_error)?;
        {
            let placeholders = vec!["?"; columns.len()].join(", ");
            let cols: Vec<String> = columns.iter().map(|c| quote_ident(c)).collect();
            let sql = format!(
                "INSERT INTO {} ({}) VALUES ({})",
                quote_ident(table),
                cols.join(", "),
                placeholders
            );
            let mut stmt = tx.prepare(&sql).map_err(engine_error)?;
            for row in rows {
                let params = row.iter().map(to_sql_value);
                stmt.execute(params_from_iter(params)).map_err(engine_error)?;
            }
        }
        tx.commit().map_err(engine_error)
    }

    /// Checks that `sql` is a read-only query and compiles; does not run it.
    pub fn dry_run(&self, sql: &str) -> Result<(), StoreError> {
        let rewritten = guard_and_rewrite(sql)?;
        let conn = self.lock();
        let stmt = conn.prepare(&rewritten).map_err(engine_error)?;
        if !stmt.readonly() {
            return Err(StoreError::NonSelectRejected(sql.trim().to_string()));
        }
        Ok(())
    }

    /// Runs a read-only query. Engine messages are carried verbatim.
    pub fn run_select(&self, sql: &str) -> Result<ResultTable, StoreError> {
        let rewritten = guard_and_rewrite(sql)?;
        let conn = self.lock();
        let mut stmt = conn.prepare(&rewritten).map_err(engine_error)?;
        if !stmt.readonly() {
            return Err(StoreError::NonSelectRejected(sql.trim().to_string()));
        }
        let decls: Vec<Option<ColumnType>> = stmt
            .columns()
            .iter()
            .map(|c| c.decl_type().and_then(ColumnType::from_decl))
            .collect();
        let columns: Vec<String> = stmt.column_names().iter().map(|s| s.to_string()).collect();
        let mut out = ResultTable::new(columns);
        let mut rows = stmt.query([]).map_err(engine_error)?;
        while let Some(row) = rows.next().map_err(engine_error)? {
            let mut values = Vec::with_capacity(decls.len());
            for (i, decl) in decls.iter().enumerate() {
                let v = row.get_ref(i).map_err(engine_error)?;
                values.push(from_sql_value(v, *decl));
            }
            out.rows.push(values);
        }
        Ok(out)
    }

    /// One `CREATE TABLE` statement per table, ordered by table name.
    pub fn schema_ddl(&self) -> Result<Vec<String>, StoreError> {
        let conn = self.lock();
        let mut stmt = conn
            .prepare(
                "SELECT sql FROM sqlite_master WHERE type = 'table' \
                 AND name NOT LIKE 'sqlite_%' ORDER BY name",
            )
            .map_err(engine_error)?;
        let ddls = stmt
            .query_map([], |r| r.get::<_, String>(0))
            .map_err(engine_error)?
            .collect::<Result<Vec<_>, _>>()
            .map_err(engine_error)?;
        Ok(ddls
            .into_iter()
            .map(|d| {
                let d = d.trim().to_string();
                if d.ends_with(';') {
                    d
                } else {
                    d + ";"
                }
            })
            .collect())
    }

    pub fn table_names(&self) -> Result<Vec<String>, StoreError> {
        let conn = self.lock();
        let mut stmt = conn
            .prepare(
                "SELECT name FROM sqlite_master WHERE type = 'table' \
                 AND name NOT LIKE 'sqlite_%' ORDER BY name",
            )
            .map_err(engine_error)?;
        let names = stmt
            .query_map([], |r| r.get::<_, String>(0))
            .map_err(engine_error)?
            .collect::<Result<Vec<_>, _>>()
            .map_err(engine_error)?;
        Ok(names)
    }

    pub fn has_table(&self, name: &str) -> Result<bool, StoreError> {
        table_exists(&self.lock(), name)
    }

    /// Names and declared types of a table's columns.
    pub fn introspect(&self, table: &str) -> Result<TableSchema, StoreError> {
        let conn = self.lock();
        if !table_exists(&conn, table)? {
            return Err(StoreError::UnknownRelation(format!("no such table: {table}")));
        }
        let mut stmt = conn
            .prepare(&format!("PRAGMA table_info({})", quote_ident(table)))
            .map_err(engine_error)?;
        let columns = stmt
            .query_map([], |r| {
                let name: String = r.get(1)?;
                let decl: String = r.get(2)?;
                let notnull: i64 = r.get(3)?;
                Ok((name, decl, notnull))
            })
            .map_err(engine_error)?
            .collect::<Result<Vec<_>, _>>()
            .map_err(engine_error)?
            .into_iter()
            .map(|(name, decl, notnull)| Column {
                name,
                inferred_type: ColumnType::from_decl(&decl).unwrap_or(ColumnType::Text),
                nullable: notnull == 0,
                source_header: None,
                description: None,
            })
            .collect();
        Ok(TableSchema {
            table_name: table.to_string(),
            columns,
        })
    }

    /// Reads a whole table in rowid order.
    pub fn read_table(&self, table: &str) -> Result<ResultTable, StoreError> {
        if !self.has_table(table)? {
            return Err(StoreError::UnknownRelation(format!("no such table: {table}")));
        }
        self.run_select(&format!("SELECT * FROM {} ORDER BY rowid", quote_ident(table)))
    }
}

fn table_exists(conn: &Connection, name: &str) -> Result<bool, StoreError> {
    conn.query_row(
        "SELECT count(*) FROM sqlite_master WHERE type = 'table' AND lower(name) = lower(?1)",
        [name],
        |r| r.get::<_, i64>(0),
    )
    .map(|n| n > 0)
    .map_err(engine_error)
}

pub(crate) fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

fn to_sql_value(v: &Value) -> rusqlite::types::Value {
    use rusqlite::types::Value as Sql;
    match v {
        Value::Null => Sql::Null,
        Value::Bool(b) => Sql::Integer(i64::from(*b)),
        Value::Int(i) => Sql::Integer(*i),
        Value::Real(r) => Sql::Real(*r),
        Value::Text(s) => Sql::Text(s.clone()),
        Value::List(_) => Sql::Text(serde_json::to_string(v).unwrap_or_default()),
    }
}

fn from_sql_value(v: ValueRef<'_>, decl: Option<ColumnType>) -> Value {
    match v {
        ValueRef::Null => Value::Null,
        ValueRef::Integer(i) if decl == Some(ColumnType::Boolean) => Value::Bool(i != 0),
        ValueRef::Integer(i) => Value::Int(i),
        ValueRef::Real(r) => Value::Real(r),
        ValueRef::Text(t) => Value::Text(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => Value::Text(format!("<blob {} bytes>", b.len())),
    }
}

// ---------------------------------------------------------------------------
// Lexing, the SELECT guard, and ORDER BY rewriting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Word,
    Quoted,
    Str,
    Number,
    Punct(char),
}

#[derive(Debug, Clone)]
struct Tok {
    kind: TokKind,
    start: usize,
    end: usize,
}

fn lex_sql(sql: &str) -> Result<Vec<Tok>, StoreError> {
    let bytes = sql.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c == b'-' && bytes.get(i + 1) == Some(&b'-') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
        } else if c == b'/' && bytes.get(i + 1) == Some(&b'*') {
            let rest = &sql[i + 2..];
            let end = rest
                .find("*/")
                .ok_or_else(|| StoreError::Syntax("unterminated comment".into()))?;
            i += 2 + end + 2;
        } else if c == b'\'' || c == b'"' || c == b'`' || c == b'[' {
            let close = if c == b'[' { b']' } else { c };
            let start = i;
            i += 1;
            loop {
                if i >= bytes.len() {
                    return Err(StoreError::Syntax(format!(
                        "unterminated quoted token starting at offset {start}"
                    )));
                }
                if bytes[i] == close {
                    if close != b']' && bytes.get(i + 1) == Some(&close) {
                        i += 2;
                        continue;
                    }
                    i += 1;
                    break;
                }
                i += 1;
            }
            let kind = if c == b'\'' { TokKind::Str } else { TokKind::Quoted };
            toks.push(Tok { kind, start, end: i });
        } else if c.is_ascii_alphabetic() || c == b'_' || c >= 0x80 {
            let start = i;
            while i < bytes.len()
                && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'$' || bytes[i] >= 0x80)
            {
                i += 1;
            }
            toks.push(Tok {
                kind: TokKind::Word,
                start,
                end: i,
            });
        } else if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'.') {
                i += 1;
            }
            toks.push(Tok {
                kind: TokKind::Number,
                start,
                end: i,
            });
        } else {
            toks.push(Tok {
                kind: TokKind::Punct(c as char),
                start: i,
                end: i + 1,
            });
            i += 1;
        }
    }
    Ok(toks)
}

fn is_word(sql: &str, t: &Tok, word: &str) -> bool {
    t.kind == TokKind::Word && sql[t.start..t.end].eq_ignore_ascii_case(word)
}

const ORDER_TERMINATORS: &[&str] = &[
    "limit",
    "offset",
    "rows",
    "range",
    "groups",
    "union",
    "except",
    "intersect",
    "window",
];

/// Rejects anything that is not a single SELECT/WITH statement and appends
/// `NULLS LAST` to ORDER BY terms lacking an explicit NULLS clause.
fn guard_and_rewrite(sql: &str) -> Result<String, StoreError> {
    let toks = lex_sql(sql)?;
    let first = toks.first().ok_or_else(|| StoreError::Syntax("empty query".into()))?;
    if !(is_word(sql, first, "select") || is_word(sql, first, "with")) {
        return Err(StoreError::NonSelectRejected(sql.trim().to_string()));
    }
    if let Some(semi) = toks.iter().position(|t| t.kind == TokKind::Punct(';')) {
        if semi + 1 < toks.len() {
            return Err(StoreError::Syntax("multiple statements are not supported".into()));
        }
    }
    let mut inserts = Vec::new();
    let mut i = 0;
    while i + 1 < toks.len() {
        if is_word(sql, &toks[i], "order") && is_word(sql, &toks[i + 1], "by") {
            i += 2;
            let mut depth = 0i32;
            let mut term_last: Option<usize> = None;
            let mut term_has_nulls = false;
            let flush = |last: Option<usize>, has_nulls: bool, inserts: &mut Vec<usize>| {
                if let (Some(end), false) = (last, has_nulls) {
                    inserts.push(end);
                }
            };
            while i < toks.len() {
                let t = &toks[i];
                match t.kind {
                    TokKind::Punct('(') => depth += 1,
                    TokKind::Punct(')') => {
                        if depth == 0 {
                            break;
                        }
                        depth -= 1;
                    }
                    TokKind::Punct(',') if depth == 0 => {
                        flush(term_last, term_has_nulls, &mut inserts);
                        term_last = None;
                        term_has_nulls = false;
                        i += 1;
                        continue;
                    }
                    TokKind::Punct(';') if depth == 0 => break,
                    TokKind::Word if depth == 0 && ORDER_TERMINATORS.iter().any(|w| is_word(sql, t, w)) => break,
                    _ => {}
                }
                if depth == 0 && is_word(sql, t, "nulls") {
                    term_has_nulls = true;
                }
                term_last = Some(t.end);
                i += 1;
            }
            flush(term_last, term_has_nulls, &mut inserts);
        } else {
            i += 1;
        }
    }
    let mut out = sql.to_string();
    inserts.sort_unstable();
    for pos in inserts.into_iter().rev() {
        out.insert_str(pos, " NULLS LAST");
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CREATE TABLE subset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedDdl {
    pub table_name: String,
    pub columns: Vec<(String, ColumnType)>,
}

fn unquote(sql: &str, t: &Tok) -> String {
    let raw = &sql[t.start..t.end];
    match t.kind {
        TokKind::Quoted => {
            let inner = &raw[1..raw.len() - 1];
            let q = &raw[..1];
            inner.replace(&format!("{q}{q}"), q)
        }
        _ => raw.to_string(),
    }
}

/// Parses `CREATE TABLE name (col TYPE [NOT NULL|PRIMARY KEY], ...)[;]`.
pub fn parse_create_table(ddl: &str) -> Result<ParsedDdl, StoreError> {
    let toks = lex_sql(ddl)?;
    let mut pos = 0;
    let err = |msg: &str| StoreError::Syntax(format!("malformed CREATE TABLE: {msg}"));
    let expect_word = |pos: &mut usize, w: &str| -> Result<(), StoreError> {
        match toks.get(*pos) {
            Some(t) if is_word(ddl, t, w) => {
                *pos += 1;
                Ok(())
            }
            _ => Err(err(&format!("expected {}", w.to_uppercase()))),
        }
    };
    expect_word(&mut pos, "create")?;
    expect_word(&mut pos, "table")?;
    let name_tok = toks
        .get(pos)
        .filter(|t| matches!(t.kind, TokKind::Word | TokKind::Quoted))
        .ok_or_else(|| err("expected table name"))?;
    let table_name = unquote(ddl, name_tok);
    pos += 1;
    if !matches!(toks.get(pos).map(|t| &t.kind), Some(TokKind::Punct('('))) {
        return Err(err("expected '('"));
    }
    pos += 1;
    let mut columns = Vec::new();
    loop {
        let col_tok = toks
            .get(pos)
            .filter(|t| matches!(t.kind, TokKind::Word | TokKind::Quoted))
            .ok_or_else(|| err("expected column name"))?;
        let col_name = unquote(ddl, col_tok);
        pos += 1;
        let type_tok = toks
            .get(pos)
            .filter(|t| t.kind == TokKind::Word)
            .ok_or_else(|| err(&format!("expected type for column {col_name}")))?;
        let ty = ColumnType::from_decl(&ddl[type_tok.start..type_tok.end])
            .ok_or_else(|| err(&format!("unsupported type {}", &ddl[type_tok.start..type_tok.end])))?;
        pos += 1;
        // optional length, e.g. VARCHAR(20)
        if matches!(toks.get(pos).map(|t| &t.kind), Some(TokKind::Punct('('))) {
            pos += 1;
            while !matches!(toks.get(pos).map(|t| &t.kind), Some(TokKind::Punct(')'))) {
                if pos >= toks.len() {
                    return Err(err("unterminated type arguments"));
                }
                pos += 1;
            }
            pos += 1;
        }
        loop {
            match toks.get(pos) {
                Some(t) if is_word(ddl, t, "not") => {
                    expect_word(&mut { pos + 1 }, "null")?;
                    pos += 2;
                }
                Some(t) if is_word(ddl, t, "primary") => {
                    expect_word(&mut { pos + 1 }, "key")?;
                    pos += 2;
                }
                _ => break,
            }
        }
        columns.push((col_name, ty));
        match toks.get(pos).map(|t| &t.kind) {
            Some(TokKind::Punct(',')) => pos += 1,
            Some(TokKind::Punct(')')) => {
                pos += 1;
                break;
            }
            _ => return Err(err("expected ',' or ')'")),
        }
    }
    if matches!(toks.get(pos).map(|t| &t.kind), Some(TokKind::Punct(';'))) {
        pos += 1;
    }
    if pos != toks.len() {
        return Err(err("unexpected trailing input"));
    }
    let mut seen = std::collections::HashSet::new();
    for (c, _) in &columns {
        if !seen.insert(c.to_ascii_lowercase()) {
            return Err(err(&format!("duplicate column {c}")));
        }
    }
    Ok(ParsedDdl { table_name, columns })
}
