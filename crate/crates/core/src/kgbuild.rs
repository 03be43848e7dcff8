//! Table-to-graph transformation: entity extraction (with composite-cell
//! splitting), merging on identifier collisions, and intra-row / cross-row
//! relationship discovery driven by composite rule expressions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CleanRows, ColumnType, TableSchema};
use crate::llm::{extract_fenced, ChatRequest, LlmPort, Message};
use crate::memory::{cosine_similarity, Embedder};
use crate::value::Value;

/// Pseudo-column that resolves to the 0-based row index.
pub const ROW_COLUMN: &str = "_row";
pub const DEFAULT_THRESHOLD: f64 = 0.8;
pub const DEFAULT_DELIMITERS: [char; 3] = [',', ';', '|'];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KgError {
    #[error("missing identifier value in column `{column}` (row {row})")]
    MissingIdValue { column: String, row: usize },
    #[error("cannot merge `{0}` with `{1}`: identifiers or types differ")]
    IdMismatch(String, String),
    #[error("invalid configuration: {}", .0.summary())]
    ConfigInvalid(ValidationReport),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("relationship endpoint `{0}` is not in the graph")]
    DanglingEndpoint(String),
    #[error("LLM unavailable: {0}")]
    LlmUnavailable(String),
    #[error("could not parse suggested configuration: {0}")]
    UnparseableSuggestion(String),
    #[error("suggested configuration is invalid: {}", .0.summary())]
    InvalidSuggestion(ValidationReport),
    #[error("config document: {0}")]
    Format(String),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

fn default_delimiters() -> Vec<char> {
    DEFAULT_DELIMITERS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub source_column: String,
    #[serde(default = "default_delimiters")]
    pub delimiters: Vec<char>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitySchema {
    pub entity_type: String,
    #[serde(default)]
    pub id_columns: Vec<String>,
    #[serde(default)]
    pub attr_columns: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub namespace: Option<String>,
}

impl EntitySchema {
    pub fn keyed(entity_type: &str, id_columns: &[&str], attr_columns: &[&str]) -> Self {
        Self {
            entity_type: entity_type.to_string(),
            id_columns: id_columns.iter().map(|s| s.to_string()).collect(),
            attr_columns: attr_columns.iter().map(|s| s.to_string()).collect(),
            split: None,
            namespace: None,
        }
    }

    fn referenced_columns(&self) -> impl Iterator<Item = &String> {
        self.id_columns
            .iter()
            .chain(&self.attr_columns)
            .chain(self.split.as_ref().map(|s| &s.source_column))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    IntraRow,
    CrossRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">=", alias = "≥")]
    Ge,
    #[serde(rename = "<=", alias = "≤")]
    Le,
}

impl CmpOp {
    pub fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            CmpOp::Eq => ord == Equal,
            CmpOp::Gt => ord == Greater,
            CmpOp::Lt => ord == Less,
            CmpOp::Ge => ord != Less,
            CmpOp::Le => ord != Greater,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleExpr {
    AttrCompare {
        src_attr: String,
        op: CmpOp,
        tgt_attr: String,
    },
    Similarity {
        src_attr: String,
        tgt_attr: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        threshold: Option<f64>,
    },
    And(Vec<RuleExpr>),
    Or(Vec<RuleExpr>),
}

impl RuleExpr {
    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a RuleExpr)) {
        f(self);
        if let RuleExpr::And(xs) | RuleExpr::Or(xs) = self {
            for x in xs {
                x.visit(f);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationshipRule {
    /// Provenance label; defaults to `rel_type`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub rel_type: String,
    pub source_type: String,
    pub target_type: String,
    pub match_mode: MatchMode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub group_columns: Vec<String>,
    /// Missing means always true.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<RuleExpr>,
}

impl RelationshipRule {
    pub fn label(&self) -> &str {
        self.name.as_deref().unwrap_or(&self.rel_type)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KgConfig {
    pub entities: Vec<EntitySchema>,
    #[serde(default)]
    pub relationships: Vec<RelationshipRule>,
}

impl KgConfig {
    pub fn from_json(text: &str) -> Result<Self, KgError> {
        serde_json::from_str(text).map_err(|e| KgError::Format(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub message: String,
    pub location: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    pub fn summary(&self) -> String {
        let msgs: Vec<String> = self
            .errors()
            .map(|i| format!("{}: {}", i.location, i.message))
            .collect();
        if msgs.is_empty() {
            "no errors".into()
        } else {
            msgs.join("; ")
        }
    }
}

fn is_label(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Checks a configuration against a table schema. With `strict`, rule
/// attributes that no schema of the endpoint type can produce are errors
/// rather than warnings.
pub fn validate_config(config: &KgConfig, table: &TableSchema, strict: bool) -> ValidationReport {
    let mut issues = Vec::new();
    let mut push = |severity, location: String, message: String| {
        issues.push(Issue {
            severity,
            message,
            location,
        })
    };
    let has_column = |c: &str| c == ROW_COLUMN || table.column(c).is_some();
    let mut used: BTreeSet<&str> = BTreeSet::new();
    let mut types: BTreeMap<&str, &EntitySchema> = BTreeMap::new();

    if config.entities.is_empty() {
        push(Severity::Error, "entities".into(), "no entity schemas".into());
    }
    for (i, s) in config.entities.iter().enumerate() {
        let loc = format!("entities[{i}]");
        if !is_label(&s.entity_type) {
            push(
                Severity::Error,
                loc.clone(),
                format!("entity type `{}` is not a valid label", s.entity_type),
            );
        }
        if types.insert(&s.entity_type, s).is_some() {
            push(
                Severity::Error,
                loc.clone(),
                format!("duplicate entity type `{}`", s.entity_type),
            );
        }
        match &s.split {
            None if s.id_columns.is_empty() => push(
                Severity::Error,
                format!("{loc}.id_columns"),
                "id_columns empty and no split configured".into(),
            ),
            Some(_) if !s.id_columns.is_empty() => push(
                Severity::Error,
                format!("{loc}.id_columns"),
                "split entities take their identifier from the split value; id_columns must be empty".into(),
            ),
            Some(sp) if sp.delimiters.is_empty() => {
                push(Severity::Error, format!("{loc}.split"), "empty delimiter set".into())
            }
            _ => {}
        }
        if let Some(ns) = &s.namespace {
            if ns.is_empty() || ns.contains(':') {
                push(
                    Severity::Error,
                    format!("{loc}.namespace"),
                    "namespace must be non-empty and contain no ':'".into(),
                );
            }
        }
        for c in s.referenced_columns() {
            used.insert(c);
            if !has_column(c) {
                push(
                    Severity::Error,
                    loc.clone(),
                    format!("column `{c}` does not exist in `{}`", table.table_name),
                );
            }
        }
    }

    for (i, r) in config.relationships.iter().enumerate() {
        let loc = format!("relationships[{i}]");
        if !is_label(&r.rel_type) {
            push(
                Severity::Error,
                loc.clone(),
                format!("relationship type `{}` is not a valid label", r.rel_type),
            );
        }
        for t in [&r.source_type, &r.target_type] {
            if !types.contains_key(t.as_str()) {
                push(Severity::Error, loc.clone(), format!("undefined entity type `{t}`"));
            }
        }
        match r.match_mode {
            MatchMode::IntraRow => {
                if r.source_type == r.target_type {
                    push(
                        Severity::Error,
                        loc.clone(),
                        "intra-row rules must connect entities of different types".into(),
                    );
                }
                if !r.group_columns.is_empty() {
                    push(
                        Severity::Warning,
                        loc.clone(),
                        "group_columns ignored for intra-row rules".into(),
                    );
                }
            }
            MatchMode::CrossRow => {
                if r.group_columns.is_empty() {
                    push(
                        Severity::Error,
                        loc.clone(),
                        "cross-row rules need group_columns".into(),
                    );
                }
            }
        }
        for c in &r.group_columns {
            used.insert(c);
            if !has_column(c) {
                push(
                    Severity::Error,
                    loc.clone(),
                    format!("group column `{c}` does not exist"),
                );
            }
        }
        if let Some(expr) = &r.expr {
            let src = types.get(r.source_type.as_str()).copied();
            let tgt = types.get(r.target_type.as_str()).copied();
            expr.visit(&mut |e| {
                let (a, b) = match e {
                    RuleExpr::AttrCompare { src_attr, tgt_attr, .. } => (src_attr, tgt_attr),
                    RuleExpr::Similarity {
                        src_attr,
                        tgt_attr,
                        threshold,
                    } => {
                        if let Some(t) = threshold {
                            if !(0.0..=1.0).contains(t) {
                                push(
                                    Severity::Error,
                                    format!("{loc}.expr"),
                                    format!("threshold {t} outside [0, 1]"),
                                );
                            }
                        }
                        (src_attr, tgt_attr)
                    }
                    _ => return,
                };
                for (attr, schema) in [(a, src), (b, tgt)] {
                    if attr.trim().is_empty() {
                        push(Severity::Error, format!("{loc}.expr"), "empty attribute name".into());
                    } else if let Some(s) = schema {
                        if !schema_provides(s, attr) {
                            let sev = if strict { Severity::Error } else { Severity::Warning };
                            push(
                                sev,
                                format!("{loc}.expr"),
                                format!("`{}` entities never carry attribute `{attr}`", s.entity_type),
                            );
                        }
                    }
                }
            });
        }
    }

    for c in &table.columns {
        if !used.contains(c.name.as_str()) {
            push(
                Severity::Warning,
                "table".into(),
                format!("column `{}` is not used", c.name),
            );
        }
    }
    let ok = !issues.iter().any(|i| i.severity == Severity::Error);
    ValidationReport { ok, issues }
}

fn schema_provides(s: &EntitySchema, attr: &str) -> bool {
    let bare = attr
        .strip_prefix("core.")
        .or_else(|| attr.strip_prefix("custom."))
        .unwrap_or(attr);
    attr == "id" || attr.starts_with("meta.") || s.referenced_columns().any(|c| c == bare)
}

// ---------------------------------------------------------------------------
// Entities and graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conflict {
    pub attribute: String,
    pub kept: Value,
    pub discarded: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMeta {
    pub source_table: String,
    pub source_rows: BTreeSet<usize>,
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conflicts: Vec<Conflict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub entity_type: String,
    pub core: BTreeMap<String, Value>,
    pub custom: BTreeMap<String, Value>,
    pub meta: EntityMeta,
}

impl Entity {
    /// Attribute lookup: an explicit `core.`/`custom.`/`meta.` key, else the
    /// bare name in core then custom, else `id`.
    pub fn attr(&self, name: &str) -> Option<Value> {
        if let Some(k) = name.strip_prefix("core.") {
            return self.core.get(k).cloned();
        }
        if let Some(k) = name.strip_prefix("custom.") {
            return self.custom.get(k).cloned();
        }
        if let Some(k) = name.strip_prefix("meta.") {
            return match k {
                "source_table" => Some(Value::text(&self.meta.source_table)),
                "created_at" => Some(Value::text(&self.meta.created_at)),
                "source_rows" => Some(Value::List(
                    self.meta.source_rows.iter().map(|r| Value::Int(*r as i64)).collect(),
                )),
                "conflicts" if !self.meta.conflicts.is_empty() => Some(Value::List(
                    self.meta
                        .conflicts
                        .iter()
                        .map(|c| Value::text(serde_json::to_string(c).unwrap_or_default()))
                        .collect(),
                )),
                _ => None,
            };
        }
        if let Some(v) = self.core.get(name).or_else(|| self.custom.get(name)) {
            return Some(v.clone());
        }
        (name == "id").then(|| Value::text(&self.id))
    }

    /// Flat property map with namespaced keys.
    pub fn properties(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.core {
            out.insert(format!("core.{k}"), v.clone());
        }
        for (k, v) in &self.custom {
            out.insert(format!("custom.{k}"), v.clone());
        }
        for k in ["source_table", "source_rows", "created_at", "conflicts"] {
            if let Some(v) = self.attr(&format!("meta.{k}")) {
                out.insert(format!("meta.{k}"), v);
            }
        }
        out
    }

    /// Inverse of [`Entity::properties`].
    pub fn from_properties(id: &str, entity_type: &str, props: &BTreeMap<String, Value>) -> Result<Entity, KgError> {
        let mut e = Entity {
            id: id.to_string(),
            entity_type: entity_type.to_string(),
            core: BTreeMap::new(),
            custom: BTreeMap::new(),
            meta: EntityMeta {
                source_table: String::new(),
                source_rows: BTreeSet::new(),
                created_at: String::new(),
                conflicts: Vec::new(),
            },
        };
        let bad = |k: &str| KgError::Format(format!("bad property `{k}`"));
        for (k, v) in props {
            if v.is_null() {
                continue;
            }
            if let Some(k) = k.strip_prefix("core.") {
                e.core.insert(k.to_string(), v.clone());
            } else if let Some(k) = k.strip_prefix("custom.") {
                e.custom.insert(k.to_string(), v.clone());
            } else {
                match (k.as_str(), v) {
                    ("meta.source_table", Value::Text(s)) => e.meta.source_table = s.clone(),
                    ("meta.created_at", Value::Text(s)) => e.meta.created_at = s.clone(),
                    ("meta.source_rows", Value::List(xs)) => {
                        for x in xs {
                            match x {
                                Value::Int(i) if *i >= 0 => {
                                    e.meta.source_rows.insert(*i as usize);
                                }
                                _ => return Err(bad(k)),
                            }
                        }
                    }
                    ("meta.conflicts", Value::List(xs)) => {
                        for x in xs {
                            let s = x.as_str().ok_or_else(|| bad(k))?;
                            e.meta.conflicts.push(serde_json::from_str(s).map_err(|_| bad(k))?);
                        }
                    }
                    _ => return Err(bad(k)),
                }
            }
        }
        Ok(e)
    }
}

fn push_conflict(list: &mut Vec<Conflict>, c: Conflict) {
    if !list.contains(&c) {
        list.push(c);
    }
}

fn merge_map(
    prefix: &str,
    into: &mut BTreeMap<String, Value>,
    from: &BTreeMap<String, Value>,
    conflicts: &mut Vec<Conflict>,
) {
    for (k, v) in from {
        match into.get(k) {
            None => {
                into.insert(k.clone(), v.clone());
            }
            Some(kept) if !kept.loose_eq(v) => push_conflict(
                conflicts,
                Conflict {
                    attribute: format!("{prefix}.{k}"),
                    kept: kept.clone(),
                    discarded: v.clone(),
                },
            ),
            Some(_) => {}
        }
    }
}

/// Merges `e2` into `e1`. Values only present in `e2` fill gaps; disagreeing
/// values keep `e1`'s and are logged in `meta.conflicts`.
pub fn merge_entities(e1: &Entity, e2: &Entity) -> Result<Entity, KgError> {
    if e1.id != e2.id || e1.entity_type != e2.entity_type {
        return Err(KgError::IdMismatch(e1.id.clone(), e2.id.clone()));
    }
    let mut out = e1.clone();
    for c in &e2.meta.conflicts {
        push_conflict(&mut out.meta.conflicts, c.clone());
    }
    merge_map("core", &mut out.core, &e2.core, &mut out.meta.conflicts);
    merge_map("custom", &mut out.custom, &e2.custom, &mut out.meta.conflicts);
    out.meta.source_rows.extend(e2.meta.source_rows.iter().copied());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub rules: BTreeSet<String>,
    pub rows: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relationship {
    pub source_id: String,
    pub target_id: String,
    pub rel_type: String,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphRepr {
    entities: BTreeMap<String, Entity>,
    relationships: Vec<Relationship>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(from = "GraphRepr", into = "GraphRepr")]
pub struct KnowledgeGraph {
    entities: BTreeMap<String, Entity>,
    relationships: Vec<Relationship>,
    index: HashMap<(String, String, String), usize>,
}

impl From<GraphRepr> for KnowledgeGraph {
    fn from(r: GraphRepr) -> Self {
        let mut g = KnowledgeGraph {
            entities: r.entities,
            ..Default::default()
        };
        for rel in r.relationships {
            g.push_relationship(rel);
        }
        g
    }
}

impl From<KnowledgeGraph> for GraphRepr {
    fn from(g: KnowledgeGraph) -> Self {
        GraphRepr {
            entities: g.entities,
            relationships: g.relationships,
        }
    }
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.entities == other.entities && self.relationships == other.relationships
    }
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entities(&self) -> &BTreeMap<String, Entity> {
        &self.entities
    }

    pub fn relationships(&self) -> &[Relationship] {
        &self.relationships
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entities.get(id)
    }

    pub fn node_count(&self) -> usize {
        self.entities.len()
    }

    pub fn edge_count(&self) -> usize {
        self.relationships.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Inserts an entity, merging into an existing one with the same id.
    pub fn add_entity(&mut self, e: Entity) -> Result<(), KgError> {
        match self.entities.get(&e.id) {
            Some(existing) => {
                let merged = merge_entities(existing, &e)?;
                self.entities.insert(merged.id.clone(), merged);
            }
            None => {
                self.entities.insert(e.id.clone(), e);
            }
        }
        Ok(())
    }

    fn push_relationship(&mut self, rel: Relationship) {
        let key = (rel.source_id.clone(), rel.target_id.clone(), rel.rel_type.clone());
        match self.index.get(&key) {
            Some(&i) => {
                let p = &mut self.relationships[i].provenance;
                p.rules.extend(rel.provenance.rules);
                p.rows.extend(rel.provenance.rows);
            }
            None => {
                self.index.insert(key, self.relationships.len());
                self.relationships.push(rel);
            }
        }
    }

    /// Adds an edge; an existing (source, target, type) edge absorbs its
    /// provenance instead.
    pub fn add_relationship(&mut self, rel: Relationship) -> Result<(), KgError> {
        for end in [&rel.source_id, &rel.target_id] {
            if !self.entities.contains_key(end) {
                return Err(KgError::DanglingEndpoint(end.clone()));
            }
        }
        self.push_relationship(rel);
        Ok(())
    }

    /// Folds another graph into this one; existing entities win conflicts.
    pub fn merge_graph(&mut self, other: &KnowledgeGraph) -> Result<(), KgError> {
        for e in other.entities.values() {
            self.add_entity(e.clone())?;
        }
        for r in &other.relationships {
            self.add_relationship(r.clone())?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Construction primitives
// ---------------------------------------------------------------------------

/// Splits on any delimiter, trims parts and drops empty ones.
pub fn split_cell(value: &str, delimiters: &[char]) -> Vec<String> {
    value
        .split(|c| delimiters.contains(&c))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// `[namespace:]Type:v1[:v2...]`; values are trimmed, case is preserved.
pub fn format_entity_id(namespace: Option<&str>, entity_type: &str, values: &[String]) -> String {
    let mut parts: Vec<&str> = Vec::with_capacity(values.len() + 2);
    if let Some(ns) = namespace {
        parts.push(ns);
    }
    parts.push(entity_type);
    parts.extend(values.iter().map(|v| v.trim()));
    parts.join(":")
}

/// Row view with column lookup and the `_row` pseudo-column.
#[derive(Debug, Clone, Copy)]
pub struct RowView<'a> {
    pub index: usize,
    pub columns: &'a [String],
    pub values: &'a [Value],
}

impl RowView<'_> {
    pub fn get(&self, column: &str) -> Option<Value> {
        if let Some(i) = self.columns.iter().position(|c| c == column) {
            return self.values.get(i).cloned().filter(|v| !v.is_null());
        }
        (column == ROW_COLUMN).then_some(Value::Int(self.index as i64))
    }
}

fn id_text(v: &Value) -> Option<String> {
    let s = v.render().trim().to_string();
    (!s.is_empty()).then_some(s)
}

pub fn make_entity_id(row: &RowView<'_>, schema: &EntitySchema) -> Result<String, KgError> {
    let values = schema
        .id_columns
        .iter()
        .map(|c| {
            row.get(c)
                .as_ref()
                .and_then(id_text)
                .ok_or_else(|| KgError::MissingIdValue {
                    column: c.clone(),
                    row: row.index,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(format_entity_id(
        schema.namespace.as_deref(),
        &schema.entity_type,
        &values,
    ))
}

fn assemble(
    row: &RowView<'_>,
    schema: &EntitySchema,
    id: String,
    core: BTreeMap<String, Value>,
    table: &str,
    created_at: &str,
) -> Entity {
    let custom = schema
        .attr_columns
        .iter()
        .filter_map(|c| row.get(c).map(|v| (c.clone(), v)))
        .collect();
    Entity {
        id,
        entity_type: schema.entity_type.clone(),
        core,
        custom,
        meta: EntityMeta {
            source_table: table.to_string(),
            source_rows: BTreeSet::from([row.index]),
            created_at: created_at.to_string(),
            conflicts: Vec::new(),
        },
    }
}

/// The entities one schema yields for one row: none when an identifier is
/// missing, one per split part for split schemas, otherwise exactly one.
pub fn extract_entities(row: &RowView<'_>, schema: &EntitySchema, table: &str, created_at: &str) -> Vec<Entity> {
    match &schema.split {
        Some(sp) => {
            let Some(cell) = row.get(&sp.source_column) else {
                return Vec::new();
            };
            split_cell(&cell.render(), &sp.delimiters)
                .into_iter()
                .map(|part| {
                    let id = format_entity_id(
                        schema.namespace.as_deref(),
                        &schema.entity_type,
                        std::slice::from_ref(&part),
                    );
                    let core = BTreeMap::from([(sp.source_column.clone(), Value::Text(part))]);
                    assemble(row, schema, id, core, table, created_at)
                })
                .collect()
        }
        None => match make_entity_id(row, schema) {
            Ok(id) => {
                let core = schema
                    .id_columns
                    .iter()
                    .filter_map(|c| row.get(c).map(|v| (c.clone(), v)))
                    .collect();
                vec![assemble(row, schema, id, core, table, created_at)]
            }
            Err(_) => Vec::new(),
        },
    }
}

fn compare(a: &Value, b: &Value) -> std::cmp::Ordering {
    match (a.as_number(), b.as_number()) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        _ => a.render().cmp(&b.render()),
    }
}

/// Similarity between two string attributes; anything else is `None`.
fn string_similarity(a: &Value, b: &Value, embed: &dyn Embedder) -> Option<f64> {
    let (Value::Text(a), Value::Text(b)) = (a, b) else {
        return None;
    };
    let u = embed.embed(a).ok()?;
    let v = embed.embed(b).ok()?;
    cosine_similarity(&u, &v).ok()
}

/// Evaluates a rule tree; null or missing operands make a leaf false.
pub fn eval_rule_expr(expr: &RuleExpr, src: &Entity, tgt: &Entity, embed: &dyn Embedder) -> bool {
    match expr {
        RuleExpr::AttrCompare { src_attr, op, tgt_attr } => match (src.attr(src_attr), tgt.attr(tgt_attr)) {
            (Some(a), Some(b)) if !a.is_null() && !b.is_null() => op.holds(compare(&a, &b)),
            _ => false,
        },
        RuleExpr::Similarity {
            src_attr,
            tgt_attr,
            threshold,
        } => match (src.attr(src_attr), tgt.attr(tgt_attr)) {
            (Some(a), Some(b)) => {
                string_similarity(&a, &b, embed).is_some_and(|s| s >= threshold.unwrap_or(DEFAULT_THRESHOLD))
            }
            _ => false,
        },
        RuleExpr::And(xs) => xs.iter().all(|x| eval_rule_expr(x, src, tgt, embed)),
        RuleExpr::Or(xs) => xs.iter().any(|x| eval_rule_expr(x, src, tgt, embed)),
    }
}

fn rule_holds(rule: &RelationshipRule, src: &Entity, tgt: &Entity, embed: &dyn Embedder) -> bool {
    rule.expr.as_ref().is_none_or(|e| eval_rule_expr(e, src, tgt, embed))
}

/// Partitions row indexes by the tuple of group-column values; rows with a
/// null group value are left out. Groups come in first-occurrence order.
pub fn group_rows(data: &CleanRows, group_columns: &[String]) -> Vec<(Vec<String>, Vec<usize>)> {
    let mut order: Vec<(Vec<String>, Vec<usize>)> = Vec::new();
    let mut at: HashMap<Vec<String>, usize> = HashMap::new();
    'rows: for (i, values) in data.rows.iter().enumerate() {
        let row = RowView {
            index: i,
            columns: &data.columns,
            values,
        };
        let mut key = Vec::with_capacity(group_columns.len());
        for c in group_columns {
            match row.get(c) {
                Some(v) => key.push(v.render()),
                None => continue 'rows,
            }
        }
        match at.get(&key) {
            Some(&g) => order[g].1.push(i),
            None => {
                at.insert(key.clone(), order.len());
                order.push((key, vec![i]));
            }
        }
    }
    order
}

fn edge(rule: &RelationshipRule, s: &Entity, t: &Entity, rows: &[usize]) -> Relationship {
    Relationship {
        source_id: s.id.clone(),
        target_id: t.id.clone(),
        rel_type: rule.rel_type.clone(),
        provenance: Provenance {
            rules: BTreeSet::from([rule.label().to_string()]),
            rows: rows.iter().copied().collect(),
        },
    }
}

/// Ordered pairs of distinct-typed entities within each row.
pub fn discover_intra_row(
    row_entities: &[Vec<&Entity>],
    rules: &[RelationshipRule],
    embed: &dyn Embedder,
    parallel: bool,
) -> Vec<Relationship> {
    let per_row = |(r, ents): (usize, &Vec<&Entity>)| {
        let mut out = Vec::new();
        for rule in rules.iter().filter(|r| r.match_mode == MatchMode::IntraRow) {
            for s in ents.iter().filter(|e| e.entity_type == rule.source_type) {
                for t in ents.iter().filter(|e| e.entity_type == rule.target_type) {
                    if s.entity_type != t.entity_type && rule_holds(rule, s, t, embed) {
                        out.push(edge(rule, s, t, &[r]));
                    }
                }
            }
        }
        out
    };
    let nested: Vec<Vec<Relationship>> = if parallel {
        row_entities.par_iter().enumerate().map(per_row).collect()
    } else {
        row_entities.iter().enumerate().map(per_row).collect()
    };
    nested.into_iter().flatten().collect()
}

/// Ordered pairs of entities from distinct rows of the same group.
pub fn discover_cross_row(
    data: &CleanRows,
    row_entities: &[Vec<&Entity>],
    rules: &[RelationshipRule],
    embed: &dyn Embedder,
    parallel: bool,
) -> Vec<Relationship> {
    let mut out = Vec::new();
    for rule in rules.iter().filter(|r| r.match_mode == MatchMode::CrossRow) {
        let groups = group_rows(data, &rule.group_columns);
        let per_group = |(_, rows): &(Vec<String>, Vec<usize>)| {
            let mut found = Vec::new();
            for &ri in rows {
                for &rj in rows {
                    if ri == rj {
                        continue;
                    }
                    for s in row_entities[ri].iter().filter(|e| e.entity_type == rule.source_type) {
                        for t in row_entities[rj].iter().filter(|e| e.entity_type == rule.target_type) {
                            if s.id != t.id && rule_holds(rule, s, t, embed) {
                                found.push(edge(rule, s, t, &[ri, rj]));
                            }
                        }
                    }
                }
            }
            found
        };
        let nested: Vec<Vec<Relationship>> = if parallel {
            groups.par_iter().map(per_group).collect()
        } else {
            groups.iter().map(per_group).collect()
        };
        out.extend(nested.into_iter().flatten());
    }
    out
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub created_at: String,
    pub parallel: bool,
    pub strict: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            parallel: true,
            strict: false,
        }
    }
}

/// Builds the graph for one table: extract per row, merge in row order,
/// then run intra-row and cross-row discovery over the merged entities.
pub fn build_graph(
    table: &TableSchema,
    data: &CleanRows,
    config: &KgConfig,
    embed: &dyn Embedder,
    opts: &BuildOptions,
) -> Result<KnowledgeGraph, KgError> {
    let report = validate_config(config, table, opts.strict);
    if !report.ok {
        return Err(KgError::ConfigInvalid(report));
    }
    let extract = |(i, values): (usize, &Vec<Value>)| {
        let row = RowView {
            index: i,
            columns: &data.columns,
            values,
        };
        config
            .entities
            .iter()
            .flat_map(|s| extract_entities(&row, s, &table.table_name, &opts.created_at))
            .collect::<Vec<Entity>>()
    };
    let per_row: Vec<Vec<Entity>> = if opts.parallel {
        data.rows.par_iter().enumerate().map(extract).collect()
    } else {
        data.rows.iter().enumerate().map(extract).collect()
    };

    let mut graph = KnowledgeGraph::new();
    let mut row_ids: Vec<Vec<String>> = Vec::with_capacity(per_row.len());
    for ents in per_row {
        let mut ids: Vec<String> = Vec::with_capacity(ents.len());
        for e in ents {
            if !ids.contains(&e.id) {
                ids.push(e.id.clone());
            }
            graph.add_entity(e)?;
        }
        row_ids.push(ids);
    }

    let row_entities: Vec<Vec<&Entity>> = row_ids
        .iter()
        .map(|ids| ids.iter().map(|id| &graph.entities[id]).collect())
        .collect();
    let mut edges = discover_intra_row(&row_entities, &config.relationships, embed, opts.parallel);
    edges.extend(discover_cross_row(
        data,
        &row_entities,
        &config.relationships,
        embed,
        opts.parallel,
    ));
    for e in edges {
        graph.push_relationship(e);
    }
    Ok(graph)
}

// ---------------------------------------------------------------------------
// Configuration suggestion
// ---------------------------------------------------------------------------

const STRATEGY_PROMPT: &str = include_str!("../assets/prompts/kg_strategy.v1.txt");

/// Asks the LLM for a configuration. A reply that fails to parse or validate
/// gets one corrective retry.
pub fn suggest_config(table: &TableSchema, sample_rows: &[Vec<Value>], llm: &dyn LlmPort) -> Result<KgConfig, KgError> {
    let columns: Vec<String> = table
        .columns
        .iter()
        .map(|c| format!("- {} ({})", c.name, c.inferred_type))
        .collect();
    let sample: Vec<String> = sample_rows
        .iter()
        .take(5)
        .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" | "))
        .collect();
    let prompt = crate::agents::prompts::render(
        STRATEGY_PROMPT,
        &[
            ("table", table.table_name.as_str()),
            ("columns", columns.join("\n").as_str()),
            ("sample", sample.join("\n").as_str()),
        ],
    );
    let mut messages = vec![Message::user(prompt)];
    let mut last_err = KgError::UnparseableSuggestion("no reply".into());
    for _ in 0..2 {
        let reply = llm
            .complete(&ChatRequest::new(messages.clone()))
            .map_err(|e| KgError::LlmUnavailable(e.to_string()))?;
        let feedback = match KgConfig::from_json(&extract_fenced(&reply.text, "json")) {
            Err(KgError::Format(msg)) => {
                last_err = KgError::UnparseableSuggestion(msg.clone());
                format!("The configuration could not be parsed: {msg}. Reply with one JSON document.")
            }
            Err(e) => return Err(e),
            Ok(cfg) => {
                let report = validate_config(&cfg, table, false);
                if report.ok {
                    return Ok(cfg);
                }
                let summary = report.summary();
                last_err = KgError::InvalidSuggestion(report);
                format!("The configuration is invalid: {summary}. Reply with a corrected JSON document.")
            }
        };
        messages.push(Message::assistant(reply.text));
        messages.push(Message::user(feedback));
    }
    Err(last_err)
}

fn type_label(column: &str) -> String {
    let mut out = String::new();
    for part in column
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|p| !p.is_empty())
    {
        let mut chars = part.chars();
        if let Some(c) = chars.next() {
            out.push(c.to_ascii_uppercase());
            out.extend(chars);
        }
    }
    if !out.starts_with(|c: char| c.is_ascii_alphabetic()) {
        out.insert(0, 'E');
    }
    out
}

/// Configuration used when no LLM suggestion is available: one `Record`
/// entity per row carrying every column, plus a subject entity keyed by the
/// first text column and linked to its records.
pub fn default_config(table: &TableSchema) -> KgConfig {
    let all: Vec<String> = table.column_names();
    let mut config = KgConfig {
        entities: vec![EntitySchema {
            entity_type: "Record".into(),
            id_columns: vec![ROW_COLUMN.into()],
            attr_columns: all,
            split: None,
            namespace: Some(type_label(&table.table_name)),
        }],
        relationships: Vec::new(),
    };
    if let Some(subject) = table.columns.iter().find(|c| c.inferred_type == ColumnType::Text) {
        let mut label = type_label(&subject.name);
        if label == "Record" {
            label = "RecordKey".into();
        }
        config.entities.push(EntitySchema {
            entity_type: label.clone(),
            id_columns: vec![subject.name.clone()],
            attr_columns: Vec::new(),
            split: None,
            namespace: Some(type_label(&table.table_name)),
        });
        config.relationships.push(RelationshipRule {
            name: None,
            rel_type: "HAS_RECORD".into(),
            source_type: label,
            target_type: "Record".into(),
            match_mode: MatchMode::IntraRow,
            group_columns: Vec::new(),
            expr: None,
        });
    }
    config
}

impl fmt::Display for KnowledgeGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} entities, {} relationships", self.node_count(), self.edge_count())
    }
}
