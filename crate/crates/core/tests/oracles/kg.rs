//! Brute-force graph construction: rows x schemas for nodes, every ordered
//! pair of (row, entity) x (row, entity) for edges.

use std::collections::{BTreeMap, BTreeSet};

use datafactory_core::ingest::{CleanRows, Column, ColumnType, TableSchema};
use datafactory_core::kgbuild::{
    build_graph, merge_entities, BuildOptions, CmpOp, Conflict, Entity, EntityMeta, EntitySchema, KgConfig,
    KnowledgeGraph, MatchMode, RelationshipRule, RuleExpr, SplitConfig,
};
use datafactory_core::memory::{Embedder, HashEmbedder};
use datafactory_core::value::Value;
use rand::seq::SliceRandom;
use rand::Rng;

const TEXT_POOL: &[&str] = &[
    "red",
    "blue",
    "green",
    "Red",
    "red blue",
    "blue;green",
    "green|red",
    " blue ",
    "a,b",
    "red fox",
    "blue fox",
];

#[derive(Debug, Clone)]
pub struct Case {
    pub schema: TableSchema,
    pub data: CleanRows,
    pub config: KgConfig,
}

fn pick<'a, T>(rng: &mut impl Rng, xs: &'a [T]) -> &'a T {
    xs.choose(rng).expect("non-empty")
}

fn some_columns(rng: &mut impl Rng, cols: &[String], max: usize) -> Vec<String> {
    let n = rng.gen_range(0..=max.min(cols.len()));
    let mut c: Vec<String> = cols.choose_multiple(rng, n).cloned().collect();
    c.sort();
    c
}

fn attr_name(rng: &mut impl Rng, s: &EntitySchema) -> String {
    let mut names: Vec<String> = s.id_columns.iter().chain(&s.attr_columns).cloned().collect();
    if let Some(sp) = &s.split {
        names.push(sp.source_column.clone());
    }
    names.push("id".into());
    names.push("missing".into());
    let n = pick(rng, &names).clone();
    match rng.gen_range(0..6) {
        0 => format!("core.{n}"),
        1 => format!("custom.{n}"),
        _ => n,
    }
}

fn gen_expr(rng: &mut impl Rng, src: &EntitySchema, tgt: &EntitySchema, depth: u32) -> RuleExpr {
    let leaf = depth == 0 || rng.gen_bool(0.55);
    if leaf {
        if rng.gen_bool(0.35) {
            RuleExpr::Similarity {
                src_attr: attr_name(rng, src),
                tgt_attr: attr_name(rng, tgt),
                threshold: *pick(rng, &[None, Some(0.3), Some(0.6), Some(0.95)]),
            }
        } else {
            RuleExpr::AttrCompare {
                src_attr: attr_name(rng, src),
                op: *pick(rng, &[CmpOp::Eq, CmpOp::Gt, CmpOp::Lt, CmpOp::Ge, CmpOp::Le]),
                tgt_attr: attr_name(rng, tgt),
            }
        }
    } else {
        let n = rng.gen_range(1..=3);
        let xs = (0..n).map(|_| gen_expr(rng, src, tgt, depth - 1)).collect();
        if rng.gen_bool(0.5) {
            RuleExpr::And(xs)
        } else {
            RuleExpr::Or(xs)
        }
    }
}

pub fn gen_case(rng: &mut impl Rng) -> Case {
    let ncols = rng.gen_range(1..=6);
    let nrows = rng.gen_range(0..=12);
    let names: Vec<String> = (0..ncols).map(|i| format!("c{i}")).collect();
    let types: Vec<ColumnType> = (0..ncols)
        .map(|_| {
            if rng.gen_bool(0.4) {
                ColumnType::Integer
            } else {
                ColumnType::Text
            }
        })
        .collect();
    let rows: Vec<Vec<Value>> = (0..nrows)
        .map(|_| {
            types
                .iter()
                .map(|t| {
                    if rng.gen_bool(0.12) {
                        Value::Null
                    } else if *t == ColumnType::Integer {
                        Value::Int(rng.gen_range(0..4))
                    } else {
                        Value::text(*pick(rng, TEXT_POOL))
                    }
                })
                .collect()
        })
        .collect();
    let schema = TableSchema {
        table_name: "t".into(),
        columns: names
            .iter()
            .zip(&types)
            .map(|(n, t)| Column::new(n.clone(), *t))
            .collect(),
    };

    let mut pool = names.clone();
    pool.push("_row".into());
    let nschemas = rng.gen_range(1..=3);
    let entities: Vec<EntitySchema> = (0..nschemas)
        .map(|i| {
            let split = rng.gen_bool(0.3);
            let namespace = rng.gen_bool(0.2).then(|| "ns".to_string());
            if split {
                EntitySchema {
                    entity_type: format!("T{i}"),
                    id_columns: Vec::new(),
                    attr_columns: some_columns(rng, &names, 2),
                    split: Some(SplitConfig {
                        source_column: pick(rng, &names).clone(),
                        delimiters: vec![',', ';', '|'],
                    }),
                    namespace,
                }
            } else {
                let mut ids = some_columns(rng, &pool, 2);
                if ids.is_empty() {
                    ids.push(pick(rng, &pool).clone());
                }
                EntitySchema {
                    entity_type: format!("T{i}"),
                    id_columns: ids,
                    attr_columns: some_columns(rng, &names, 2),
                    split: None,
                    namespace,
                }
            }
        })
        .collect();

    let nrules = rng.gen_range(0..=3);
    let mut relationships = Vec::new();
    for r in 0..nrules {
        let s = rng.gen_range(0..nschemas);
        let t = rng.gen_range(0..nschemas);
        let mode = if s == t || rng.gen_bool(0.4) {
            MatchMode::CrossRow
        } else {
            MatchMode::IntraRow
        };
        let group_columns = if mode == MatchMode::CrossRow {
            let mut g = some_columns(rng, &pool, 2);
            if g.is_empty() {
                g.push(pick(rng, &names).clone());
            }
            g
        } else {
            Vec::new()
        };
        let expr = rng.gen_bool(0.75).then(|| gen_expr(rng, &entities[s], &entities[t], 2));
        relationships.push(RelationshipRule {
            name: rng.gen_bool(0.3).then(|| format!("rule{r}")),
            rel_type: pick(rng, &["LINK", "NEAR"]).to_string(),
            source_type: entities[s].entity_type.clone(),
            target_type: entities[t].entity_type.clone(),
            match_mode: mode,
            group_columns,
            expr,
        });
    }
    Case {
        schema,
        data: CleanRows { columns: names, rows },
        config: KgConfig {
            entities,
            relationships,
        },
    }
}

// --- reference semantics ----------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RefNode {
    pub entity_type: String,
    pub core: BTreeMap<String, Value>,
    pub custom: BTreeMap<String, Value>,
    pub rows: BTreeSet<usize>,
}

pub type RefEdges = BTreeMap<(String, String, String), (BTreeSet<String>, BTreeSet<usize>)>;

fn cell(data: &CleanRows, row: usize, col: &str) -> Option<Value> {
    if col == "_row" && !data.columns.iter().any(|c| c == col) {
        return Some(Value::Int(row as i64));
    }
    let i = data.columns.iter().position(|c| c == col)?;
    let v = data.rows[row][i].clone();
    (!v.is_null()).then_some(v)
}

fn text_of(v: &Value) -> String {
    match v {
        Value::Int(i) => i.to_string(),
        Value::Text(s) => s.clone(),
        other => panic!("generator produced {other:?}"),
    }
}

fn make_id(ns: &Option<String>, ty: &str, parts: &[String]) -> String {
    let mut out = String::new();
    if let Some(n) = ns {
        out.push_str(n);
        out.push(':');
    }
    out.push_str(ty);
    for p in parts {
        out.push(':');
        out.push_str(p);
    }
    out
}

/// (id, node) pairs one schema yields for one row.
fn row_entities(data: &CleanRows, row: usize, s: &EntitySchema) -> Vec<(String, RefNode)> {
    let custom: BTreeMap<String, Value> = s
        .attr_columns
        .iter()
        .filter_map(|c| cell(data, row, c).map(|v| (c.clone(), v)))
        .collect();
    let node = |core: BTreeMap<String, Value>| RefNode {
        entity_type: s.entity_type.clone(),
        core,
        custom: custom.clone(),
        rows: BTreeSet::from([row]),
    };
    if let Some(sp) = &s.split {
        let Some(v) = cell(data, row, &sp.source_column) else {
            return Vec::new();
        };
        let text = text_of(&v);
        let mut parts: Vec<String> = vec![String::new()];
        for ch in text.chars() {
            if sp.delimiters.contains(&ch) {
                parts.push(String::new());
            } else {
                parts.last_mut().unwrap().push(ch);
            }
        }
        return parts
            .into_iter()
            .map(|p| p.trim().to_string())
            .filter(|p| !p.is_empty())
            .map(|p| {
                let id = make_id(&s.namespace, &s.entity_type, std::slice::from_ref(&p));
                (id, node(BTreeMap::from([(sp.source_column.clone(), Value::Text(p))])))
            })
            .collect();
    }
    let mut parts = Vec::new();
    let mut core = BTreeMap::new();
    for c in &s.id_columns {
        let Some(v) = cell(data, row, c) else {
            return Vec::new();
        };
        let t = text_of(&v).trim().to_string();
        if t.is_empty() {
            return Vec::new();
        }
        parts.push(t);
        core.insert(c.clone(), v);
    }
    vec![(make_id(&s.namespace, &s.entity_type, &parts), node(core))]
}

fn lookup(id: &str, n: &RefNode, name: &str) -> Option<Value> {
    if let Some(k) = name.strip_prefix("core.") {
        return n.core.get(k).cloned();
    }
    if let Some(k) = name.strip_prefix("custom.") {
        return n.custom.get(k).cloned();
    }
    n.core
        .get(name)
        .or_else(|| n.custom.get(name))
        .cloned()
        .or_else(|| (name == "id").then(|| Value::text(id)))
}

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::Int(i) => Some(*i as f64),
        Value::Text(s) => s.trim().parse::<f64>().ok().filter(|x| x.is_finite()),
        _ => None,
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn holds(e: &RuleExpr, s: (&str, &RefNode), t: (&str, &RefNode), embed: &HashEmbedder) -> bool {
    match e {
        RuleExpr::AttrCompare { src_attr, op, tgt_attr } => {
            let (Some(a), Some(b)) = (lookup(s.0, s.1, src_attr), lookup(t.0, t.1, tgt_attr)) else {
                return false;
            };
            let ord = match (number(&a), number(&b)) {
                (Some(x), Some(y)) => x.partial_cmp(&y).unwrap(),
                _ => text_of(&a).cmp(&text_of(&b)),
            };
            use std::cmp::Ordering::*;
            match op {
                CmpOp::Eq => ord == Equal,
                CmpOp::Gt => ord == Greater,
                CmpOp::Lt => ord == Less,
                CmpOp::Ge => ord != Less,
                CmpOp::Le => ord != Greater,
            }
        }
        RuleExpr::Similarity {
            src_attr,
            tgt_attr,
            threshold,
        } => {
            let (Some(Value::Text(a)), Some(Value::Text(b))) = (lookup(s.0, s.1, src_attr), lookup(t.0, t.1, tgt_attr))
            else {
                return false;
            };
            match (embed.embed(&a), embed.embed(&b)) {
                (Ok(u), Ok(v)) => cosine(&u, &v) >= threshold.unwrap_or(0.8),
                _ => false,
            }
        }
        RuleExpr::And(xs) => xs.iter().all(|x| holds(x, s, t, embed)),
        RuleExpr::Or(xs) => xs.iter().any(|x| holds(x, s, t, embed)),
    }
}

pub fn reference(case: &Case) -> (BTreeMap<String, RefNode>, RefEdges) {
    let data = &case.data;
    let mut nodes: BTreeMap<String, RefNode> = BTreeMap::new();
    let mut per_row: Vec<BTreeSet<String>> = Vec::new();
    for row in 0..data.rows.len() {
        let mut ids = BTreeSet::new();
        for s in &case.config.entities {
            for (id, n) in row_entities(data, row, s) {
                ids.insert(id.clone());
                match nodes.get_mut(&id) {
                    None => {
                        nodes.insert(id, n);
                    }
                    Some(m) => {
                        for (k, v) in n.core {
                            m.core.entry(k).or_insert(v);
                        }
                        for (k, v) in n.custom {
                            m.custom.entry(k).or_insert(v);
                        }
                        m.rows.extend(n.rows);
                    }
                }
            }
        }
        per_row.push(ids);
    }

    let embed = HashEmbedder::default();
    let mut edges: RefEdges = BTreeMap::new();
    let n = data.rows.len();
    for rule in &case.config.relationships {
        let label = rule.name.clone().unwrap_or_else(|| rule.rel_type.clone());
        let group = |r: usize| -> Option<Vec<String>> {
            rule.group_columns
                .iter()
                .map(|c| cell(data, r, c).map(|v| text_of(&v)))
                .collect()
        };
        for i in 0..n {
            for j in 0..n {
                let ok = match rule.match_mode {
                    MatchMode::IntraRow => i == j,
                    MatchMode::CrossRow => i != j && group(i).is_some() && group(i) == group(j),
                };
                if !ok {
                    continue;
                }
                for s in &per_row[i] {
                    for t in &per_row[j] {
                        let (sn, tn) = (&nodes[s], &nodes[t]);
                        if sn.entity_type != rule.source_type || tn.entity_type != rule.target_type {
                            continue;
                        }
                        if rule.match_mode == MatchMode::IntraRow && sn.entity_type == tn.entity_type {
                            continue;
                        }
                        if rule.match_mode == MatchMode::CrossRow && s == t {
                            continue;
                        }
                        if let Some(e) = &rule.expr {
                            if !holds(e, (s, sn), (t, tn), &embed) {
                                continue;
                            }
                        }
                        let entry = edges.entry((s.clone(), t.clone(), rule.rel_type.clone())).or_default();
                        entry.0.insert(label.clone());
                        entry.1.insert(i);
                        entry.1.insert(j);
                    }
                }
            }
        }
    }
    (nodes, edges)
}

pub fn observed(g: &KnowledgeGraph) -> (BTreeMap<String, RefNode>, RefEdges) {
    let nodes = g
        .entities()
        .iter()
        .map(|(id, e)| {
            (
                id.clone(),
                RefNode {
                    entity_type: e.entity_type.clone(),
                    core: e.core.clone(),
                    custom: e.custom.clone(),
                    rows: e.meta.source_rows.clone(),
                },
            )
        })
        .collect();
    let mut edges: RefEdges = BTreeMap::new();
    for r in g.relationships() {
        let key = (r.source_id.clone(), r.target_id.clone(), r.rel_type.clone());
        if edges.contains_key(&key) {
            // the multiset must not contain duplicates of a (source, target, type) key
            edges.insert((key.0, key.1, format!("{}#dup", key.2)), Default::default());
            continue;
        }
        edges.insert(key, (r.provenance.rules.clone(), r.provenance.rows.clone()));
    }
    (nodes, edges)
}

pub fn check_case(seed: u64) -> Result<(), String> {
    let case = gen_case(&mut super::rng(seed));
    let opts = BuildOptions {
        created_at: "2024-01-01T00:00:00Z".into(),
        parallel: seed.is_multiple_of(2),
        strict: false,
    };
    let g = build_graph(&case.schema, &case.data, &case.config, &HashEmbedder::default(), &opts)
        .map_err(|e| format!("build failed: {e}"))?;
    let (want_nodes, want_edges) = reference(&case);
    let (got_nodes, got_edges) = observed(&g);
    if got_nodes != want_nodes {
        return Err(format!("node mismatch\nwant {want_nodes:?}\ngot  {got_nodes:?}"));
    }
    if got_edges != want_edges {
        return Err(format!("edge mismatch\nwant {want_edges:?}\ngot  {got_edges:?}"));
    }
    Ok(())
}

// --- merge laws ---------------------------------------------------------------

fn gen_value(rng: &mut impl Rng) -> Value {
    match rng.gen_range(0..3) {
        0 => Value::Int(rng.gen_range(0..3)),
        1 => Value::Real(rng.gen_range(0..3) as f64),
        _ => Value::text(*pick(rng, &["x", "y", "z"])),
    }
}

fn gen_attrs(rng: &mut impl Rng) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    for k in ["a", "b", "c", "d"] {
        if rng.gen_bool(0.6) {
            out.insert(k.to_string(), gen_value(rng));
        }
    }
    out
}

fn gen_entity(rng: &mut impl Rng) -> Entity {
    Entity {
        id: "T:1".into(),
        entity_type: "T".into(),
        core: gen_attrs(rng),
        custom: gen_attrs(rng),
        meta: EntityMeta {
            source_table: "t".into(),
            source_rows: (0..4).filter(|_| rng.gen_bool(0.5)).collect(),
            created_at: "2024-01-01T00:00:00Z".into(),
            conflicts: Vec::new(),
        },
    }
}

fn same(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Int(_) | Value::Real(_), Value::Int(_) | Value::Real(_)) => number_any(a) == number_any(b),
        _ => a == b,
    }
}

fn number_any(v: &Value) -> Option<f64> {
    match v {
        Value::Int(i) => Some(*i as f64),
        Value::Real(r) => Some(*r),
        _ => None,
    }
}

/// Idempotence, gap filling from the second entity and retention of the
/// first entity's value on disagreement, with the disagreement logged.
pub fn check_merge(seed: u64) -> Result<(), String> {
    let mut rng = super::rng(seed);
    let e1 = gen_entity(&mut rng);
    let e2 = gen_entity(&mut rng);

    let self_merge = merge_entities(&e1, &e1).map_err(|e| e.to_string())?;
    if self_merge != e1 {
        return Err(format!("merge(e, e) != e: {self_merge:?}"));
    }
    let m = merge_entities(&e1, &e2).map_err(|e| e.to_string())?;
    for (prefix, a, b, got) in [
        ("core", &e1.core, &e2.core, &m.core),
        ("custom", &e1.custom, &e2.custom, &m.custom),
    ] {
        let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
        if got.keys().collect::<BTreeSet<_>>() != keys {
            return Err(format!("{prefix} keys differ"));
        }
        for k in keys {
            match (a.get(k), b.get(k)) {
                (None, Some(v)) if got[k] != *v => return Err(format!("{prefix}.{k}: gap not filled")),
                (Some(v), _) if got[k] != *v => return Err(format!("{prefix}.{k}: first value not kept")),
                _ => {}
            }
            let logged = m
                .meta
                .conflicts
                .iter()
                .any(|c: &Conflict| c.attribute == format!("{prefix}.{k}"));
            let disagree = matches!((a.get(k), b.get(k)), (Some(x), Some(y)) if !same(x, y));
            if logged != disagree {
                return Err(format!("{prefix}.{k}: conflict logged={logged} disagree={disagree}"));
            }
        }
    }
    let rows: BTreeSet<usize> = e1.meta.source_rows.union(&e2.meta.source_rows).copied().collect();
    if m.meta.source_rows != rows {
        return Err("source rows are not the union".into());
    }
    let again = merge_entities(&m, &e2).map_err(|e| e.to_string())?;
    if again != m {
        return Err("merging the same entity twice changed the result".into());
    }
    Ok(())
}
