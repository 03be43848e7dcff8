//! Embedded property-graph querying over a [`KnowledgeGraph`]: a read-only
//! Cypher subset, schema introspection, subgraph views, and batch export.

pub mod ast;
mod eval;
mod parser;
mod script;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kgbuild::KnowledgeGraph;
use crate::value::Value;

pub use ast::Query;
pub use eval::{eval_query, eval_query_with, EvalLimits, QueryOutput};
pub use script::{emit_batch_script, import_batch_script};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueryError {
    #[error("syntax error at byte {offset}: expected {expected}, found {found}")]
    Syntax {
        offset: usize,
        expected: String,
        found: String,
    },
    #[error("unsupported feature: {0}")]
    UnsupportedFeature(String),
    #[error("invalid query: {0}")]
    Semantic(String),
    #[error("query exceeded the evaluation budget of {0} steps")]
    ResourceLimit(u64),
}

impl QueryError {
    pub(crate) fn syntax(offset: usize, expected: &str, found: &str) -> Self {
        QueryError::Syntax {
            offset,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

/// Parses and checks a query: every variable used outside MATCH must be
/// bound by a pattern, aggregates appear only as whole RETURN items, and
/// ORDER BY under aggregation or DISTINCT refers to returned columns.
pub fn parse_cypher(text: &str) -> Result<Query, QueryError> {
    let q = parser::Parser::new(text)?.parse_query()?;
    check(&q)?;
    Ok(q)
}

fn check(q: &Query) -> Result<(), QueryError> {
    let mut node_vars = BTreeSet::new();
    let mut edge_vars = BTreeSet::new();
    for p in &q.paths {
        let nodes = std::iter::once(&p.start).chain(p.steps.iter().map(|(_, n)| n));
        for n in nodes {
            if let Some(v) = &n.var {
                node_vars.insert(v.as_str());
            }
        }
        for (e, _) in &p.steps {
            if let Some(v) = &e.var {
                if !edge_vars.insert(v.as_str()) {
                    return Err(QueryError::Semantic(format!(
                        "relationship variable `{v}` is bound twice"
                    )));
                }
            }
        }
    }
    if let Some(v) = node_vars.intersection(&edge_vars).next() {
        return Err(QueryError::Semantic(format!(
            "`{v}` is used for both a node and a relationship"
        )));
    }
    let bound = |e: &ast::Expr| -> Result<(), QueryError> {
        let mut vars = Vec::new();
        e.vars(&mut vars);
        match vars
            .into_iter()
            .find(|v| !node_vars.contains(v) && !edge_vars.contains(v))
        {
            Some(v) => Err(QueryError::Semantic(format!("variable `{v}` is not defined in MATCH"))),
            None => Ok(()),
        }
    };
    if let Some(w) = &q.where_clause {
        bound(w)?;
        if w.contains_aggregate() {
            return Err(QueryError::Semantic("aggregates are not allowed in WHERE".into()));
        }
    }
    let mut aliases = BTreeSet::new();
    for r in &q.returns {
        bound(&r.expr)?;
        match &r.expr {
            ast::Expr::Agg { arg: Some(a), .. } if a.contains_aggregate() => {
                return Err(QueryError::Semantic("nested aggregates".into()))
            }
            ast::Expr::Agg { .. } => {}
            e if e.contains_aggregate() => {
                return Err(QueryError::Semantic("an aggregate must be a whole RETURN item".into()))
            }
            _ => {}
        }
        if let Some(a) = &r.alias {
            if !aliases.insert(a.as_str()) {
                return Err(QueryError::Semantic(format!("duplicate column alias `{a}`")));
            }
        }
    }
    let aggregating = q.returns.iter().any(|r| r.expr.is_aggregate());
    for s in &q.order_by {
        let is_alias = matches!(&s.expr, ast::Expr::Var(v) if aliases.contains(v.as_str()));
        let is_item = q.returns.iter().any(|r| r.expr == s.expr);
        if is_alias || is_item {
            continue;
        }
        if aggregating || q.distinct {
            return Err(QueryError::Semantic(format!(
                "ORDER BY {} must refer to a returned column when aggregating or using DISTINCT",
                s.expr
            )));
        }
        if s.expr.contains_aggregate() {
            return Err(QueryError::Semantic("aggregates in ORDER BY must be returned".into()));
        }
        bound(&s.expr)?;
    }
    Ok(())
}

/// Labels, relationship types and property keys present in a graph, plus
/// the (source label, type, target label) patterns that occur.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GraphSchema {
    pub labels: BTreeSet<String>,
    pub rel_types: BTreeSet<String>,
    pub property_keys: BTreeMap<String, BTreeSet<String>>,
    pub patterns: BTreeSet<(String, String, String)>,
    pub node_counts: BTreeMap<String, usize>,
    pub edge_counts: BTreeMap<String, usize>,
}

impl GraphSchema {
    /// Text form used in prompts.
    pub fn render(&self) -> String {
        if self.labels.is_empty() {
            return "(empty graph)".into();
        }
        let mut out = String::from("Node labels:\n");
        for l in &self.labels {
            let keys: Vec<&str> = self
                .property_keys
                .get(l)
                .map(|ks| {
                    ks.iter()
                        .map(String::as_str)
                        .filter(|k| !k.starts_with("meta."))
                        .collect()
                })
                .unwrap_or_default();
            out.push_str(&format!(
                "- {l} ({} nodes) properties: {}\n",
                self.node_counts.get(l).copied().unwrap_or(0),
                keys.join(", ")
            ));
        }
        out.push_str("Relationship types:\n");
        for t in &self.rel_types {
            out.push_str(&format!(
                "- {t} ({} edges)\n",
                self.edge_counts.get(t).copied().unwrap_or(0)
            ));
        }
        out.push_str("Patterns:\n");
        for (s, t, d) in &self.patterns {
            out.push_str(&format!("- (:{s})-[:{t}]->(:{d})\n"));
        }
        out
    }
}

pub fn introspect(g: &KnowledgeGraph) -> GraphSchema {
    let mut s = GraphSchema::default();
    for e in g.entities().values() {
        s.labels.insert(e.entity_type.clone());
        *s.node_counts.entry(e.entity_type.clone()).or_default() += 1;
        s.property_keys
            .entry(e.entity_type.clone())
            .or_default()
            .extend(e.properties().into_keys());
    }
    for r in g.relationships() {
        s.rel_types.insert(r.rel_type.clone());
        *s.edge_counts.entry(r.rel_type.clone()).or_default() += 1;
        let label = |id: &str| g.entity(id).map(|e| e.entity_type.clone()).unwrap_or_default();
        s.patterns
            .insert((label(&r.source_id), r.rel_type.clone(), label(&r.target_id)));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewNode {
    pub id: String,
    pub label: String,
    pub properties: BTreeMap<String, Value>,
    pub highlighted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEdge {
    pub source: String,
    pub target: String,
    pub rel_type: String,
    pub highlighted: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SubgraphView {
    pub nodes: Vec<ViewNode>,
    pub edges: Vec<ViewEdge>,
}

pub const MAX_SUBGRAPH_RADIUS: usize = 3;

/// Nodes within `radius` undirected hops of the given entities, and the
/// edges among them. Unknown ids are ignored; radius is capped at 3.
pub fn extract_subgraph(g: &KnowledgeGraph, bound_ids: &[String], radius: usize) -> SubgraphView {
    let radius = radius.min(MAX_SUBGRAPH_RADIUS);
    let mut adj: HashMap<&str, Vec<&str>> = HashMap::new();
    for r in g.relationships() {
        adj.entry(&r.source_id).or_default().push(&r.target_id);
        adj.entry(&r.target_id).or_default().push(&r.source_id);
    }
    let seeds: BTreeSet<&str> = bound_ids
        .iter()
        .map(String::as_str)
        .filter(|id| g.entity(id).is_some())
        .collect();
    let mut dist: HashMap<&str, usize> = seeds.iter().map(|s| (*s, 0)).collect();
    let mut queue: VecDeque<&str> = seeds.iter().copied().collect();
    while let Some(n) = queue.pop_front() {
        let d = dist[n];
        if d == radius {
            continue;
        }
        for m in adj.get(n).into_iter().flatten() {
            if !dist.contains_key(m) {
                dist.insert(m, d + 1);
                queue.push_back(m);
            }
        }
    }
    let nodes = g
        .entities()
        .values()
        .filter(|e| dist.contains_key(e.id.as_str()))
        .map(|e| ViewNode {
            id: e.id.clone(),
            label: e.entity_type.clone(),
            properties: e.properties(),
            highlighted: seeds.contains(e.id.as_str()),
        })
        .collect();
    let edges = g
        .relationships()
        .iter()
        .filter(|r| dist.contains_key(r.source_id.as_str()) && dist.contains_key(r.target_id.as_str()))
        .map(|r| ViewEdge {
            source: r.source_id.clone(),
            target: r.target_id.clone(),
            rel_type: r.rel_type.clone(),
            highlighted: seeds.contains(r.source_id.as_str()) && seeds.contains(r.target_id.as_str()),
        })
        .collect();
    SubgraphView { nodes, edges }
}

#[cfg(test)]
mod tests {
    use super::ast::*;
    use super::*;

    #[test]
    fn parses_spec_examples() {
        let q = parse_cypher("MATCH (a:Person)-[:USES]->(t:Tech) RETURN a.name").unwrap();
        assert_eq!(q.paths.len(), 1);
        assert_eq!(q.paths[0].steps.len(), 1);
        assert_eq!(q.paths[0].steps[0].0.direction, Direction::Out);
        assert_eq!(q.paths[0].start.label.as_deref(), Some("Person"));

        let q = parse_cypher("MATCH (a)-[*1..3]->(b) RETURN count(b)").unwrap();
        assert_eq!(q.paths[0].steps[0].0.hops, Some((1, 3)));

        assert!(matches!(
            parse_cypher("CREATE (n)"),
            Err(QueryError::UnsupportedFeature(_))
        ));
        assert!(matches!(
            parse_cypher("MATCH (a) MATCH (b) RETURN a"),
            Err(QueryError::UnsupportedFeature(_))
        ));
        assert!(matches!(
            parse_cypher("MATCH (a)-[r*1..2]->(b) RETURN a"),
            Err(QueryError::UnsupportedFeature(_))
        ));
        assert!(matches!(
            parse_cypher("MATCH (a)-[*0..2]->(b) RETURN a"),
            Err(QueryError::Syntax { .. })
        ));
        assert!(matches!(
            parse_cypher("MATCH (a)-[*1..9]->(b) RETURN a"),
            Err(QueryError::Syntax { .. })
        ));
        assert!(matches!(
            parse_cypher("MATCH (a) RETURN b"),
            Err(QueryError::Semantic(_))
        ));
        assert!(matches!(
            parse_cypher("MATCH (a) WHERE count(a) > 1 RETURN a"),
            Err(QueryError::Semantic(_))
        ));
    }

    #[test]
    fn syntax_errors_cite_offsets() {
        match parse_cypher("MATCH (a:Person RETURN a") {
            Err(QueryError::Syntax { offset, expected, .. }) => {
                assert_eq!(offset, 16);
                assert_eq!(expected, "')'");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn extended_syntax() {
        let q = parse_cypher(
            "match (p:Person {name: 'Ann', age: -3})<-[r:KNOWS]-(q) where p.name starts with 'A' \
             and not q.x is null or q.`core.y` <> 2.5 return distinct p.name as n, count(*) \
             order by n desc, count(*) limit 5;",
        )
        .unwrap();
        assert!(q.distinct);
        assert_eq!(q.limit, Some(5));
        assert_eq!(q.order_by.len(), 2);
        assert_eq!(q.paths[0].start.props[1], ("age".to_string(), Value::Int(-3)));
        let printed = q.to_string();
        assert_eq!(parse_cypher(&printed).unwrap(), q, "{printed}");
    }
}
