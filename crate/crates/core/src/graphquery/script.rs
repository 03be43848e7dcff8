//! Batch export as one Cypher statement per line, and the matching reader.

use std::collections::BTreeMap;

use super::ast::{ident, literal, NodePattern};
use super::parser::{Parser, Tok};
use super::QueryError;
use crate::kgbuild::{Entity, KnowledgeGraph, Provenance, Relationship};
use crate::value::Value;

const ID_KEY: &str = "_id";

/// `CREATE` statements for every node (in id order), then `MATCH ... CREATE`
/// statements for every relationship (in graph order).
pub fn emit_batch_script(g: &KnowledgeGraph) -> String {
    let mut out = String::new();
    for e in g.entities().values() {
        let mut props = vec![(ID_KEY.to_string(), Value::text(&e.id))];
        props.extend(e.properties());
        let node = NodePattern {
            var: None,
            label: Some(e.entity_type.clone()),
            props,
        };
        out.push_str(&format!("CREATE {node};\n"));
    }
    for r in g.relationships() {
        let rules = Value::List(r.provenance.rules.iter().map(Value::text).collect());
        let rows = Value::List(r.provenance.rows.iter().map(|x| Value::Int(*x as i64)).collect());
        out.push_str(&format!(
            "MATCH (a {{{ID_KEY}: {}}}), (b {{{ID_KEY}: {}}}) CREATE (a)-[:{} {{rules: {}, rows: {}}}]->(b);\n",
            literal(&Value::text(&r.source_id)),
            literal(&Value::text(&r.target_id)),
            ident(&r.rel_type),
            literal(&rules),
            literal(&rows),
        ));
    }
    out
}

fn take_id(props: &mut Vec<(String, Value)>) -> Result<String, QueryError> {
    let pos = props
        .iter()
        .position(|(k, _)| k == ID_KEY)
        .ok_or_else(|| QueryError::Semantic(format!("node without `{ID_KEY}`")))?;
    match props.remove(pos).1 {
        Value::Text(s) => Ok(s),
        other => Err(QueryError::Semantic(format!(
            "`{ID_KEY}` must be a string, got {other}"
        ))),
    }
}

fn end_statement(p: &mut Parser) -> Result<(), QueryError> {
    p.eat_sym(";");
    if matches!(p.peek(), Tok::Eof) {
        Ok(())
    } else {
        Err(p.err("end of statement"))
    }
}

fn semantic(e: crate::kgbuild::KgError) -> QueryError {
    QueryError::Semantic(e.to_string())
}

/// Reads a script produced by [`emit_batch_script`] back into a graph.
pub fn import_batch_script(script: &str) -> Result<KnowledgeGraph, QueryError> {
    let mut g = KnowledgeGraph::new();
    for line in script.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("//") {
            continue;
        }
        let mut p = Parser::new(line)?;
        if p.eat_kw("create") {
            let mut node = p.node()?;
            end_statement(&mut p)?;
            let label = node
                .label
                .clone()
                .ok_or_else(|| QueryError::Semantic("node without label".into()))?;
            let id = take_id(&mut node.props)?;
            let props: BTreeMap<String, Value> = node.props.into_iter().collect();
            let e = Entity::from_properties(&id, &label, &props).map_err(semantic)?;
            g.add_entity(e).map_err(semantic)?;
        } else {
            p.expect_kw("match")?;
            let mut a = p.node()?;
            p.expect_sym(",")?;
            let mut b = p.node()?;
            p.expect_kw("create")?;
            let (va, vb) = (a.var.clone(), b.var.clone());
            p.expect_sym("(")?;
            let from = p.name("variable")?;
            p.expect_sym(")")?;
            p.expect_sym("-")?;
            p.expect_sym("[")?;
            p.expect_sym(":")?;
            let rel_type = p.name("relationship type")?;
            let props: BTreeMap<String, Value> = p.prop_map()?.into_iter().collect();
            p.expect_sym("]")?;
            p.expect_sym("-")?;
            p.expect_sym(">")?;
            p.expect_sym("(")?;
            let to = p.name("variable")?;
            p.expect_sym(")")?;
            end_statement(&mut p)?;
            let (src, tgt) = match (Some(from), Some(to)) {
                (f, t) if f == va && t == vb => (take_id(&mut a.props)?, take_id(&mut b.props)?),
                (f, t) if f == vb && t == va => (take_id(&mut b.props)?, take_id(&mut a.props)?),
                _ => {
                    return Err(QueryError::Semantic(
                        "relationship endpoints are not matched nodes".into(),
                    ))
                }
            };
            let mut provenance = Provenance::default();
            if let Some(Value::List(xs)) = props.get("rules") {
                provenance.rules = xs.iter().filter_map(|x| x.as_str().map(str::to_string)).collect();
            }
            if let Some(Value::List(xs)) = props.get("rows") {
                provenance.rows = xs
                    .iter()
                    .filter_map(|x| match x {
                        Value::Int(i) if *i >= 0 => Some(*i as usize),
                        _ => None,
                    })
                    .collect();
            }
            g.add_relationship(Relationship {
                source_id: src,
                target_id: tgt,
                rel_type,
                provenance,
            })
            .map_err(semantic)?;
        }
    }
    Ok(g)
}
