//! Pattern matching and projection.
//!
//! Matching enumerates every assignment of pattern elements to graph
//! elements. No relationship is used twice within one MATCH, which also
//! makes variable-length edges follow simple (edge-distinct) paths.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use super::ast::{AggFunc, CmpOp, Direction, EdgePattern, Expr, NodePattern, Query, StrOp};
use super::QueryError;
use crate::kgbuild::{Entity, KnowledgeGraph, Relationship};
use crate::value::{ResultTable, Value};

#[derive(Debug, Clone, Copy)]
pub struct EvalLimits {
    /// Upper bound on search steps before the query is abandoned.
    pub max_steps: u64,
    /// How many bound entity ids to report for highlighting.
    pub max_bound_ids: usize,
}

impl Default for EvalLimits {
    fn default() -> Self {
        Self {
            max_steps: 5_000_000,
            max_bound_ids: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutput {
    pub table: ResultTable,
    /// Entities bound to named node variables in the returned rows.
    pub bound_ids: Vec<String>,
}

pub fn eval_query(g: &KnowledgeGraph, q: &Query) -> Result<ResultTable, QueryError> {
    eval_query_with(g, q, &EvalLimits::default()).map(|o| o.table)
}

struct Index<'g> {
    nodes: Vec<&'g Entity>,
    edges: Vec<(usize, usize, &'g Relationship)>,
    out: Vec<Vec<usize>>,
    inn: Vec<Vec<usize>>,
    by_label: HashMap<&'g str, Vec<usize>>,
}

impl<'g> Index<'g> {
    fn new(g: &'g KnowledgeGraph) -> Self {
        let nodes: Vec<&Entity> = g.entities().values().collect();
        let pos: HashMap<&str, usize> = nodes.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
        let mut by_label: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, e) in nodes.iter().enumerate() {
            by_label.entry(e.entity_type.as_str()).or_default().push(i);
        }
        let mut out = vec![Vec::new(); nodes.len()];
        let mut inn = vec![Vec::new(); nodes.len()];
        let mut edges = Vec::new();
        for r in g.relationships() {
            let (Some(&s), Some(&t)) = (pos.get(r.source_id.as_str()), pos.get(r.target_id.as_str())) else {
                continue;
            };
            out[s].push(edges.len());
            inn[t].push(edges.len());
            edges.push((s, t, r));
        }
        Self {
            nodes,
            edges,
            out,
            inn,
            by_label,
        }
    }
}

#[derive(Debug)]
struct CNode<'q> {
    slot: usize,
    pat: &'q NodePattern,
}

#[derive(Debug)]
struct CEdge<'q> {
    slot: Option<usize>,
    pat: &'q EdgePattern,
}

#[derive(Debug)]
struct CPath<'q> {
    start: CNode<'q>,
    steps: Vec<(CEdge<'q>, CNode<'q>)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Node(usize),
    Edge(usize),
}

#[derive(Debug, Clone)]
struct Binding {
    nodes: Vec<usize>,
    edges: Vec<usize>,
}

struct Matcher<'g, 'q> {
    ix: &'g Index<'g>,
    paths: Vec<CPath<'q>>,
    nodes: Vec<Option<usize>>,
    edges: Vec<Option<usize>>,
    used: Vec<bool>,
    steps: u64,
    max_steps: u64,
    out: Vec<Binding>,
}

impl<'g, 'q> Matcher<'g, 'q> {
    fn tick(&mut self) -> Result<(), QueryError> {
        self.steps += 1;
        if self.steps > self.max_steps {
            return Err(QueryError::ResourceLimit(self.max_steps));
        }
        Ok(())
    }

    fn node_ok(&self, pat: &NodePattern, n: usize) -> bool {
        let e = self.ix.nodes[n];
        pat.label.as_ref().is_none_or(|l| &e.entity_type == l)
            && pat.props.iter().all(|(k, v)| {
                e.attr(k)
                    .is_some_and(|a| compare(&a, CmpOp::Eq, v) == Value::Bool(true))
            })
    }

    fn neighbors(&self, cur: usize, pat: &EdgePattern) -> Vec<(usize, usize)> {
        let type_ok = |e: usize| pat.rel_type.as_ref().is_none_or(|t| &self.ix.edges[e].2.rel_type == t);
        let mut out = Vec::new();
        if matches!(pat.direction, Direction::Out | Direction::Any) {
            out.extend(
                self.ix.out[cur]
                    .iter()
                    .filter(|e| type_ok(**e))
                    .map(|&e| (e, self.ix.edges[e].1)),
            );
        }
        if matches!(pat.direction, Direction::In | Direction::Any) {
            out.extend(
                self.ix.inn[cur]
                    .iter()
                    .filter(|e| type_ok(**e))
                    // a self-loop was already produced by the outgoing scan
                    .filter(|&&e| pat.direction == Direction::In || self.ix.edges[e].0 != self.ix.edges[e].1)
                    .map(|&e| (e, self.ix.edges[e].0)),
            );
        }
        out
    }

    fn search(&mut self, pi: usize, si: usize, cur: usize) -> Result<(), QueryError> {
        self.tick()?;
        if pi == self.paths.len() {
            self.out.push(Binding {
                nodes: self.nodes.iter().map(|n| n.expect("all node slots bound")).collect(),
                edges: self.edges.iter().map(|e| e.expect("all edge slots bound")).collect(),
            });
            return Ok(());
        }
        if si == 0 {
            let (slot, pat) = (self.paths[pi].start.slot, self.paths[pi].start.pat);
            return match self.nodes[slot] {
                Some(n) => {
                    if self.node_ok(pat, n) {
                        self.search(pi, 1, n)?;
                    }
                    Ok(())
                }
                None => {
                    let candidates: Vec<usize> = match &pat.label {
                        Some(l) => self.ix.by_label.get(l.as_str()).cloned().unwrap_or_default(),
                        None => (0..self.ix.nodes.len()).collect(),
                    };
                    for n in candidates {
                        if self.node_ok(pat, n) {
                            self.nodes[slot] = Some(n);
                            self.search(pi, 1, n)?;
                            self.nodes[slot] = None;
                        }
                    }
                    Ok(())
                }
            };
        }
        if si > self.paths[pi].steps.len() {
            return self.search(pi + 1, 0, 0);
        }
        let epat = self.paths[pi].steps[si - 1].0.pat;
        let eslot = self.paths[pi].steps[si - 1].0.slot;
        match epat.hops {
            None => {
                for (e, next) in self.neighbors(cur, epat) {
                    if self.used[e] {
                        continue;
                    }
                    self.used[e] = true;
                    if let Some(s) = eslot {
                        self.edges[s] = Some(e);
                    }
                    self.enter(pi, si, next)?;
                    if let Some(s) = eslot {
                        self.edges[s] = None;
                    }
                    self.used[e] = false;
                }
                Ok(())
            }
            Some((lo, hi)) => self.walk(pi, si, cur, 0, lo, hi),
        }
    }

    fn walk(&mut self, pi: usize, si: usize, node: usize, depth: u32, lo: u32, hi: u32) -> Result<(), QueryError> {
        self.tick()?;
        if depth >= lo {
            self.enter(pi, si, node)?;
        }
        if depth < hi {
            let epat = self.paths[pi].steps[si - 1].0.pat;
            for (e, next) in self.neighbors(node, epat) {
                if self.used[e] {
                    continue;
                }
                self.used[e] = true;
                self.walk(pi, si, next, depth + 1, lo, hi)?;
                self.used[e] = false;
            }
        }
        Ok(())
    }

    /// Binds (or checks) the node at the end of step `si` and continues.
    fn enter(&mut self, pi: usize, si: usize, n: usize) -> Result<(), QueryError> {
        let (slot, pat) = {
            let c = &self.paths[pi].steps[si - 1].1;
            (c.slot, c.pat)
        };
        if !self.node_ok(pat, n) {
            return Ok(());
        }
        match self.nodes[slot] {
            Some(b) if b == n => self.search(pi, si + 1, n),
            Some(_) => Ok(()),
            None => {
                self.nodes[slot] = Some(n);
                let r = self.search(pi, si + 1, n);
                self.nodes[slot] = None;
                r
            }
        }
    }
}

fn numeric(v: &Value) -> Option<f64> {
    match v {
        Value::Int(_) | Value::Real(_) => v.as_number(),
        _ => None,
    }
}

/// Ordering between two non-null values, or `None` when they are not
/// comparable. Numbers compare numerically, and text holding a number
/// compares numerically against a number.
pub(crate) fn order_values(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => Some(x.cmp(y)),
        (Value::Text(x), Value::Text(y)) => Some(x.cmp(y)),
        (Value::Bool(x), Value::Bool(y)) => Some(x.cmp(y)),
        _ => {
            let (x, y) = match (numeric(a), numeric(b)) {
                (Some(x), Some(y)) => (x, y),
                (Some(x), None) if matches!(b, Value::Text(_)) => (x, b.as_number()?),
                (None, Some(y)) if matches!(a, Value::Text(_)) => (a.as_number()?, y),
                _ => return None,
            };
            x.partial_cmp(&y)
        }
    }
}

/// Three-valued comparison: null operands give null.
pub(crate) fn compare(a: &Value, op: CmpOp, b: &Value) -> Value {
    if a.is_null() || b.is_null() {
        return Value::Null;
    }
    let ord = order_values(a, b);
    let equal = || match ord {
        Some(o) => o == Ordering::Equal,
        None => matches!((a, b), (Value::List(_), Value::List(_))) && a.loose_eq(b),
    };
    match op {
        CmpOp::Eq => Value::Bool(equal()),
        CmpOp::Ne => Value::Bool(!equal()),
        CmpOp::Lt => ord.map_or(Value::Null, |o| Value::Bool(o == Ordering::Less)),
        CmpOp::Gt => ord.map_or(Value::Null, |o| Value::Bool(o == Ordering::Greater)),
        CmpOp::Le => ord.map_or(Value::Null, |o| Value::Bool(o != Ordering::Greater)),
        CmpOp::Ge => ord.map_or(Value::Null, |o| Value::Bool(o != Ordering::Less)),
    }
}

fn truth(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        _ => None,
    }
}

fn edge_text(r: &Relationship) -> String {
    format!("({})-[:{}]->({})", r.source_id, r.rel_type, r.target_id)
}

struct Ctx<'g> {
    ix: &'g Index<'g>,
    vars: HashMap<String, Slot>,
}

impl Ctx<'_> {
    fn value(&self, e: &Expr, b: &Binding) -> Value {
        match e {
            Expr::Lit(v) => v.clone(),
            Expr::Var(v) => match self.vars.get(v) {
                Some(Slot::Node(s)) => Value::text(&self.ix.nodes[b.nodes[*s]].id),
                Some(Slot::Edge(s)) => Value::text(edge_text(self.ix.edges[b.edges[*s]].2)),
                None => Value::Null,
            },
            Expr::Prop(v, k) => match self.vars.get(v) {
                Some(Slot::Node(s)) => self.ix.nodes[b.nodes[*s]].attr(k).unwrap_or_default(),
                Some(Slot::Edge(s)) => {
                    let r = self.ix.edges[b.edges[*s]].2;
                    match k.as_str() {
                        "type" | "rel_type" => Value::text(&r.rel_type),
                        "rules" => Value::List(r.provenance.rules.iter().map(Value::text).collect()),
                        "rows" => Value::List(r.provenance.rows.iter().map(|x| Value::Int(*x as i64)).collect()),
                        _ => Value::Null,
                    }
                }
                None => Value::Null,
            },
            Expr::Cmp(a, op, c) => compare(&self.value(a, b), *op, &self.value(c, b)),
            Expr::Str(a, op, c) => match (self.value(a, b), self.value(c, b)) {
                (Value::Text(x), Value::Text(y)) => Value::Bool(match op {
                    StrOp::Contains => x.contains(&y),
                    StrOp::StartsWith => x.starts_with(&y),
                    StrOp::EndsWith => x.ends_with(&y),
                }),
                _ => Value::Null,
            },
            Expr::IsNull(a, negated) => Value::Bool(self.value(a, b).is_null() != *negated),
            Expr::Not(a) => truth(&self.value(a, b)).map_or(Value::Null, |t| Value::Bool(!t)),
            Expr::And(x, y) => match (truth(&self.value(x, b)), truth(&self.value(y, b))) {
                (Some(false), _) | (_, Some(false)) => Value::Bool(false),
                (Some(true), Some(true)) => Value::Bool(true),
                _ => Value::Null,
            },
            Expr::Or(x, y) => match (truth(&self.value(x, b)), truth(&self.value(y, b))) {
                (Some(true), _) | (_, Some(true)) => Value::Bool(true),
                (Some(false), Some(false)) => Value::Bool(false),
                _ => Value::Null,
            },
            Expr::Agg { .. } => Value::Null,
        }
    }

    fn aggregate(&self, func: AggFunc, distinct: bool, arg: Option<&Expr>, group: &[&Binding]) -> Value {
        let Some(arg) = arg else {
            return Value::Int(group.len() as i64);
        };
        let mut vals: Vec<Value> = group
            .iter()
            .map(|b| self.value(arg, b))
            .filter(|v| !v.is_null())
            .collect();
        if distinct {
            let mut seen = HashSet::new();
            vals.retain(|v| seen.insert(row_key(std::slice::from_ref(v))));
        }
        match func {
            AggFunc::Count => Value::Int(vals.len() as i64),
            AggFunc::Sum => {
                if vals.iter().all(|v| matches!(v, Value::Int(_))) {
                    let mut total: i64 = 0;
                    for v in &vals {
                        if let Value::Int(i) = v {
                            match total.checked_add(*i) {
                                Some(t) => total = t,
                                None => return Value::Real(vals.iter().filter_map(Value::as_number).sum()),
                            }
                        }
                    }
                    Value::Int(total)
                } else {
                    Value::Real(vals.iter().filter_map(Value::as_number).sum())
                }
            }
            AggFunc::Avg => {
                let nums: Vec<f64> = vals.iter().filter_map(Value::as_number).collect();
                if nums.is_empty() {
                    Value::Null
                } else {
                    Value::Real(nums.iter().sum::<f64>() / nums.len() as f64)
                }
            }
            AggFunc::Min => vals.into_iter().min_by(|a, b| a.sort_cmp(b)).unwrap_or_default(),
            AggFunc::Max => vals.into_iter().max_by(|a, b| a.sort_cmp(b)).unwrap_or_default(),
        }
    }
}

fn row_key(values: &[Value]) -> String {
    serde_json::to_string(values).unwrap_or_default()
}

/// Sort comparison with nulls last in both directions.
fn sort_keys(a: &[Value], b: &[Value], desc: &[bool]) -> Ordering {
    for ((x, y), d) in a.iter().zip(b).zip(desc) {
        let o = match (x.is_null(), y.is_null()) {
            (true, true) => Ordering::Equal,
            (true, false) => Ordering::Greater,
            (false, true) => Ordering::Less,
            (false, false) => {
                let o = order_values(x, y).unwrap_or_else(|| x.sort_cmp(y));
                if *d {
                    o.reverse()
                } else {
                    o
                }
            }
        };
        if o != Ordering::Equal {
            return o;
        }
    }
    Ordering::Equal
}

struct Row {
    values: Vec<Value>,
    keys: Vec<Value>,
    binding: Option<usize>,
}

pub fn eval_query_with(g: &KnowledgeGraph, q: &Query, limits: &EvalLimits) -> Result<QueryOutput, QueryError> {
    let ix = Index::new(g);

    // slots: named node variables share a slot; anonymous nodes get their own
    let mut vars: HashMap<String, Slot> = HashMap::new();
    let mut named_order: Vec<Slot> = Vec::new();
    let mut n_nodes = 0;
    let mut n_edges = 0;
    let mut node_slot = |pat: &NodePattern, vars: &mut HashMap<String, Slot>, named: &mut Vec<Slot>| match &pat.var {
        Some(v) => match vars.get(v) {
            Some(Slot::Node(s)) => *s,
            _ => {
                let s = n_nodes;
                n_nodes += 1;
                vars.insert(v.clone(), Slot::Node(s));
                named.push(Slot::Node(s));
                s
            }
        },
        None => {
            n_nodes += 1;
            n_nodes - 1
        }
    };
    let mut paths = Vec::new();
    for p in &q.paths {
        let start = CNode {
            slot: node_slot(&p.start, &mut vars, &mut named_order),
            pat: &p.start,
        };
        let mut steps = Vec::new();
        for (e, n) in &p.steps {
            let slot = e.var.as_ref().map(|v| {
                let s = n_edges;
                n_edges += 1;
                vars.insert(v.clone(), Slot::Edge(s));
                named_order.push(Slot::Edge(s));
                s
            });
            let ce = CEdge { slot, pat: e };
            let cn = CNode {
                slot: node_slot(n, &mut vars, &mut named_order),
                pat: n,
            };
            steps.push((ce, cn));
        }
        paths.push(CPath { start, steps });
    }

    let mut m = Matcher {
        ix: &ix,
        paths,
        nodes: vec![None; n_nodes],
        edges: vec![None; n_edges],
        used: vec![false; ix.edges.len()],
        steps: 0,
        max_steps: limits.max_steps,
        out: Vec::new(),
    };
    m.search(0, 0, 0)?;
    let mut bindings = std::mem::take(&mut m.out);
    let ctx = Ctx { ix: &ix, vars };

    if let Some(w) = &q.where_clause {
        bindings.retain(|b| ctx.value(w, b) == Value::Bool(true));
    }
    let id_key = |b: &Binding| -> Vec<String> {
        named_order
            .iter()
            .map(|s| match s {
                Slot::Node(i) => ix.nodes[b.nodes[*i]].id.clone(),
                Slot::Edge(i) => edge_text(ix.edges[b.edges[*i]].2),
            })
            .collect()
    };
    let mut keyed: Vec<(Vec<String>, Binding)> = bindings.into_iter().map(|b| (id_key(&b), b)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    let bindings: Vec<Binding> = keyed.into_iter().map(|(_, b)| b).collect();

    let columns: Vec<String> = q.returns.iter().map(|r| r.column_name()).collect();
    let aggregating = q.returns.iter().any(|r| r.expr.is_aggregate());
    let sort_ref: Vec<Option<usize>> = q
        .order_by
        .iter()
        .map(|s| {
            if let Expr::Var(v) = &s.expr {
                if let Some(i) = q.returns.iter().position(|r| r.alias.as_deref() == Some(v.as_str())) {
                    return Some(i);
                }
            }
            q.returns.iter().position(|r| r.expr == s.expr)
        })
        .collect();

    let mut rows: Vec<Row> = Vec::new();
    if aggregating {
        let key_items: Vec<usize> = (0..q.returns.len())
            .filter(|i| !q.returns[*i].expr.is_aggregate())
            .collect();
        let mut groups: Vec<(Vec<Value>, Vec<&Binding>)> = Vec::new();
        let mut at: HashMap<String, usize> = HashMap::new();
        for b in &bindings {
            let key: Vec<Value> = key_items.iter().map(|i| ctx.value(&q.returns[*i].expr, b)).collect();
            let k = row_key(&key);
            match at.get(&k) {
                Some(&g) => groups[g].1.push(b),
                None => {
                    at.insert(k, groups.len());
                    groups.push((key, vec![b]));
                }
            }
        }
        if groups.is_empty() && key_items.is_empty() {
            groups.push((Vec::new(), Vec::new()));
        }
        for (key, members) in groups {
            let mut key = key.into_iter();
            let values: Vec<Value> = q
                .returns
                .iter()
                .map(|r| match &r.expr {
                    Expr::Agg { func, distinct, arg } => ctx.aggregate(*func, *distinct, arg.as_deref(), &members),
                    _ => key.next().unwrap_or_default(),
                })
                .collect();
            let keys = sort_ref
                .iter()
                .map(|i| i.map(|i| values[i].clone()).unwrap_or_default())
                .collect();
            rows.push(Row {
                values,
                keys,
                binding: None,
            });
        }
    } else {
        for (bi, b) in bindings.iter().enumerate() {
            let values: Vec<Value> = q.returns.iter().map(|r| ctx.value(&r.expr, b)).collect();
            let keys = q
                .order_by
                .iter()
                .zip(&sort_ref)
                .map(|(s, r)| match r {
                    Some(i) => values[*i].clone(),
                    None => ctx.value(&s.expr, b),
                })
                .collect();
            rows.push(Row {
                values,
                keys,
                binding: Some(bi),
            });
        }
    }

    if q.distinct {
        let mut seen = HashSet::new();
        rows.retain(|r| seen.insert(row_key(&r.values)));
    }
    if !q.order_by.is_empty() {
        let desc: Vec<bool> = q.order_by.iter().map(|s| s.descending).collect();
        rows.sort_by(|a, b| sort_keys(&a.keys, &b.keys, &desc));
    }
    if let Some(n) = q.limit {
        rows.truncate(usize::try_from(n).unwrap_or(usize::MAX));
    }

    let node_slots: Vec<usize> = named_order
        .iter()
        .filter_map(|s| match s {
            Slot::Node(i) => Some(*i),
            Slot::Edge(_) => None,
        })
        .collect();
    let contributing: Vec<&Binding> = if aggregating {
        bindings.iter().collect()
    } else {
        rows.iter().filter_map(|r| r.binding.map(|i| &bindings[i])).collect()
    };
    let mut bound_ids = Vec::new();
    let mut seen = HashSet::new();
    'outer: for b in contributing {
        for s in &node_slots {
            let id = &ix.nodes[b.nodes[*s]].id;
            if seen.insert(id.as_str()) {
                bound_ids.push(id.clone());
                if bound_ids.len() >= limits.max_bound_ids {
                    break 'outer;
                }
            }
        }
    }

    Ok(QueryOutput {
        table: ResultTable {
            columns,
            rows: rows.into_iter().map(|r| r.values).collect(),
        },
        bound_ids,
    })
}
