//! Reference matcher for random in-grammar queries. Bindings are grown one
//! pattern element at a time as a relation (a list of partial bindings),
//! with three-valued filtering and grouping done over plain values.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use datafactory_core::graphquery::{eval_query_with, parse_cypher, EvalLimits};
use datafactory_core::kgbuild::{Entity, EntityMeta, KnowledgeGraph, Provenance, Relationship};
use datafactory_core::value::Value;
use rand::seq::SliceRandom;
use rand::Rng;

const LABELS: &[&str] = &["A", "B", "C"];
const TYPES: &[&str] = &["R", "S"];
const TEXTS: &[&str] = &["x", "y", "z", "xy"];
const BINDING_CAP: usize = 200_000;

pub fn gen_graph(rng: &mut impl Rng) -> KnowledgeGraph {
    let n = rng.gen_range(1..=50);
    let mut g = KnowledgeGraph::new();
    for i in 0..n {
        let mut custom = BTreeMap::new();
        if rng.gen_bool(0.8) {
            custom.insert("n".to_string(), Value::Int(rng.gen_range(0..5)));
        }
        if rng.gen_bool(0.7) {
            custom.insert("s".to_string(), Value::text(*TEXTS.choose(rng).unwrap()));
        }
        let label = *LABELS.choose(rng).unwrap();
        g.add_entity(Entity {
            id: format!("{label}:{i}"),
            entity_type: label.to_string(),
            core: BTreeMap::new(),
            custom,
            meta: EntityMeta {
                source_table: "t".into(),
                source_rows: BTreeSet::from([i]),
                created_at: String::new(),
                conflicts: Vec::new(),
            },
        })
        .unwrap();
    }
    let ids: Vec<String> = g.entities().keys().cloned().collect();
    let m = rng.gen_range(0..=(3 * n).min(150));
    for _ in 0..m {
        g.add_relationship(Relationship {
            source_id: ids.choose(rng).unwrap().clone(),
            target_id: ids.choose(rng).unwrap().clone(),
            rel_type: TYPES.choose(rng).unwrap().to_string(),
            provenance: Provenance::default(),
        })
        .unwrap();
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dir {
    Out,
    In,
    Any,
}

#[derive(Debug, Clone)]
pub struct NodeP {
    /// Index into the node slots of the query.
    pub slot: usize,
    pub label: Option<&'static str>,
    pub n_eq: Option<i64>,
}

#[derive(Debug, Clone)]
pub struct EdgeP {
    pub var: Option<usize>,
    pub rel_type: Option<&'static str>,
    pub dir: Dir,
    pub hops: Option<(u32, u32)>,
}

#[derive(Debug, Clone)]
pub enum Cond {
    NumCmp(usize, &'static str, i64),
    TextEq(usize, &'static str),
    StartsWith(usize, &'static str),
    NIsNull(usize, bool),
    Not(Box<Cond>),
    And(Box<Cond>, Box<Cond>),
    Or(Box<Cond>, Box<Cond>),
}

#[derive(Debug, Clone)]
pub enum Item {
    NodeId(usize),
    Prop(usize, &'static str),
    EdgeType(usize),
    CountStar,
    Count(usize),
    Sum(usize),
    Min(usize),
    Max(usize),
}

impl Item {
    fn is_agg(&self) -> bool {
        matches!(
            self,
            Item::CountStar | Item::Count(_) | Item::Sum(_) | Item::Min(_) | Item::Max(_)
        )
    }
}

#[derive(Debug, Clone)]
pub struct Q {
    pub paths: Vec<(NodeP, Vec<(EdgeP, NodeP)>)>,
    /// Slots that have a variable name (named slots are `v{slot}`).
    pub named: Vec<bool>,
    pub n_edges: usize,
    pub cond: Option<Cond>,
    pub distinct: bool,
    pub items: Vec<Item>,
}

fn node_text(q: &Q, p: &NodeP, seen: &mut BTreeSet<usize>) -> String {
    let mut s = String::from("(");
    if q.named[p.slot] {
        s += &format!("v{}", p.slot);
    }
    // repeated variables restate no label or properties
    if seen.insert(p.slot) {
        if let Some(l) = p.label {
            s += &format!(":{l}");
        }
        if let Some(k) = p.n_eq {
            s += &format!(" {{n: {k}}}");
        }
    }
    s.push(')');
    s
}

fn cond_text(c: &Cond) -> String {
    match c {
        Cond::NumCmp(v, op, k) => format!("v{v}.n {op} {k}"),
        Cond::TextEq(v, t) => format!("v{v}.s = '{t}'"),
        Cond::StartsWith(v, t) => format!("v{v}.s STARTS WITH '{t}'"),
        Cond::NIsNull(v, neg) => format!("v{v}.n IS {}NULL", if *neg { "NOT " } else { "" }),
        Cond::Not(a) => format!("NOT ({})", cond_text(a)),
        Cond::And(a, b) => format!("({}) AND ({})", cond_text(a), cond_text(b)),
        Cond::Or(a, b) => format!("({}) OR ({})", cond_text(a), cond_text(b)),
    }
}

fn item_text(i: &Item) -> String {
    match i {
        Item::NodeId(v) => format!("v{v}"),
        Item::Prop(v, p) => format!("v{v}.{p}"),
        Item::EdgeType(e) => format!("e{e}.type"),
        Item::CountStar => "count(*)".into(),
        Item::Count(v) => format!("count(v{v}.n)"),
        Item::Sum(v) => format!("sum(v{v}.n)"),
        Item::Min(v) => format!("min(v{v}.n)"),
        Item::Max(v) => format!("max(v{v}.n)"),
    }
}

pub fn query_text(q: &Q) -> String {
    let mut seen = BTreeSet::new();
    let paths: Vec<String> = q
        .paths
        .iter()
        .map(|(start, steps)| {
            let mut s = node_text(q, start, &mut seen);
            for (e, n) in steps {
                let mut inner = String::new();
                if let Some(v) = e.var {
                    inner += &format!("e{v}");
                }
                if let Some(t) = e.rel_type {
                    inner += &format!(":{t}");
                }
                if let Some((lo, hi)) = e.hops {
                    inner += &format!("*{lo}..{hi}");
                }
                let body = if inner.is_empty() {
                    String::new()
                } else {
                    format!("[{inner}]")
                };
                s += &match e.dir {
                    Dir::Out => format!("-{body}->"),
                    Dir::In => format!("<-{body}-"),
                    Dir::Any => format!("-{body}-"),
                };
                s += &node_text(q, n, &mut seen);
            }
            s
        })
        .collect();
    let mut text = format!("MATCH {}", paths.join(", "));
    if let Some(c) = &q.cond {
        text += &format!(" WHERE {}", cond_text(c));
    }
    let items: Vec<String> = q.items.iter().map(item_text).collect();
    text += &format!(
        " RETURN {}{}",
        if q.distinct { "DISTINCT " } else { "" },
        items.join(", ")
    );
    text
}

fn gen_cond(rng: &mut impl Rng, vars: &[usize], depth: u32) -> Cond {
    let v = *vars.choose(rng).unwrap();
    if depth == 0 || rng.gen_bool(0.5) {
        return match rng.gen_range(0..4) {
            0 => Cond::NumCmp(
                v,
                ["=", "<>", "<", ">", "<=", ">="].choose(rng).unwrap(),
                rng.gen_range(0..5),
            ),
            1 => Cond::TextEq(v, TEXTS.choose(rng).unwrap()),
            2 => Cond::StartsWith(v, ["x", "y"].choose(rng).unwrap()),
            _ => Cond::NIsNull(v, rng.gen_bool(0.5)),
        };
    }
    match rng.gen_range(0..3) {
        0 => Cond::Not(Box::new(gen_cond(rng, vars, depth - 1))),
        1 => Cond::And(
            Box::new(gen_cond(rng, vars, depth - 1)),
            Box::new(gen_cond(rng, vars, depth - 1)),
        ),
        _ => Cond::Or(
            Box::new(gen_cond(rng, vars, depth - 1)),
            Box::new(gen_cond(rng, vars, depth - 1)),
        ),
    }
}

pub fn gen_query(rng: &mut impl Rng) -> Q {
    let total_edges = rng.gen_range(0..=3);
    let second = total_edges >= 1 && rng.gen_bool(0.25);
    let first_len = if second {
        rng.gen_range(0..total_edges)
    } else {
        total_edges
    };
    let lens = if second {
        vec![first_len, total_edges - first_len]
    } else {
        vec![first_len]
    };

    let mut named: Vec<bool> = Vec::new();
    let mut n_edges = 0;
    let new_node = |rng: &mut rand_chacha::ChaCha8Rng, named: &mut Vec<bool>, reuse: bool| -> NodeP {
        let existing: Vec<usize> = (0..named.len()).filter(|i| named[*i]).collect();
        if reuse && !existing.is_empty() && rng.gen_bool(0.2) {
            return NodeP {
                slot: *existing.choose(rng).unwrap(),
                label: None,
                n_eq: None,
            };
        }
        let slot = named.len();
        named.push(rng.gen_bool(0.8));
        NodeP {
            slot,
            label: rng.gen_bool(0.5).then(|| *LABELS.choose(rng).unwrap()),
            n_eq: rng.gen_bool(0.15).then(|| rng.gen_range(0..5)),
        }
    };
    let mut rng2 = rand_chacha::ChaCha8Rng::seed_from_u64(rng.gen());
    let mut paths = Vec::new();
    for (pi, len) in lens.into_iter().enumerate() {
        let start = new_node(&mut rng2, &mut named, pi > 0);
        let mut steps = Vec::new();
        for _ in 0..len {
            let hops = rng2.gen_bool(0.35).then(|| {
                let lo = rng2.gen_range(1..=2);
                (lo, rng2.gen_range(lo..=3))
            });
            let var = (hops.is_none() && rng2.gen_bool(0.5)).then(|| {
                n_edges += 1;
                n_edges - 1
            });
            let e = EdgeP {
                var,
                rel_type: rng2.gen_bool(0.5).then(|| *TYPES.choose(&mut rng2).unwrap()),
                dir: *[Dir::Out, Dir::In, Dir::Any].choose(&mut rng2).unwrap(),
                hops,
            };
            steps.push((e, new_node(&mut rng2, &mut named, true)));
        }
        paths.push((start, steps));
    }
    // at least one named node so the query can return something
    if !named.iter().any(|n| *n) {
        named[0] = true;
    }
    let vars: Vec<usize> = (0..named.len()).filter(|i| named[*i]).collect();
    let cond = rng.gen_bool(0.5).then(|| gen_cond(rng, &vars, 2));
    let plain = |rng: &mut dyn rand::RngCore| -> Item {
        let v = *vars.choose(rng).unwrap();
        match rng.gen_range(0..4) {
            0 => Item::NodeId(v),
            1 => Item::Prop(v, "n"),
            2 => Item::Prop(v, "s"),
            _ if n_edges > 0 => Item::EdgeType(rng.gen_range(0..n_edges)),
            _ => Item::NodeId(v),
        }
    };
    let mut items = Vec::new();
    let aggregate = rng.gen_bool(0.3);
    if aggregate {
        if rng.gen_bool(0.5) {
            items.push(plain(rng));
        }
        let v = *vars.choose(rng).unwrap();
        items.push(match rng.gen_range(0..5) {
            0 => Item::CountStar,
            1 => Item::Count(v),
            2 => Item::Sum(v),
            3 => Item::Min(v),
            _ => Item::Max(v),
        });
    } else {
        for _ in 0..rng.gen_range(1..=3) {
            items.push(plain(rng));
        }
    }
    // duplicate return columns would need aliases
    let mut seen = BTreeSet::new();
    items.retain(|i| seen.insert(item_text(i)));
    Q {
        paths,
        named,
        n_edges,
        cond,
        distinct: !aggregate && rng.gen_bool(0.2),
        items,
    }
}

use rand::SeedableRng;

// --- reference evaluation ---------------------------------------------------------

struct G<'a> {
    nodes: Vec<&'a Entity>,
    edges: Vec<(usize, usize, &'a str)>,
}

#[derive(Clone)]
struct B {
    nodes: Vec<Option<usize>>,
    edge_vars: Vec<Option<usize>>,
    used: BTreeSet<usize>,
}

fn node_matches(g: &G, p: &NodeP, n: usize) -> bool {
    let e = g.nodes[n];
    p.label.is_none_or(|l| e.entity_type == l) && p.n_eq.is_none_or(|k| e.custom.get("n") == Some(&Value::Int(k)))
}

/// Single edge moves from `cur` as (edge, next node).
fn moves(g: &G, cur: usize, e: &EdgeP) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, &(s, t, ty)) in g.edges.iter().enumerate() {
        if e.rel_type.is_some_and(|want| want != ty) {
            continue;
        }
        let fwd = s == cur && matches!(e.dir, Dir::Out | Dir::Any);
        let back = t == cur && matches!(e.dir, Dir::In | Dir::Any);
        if fwd {
            out.push((i, t));
        }
        if back && !(fwd && s == t) {
            out.push((i, s));
        }
    }
    out
}

/// Edge-distinct walks of exactly `len` edges from `cur`, avoiding `used`.
fn trails(g: &G, cur: usize, e: &EdgeP, len: u32, used: &BTreeSet<usize>) -> Vec<(Vec<usize>, usize)> {
    let mut frontier = vec![(Vec::new(), cur)];
    for _ in 0..len {
        let mut next = Vec::new();
        for (path, at) in frontier {
            for (edge, to) in moves(g, at, e) {
                if used.contains(&edge) || path.contains(&edge) {
                    continue;
                }
                let mut p = path.clone();
                p.push(edge);
                next.push((p, to));
            }
        }
        frontier = next;
    }
    frontier
}

fn bind_node(g: &G, b: &B, p: &NodeP, n: usize) -> Option<B> {
    if !node_matches(g, p, n) {
        return None;
    }
    match b.nodes[p.slot] {
        Some(m) if m != n => None,
        _ => {
            let mut b = b.clone();
            b.nodes[p.slot] = Some(n);
            Some(b)
        }
    }
}

fn bindings(g: &G, q: &Q) -> Option<Vec<B>> {
    let mut rel = vec![B {
        nodes: vec![None; q.named.len()],
        edge_vars: vec![None; q.n_edges],
        used: BTreeSet::new(),
    }];
    for (start, steps) in &q.paths {
        let mut next = Vec::new();
        for b in &rel {
            match b.nodes[start.slot] {
                Some(n) => next.extend(bind_node(g, b, start, n)),
                None => next.extend((0..g.nodes.len()).filter_map(|n| bind_node(g, b, start, n))),
            }
        }
        rel = next;
        let mut cur_slot = start.slot;
        for (e, np) in steps {
            let mut next = Vec::new();
            for b in &rel {
                let cur = b.nodes[cur_slot].expect("bound");
                let (lo, hi) = e.hops.unwrap_or((1, 1));
                for len in lo..=hi {
                    for (path, end) in trails(g, cur, e, len, &b.used) {
                        if let Some(mut nb) = bind_node(g, b, np, end) {
                            nb.used.extend(path.iter().copied());
                            if let Some(v) = e.var {
                                nb.edge_vars[v] = Some(path[0]);
                            }
                            next.push(nb);
                        }
                    }
                }
                if next.len() > BINDING_CAP {
                    return None;
                }
            }
            rel = next;
            cur_slot = np.slot;
        }
        if rel.len() > BINDING_CAP {
            return None;
        }
    }
    Some(rel)
}

fn prop(g: &G, b: &B, v: usize, p: &str) -> Value {
    g.nodes[b.nodes[v].unwrap()]
        .custom
        .get(p)
        .cloned()
        .unwrap_or(Value::Null)
}

/// Kleene logic: None is unknown.
fn truth(g: &G, b: &B, c: &Cond) -> Option<bool> {
    match c {
        Cond::NumCmp(v, op, k) => match prop(g, b, *v, "n") {
            Value::Int(x) => Some(match *op {
                "=" => x == *k,
                "<>" => x != *k,
                "<" => x < *k,
                ">" => x > *k,
                "<=" => x <= *k,
                _ => x >= *k,
            }),
            _ => None,
        },
        Cond::TextEq(v, t) => match prop(g, b, *v, "s") {
            Value::Text(s) => Some(s == *t),
            _ => None,
        },
        Cond::StartsWith(v, t) => match prop(g, b, *v, "s") {
            Value::Text(s) => Some(s.starts_with(t)),
            _ => None,
        },
        Cond::NIsNull(v, neg) => Some(prop(g, b, *v, "n").is_null() != *neg),
        Cond::Not(a) => truth(g, b, a).map(|x| !x),
        Cond::And(a, c) => match (truth(g, b, a), truth(g, b, c)) {
            (Some(false), _) | (_, Some(false)) => Some(false),
            (Some(true), Some(true)) => Some(true),
            _ => None,
        },
        Cond::Or(a, c) => match (truth(g, b, a), truth(g, b, c)) {
            (Some(true), _) | (_, Some(true)) => Some(true),
            (Some(false), Some(false)) => Some(false),
            _ => None,
        },
    }
}

fn plain_value(g: &G, b: &B, i: &Item) -> Value {
    match i {
        Item::NodeId(v) => Value::text(&g.nodes[b.nodes[*v].unwrap()].id),
        Item::Prop(v, p) => prop(g, b, *v, p),
        Item::EdgeType(e) => Value::text(g.edges[b.edge_vars[*e].unwrap()].2),
        _ => unreachable!(),
    }
}

fn agg_value(g: &G, group: &[&B], i: &Item) -> Value {
    let ns = |v: usize| -> Vec<i64> {
        group
            .iter()
            .filter_map(|b| match prop(g, b, v, "n") {
                Value::Int(x) => Some(x),
                _ => None,
            })
            .collect()
    };
    match i {
        Item::CountStar => Value::Int(group.len() as i64),
        Item::Count(v) => Value::Int(ns(*v).len() as i64),
        Item::Sum(v) => Value::Int(ns(*v).iter().sum()),
        Item::Min(v) => ns(*v).into_iter().min().map_or(Value::Null, Value::Int),
        Item::Max(v) => ns(*v).into_iter().max().map_or(Value::Null, Value::Int),
        _ => unreachable!(),
    }
}

fn key(row: &[Value]) -> String {
    serde_json::to_string(row).unwrap()
}

/// Expected rows, or `None` when the case is too large to enumerate.
pub fn reference_rows(graph: &KnowledgeGraph, q: &Q) -> Option<Vec<Vec<Value>>> {
    let nodes: Vec<&Entity> = graph.entities().values().collect();
    let pos: HashMap<&str, usize> = nodes.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
    let edges = graph
        .relationships()
        .iter()
        .map(|r| {
            (
                pos[r.source_id.as_str()],
                pos[r.target_id.as_str()],
                r.rel_type.as_str(),
            )
        })
        .collect();
    let g = G { nodes, edges };
    let mut bs = bindings(&g, q)?;
    if let Some(c) = &q.cond {
        bs.retain(|b| truth(&g, b, c) == Some(true));
    }
    let mut rows: Vec<Vec<Value>> = if q.items.iter().any(Item::is_agg) {
        let mut groups: BTreeMap<String, (Vec<Value>, Vec<&B>)> = BTreeMap::new();
        for b in &bs {
            let k: Vec<Value> = q
                .items
                .iter()
                .filter(|i| !i.is_agg())
                .map(|i| plain_value(&g, b, i))
                .collect();
            groups.entry(key(&k)).or_insert_with(|| (k, Vec::new())).1.push(b);
        }
        if groups.is_empty() && q.items.iter().all(Item::is_agg) {
            groups.insert(String::new(), (Vec::new(), Vec::new()));
        }
        groups
            .into_values()
            .map(|(k, members)| {
                let mut k = k.into_iter();
                q.items
                    .iter()
                    .map(|i| {
                        if i.is_agg() {
                            agg_value(&g, &members, i)
                        } else {
                            k.next().unwrap()
                        }
                    })
                    .collect()
            })
            .collect()
    } else {
        bs.iter()
            .map(|b| q.items.iter().map(|i| plain_value(&g, b, i)).collect())
            .collect()
    };
    if q.distinct {
        let mut seen = BTreeSet::new();
        rows.retain(|r| seen.insert(key(r)));
    }
    Some(rows)
}

fn multiset(rows: &[Vec<Value>]) -> Vec<String> {
    let mut k: Vec<String> = rows.iter().map(|r| key(r)).collect();
    k.sort();
    k
}

/// One case: resamples (from the same stream) until the reference can
/// enumerate it, then compares row multisets.
pub fn check_case(seed: u64) -> Result<(), String> {
    let mut rng = super::rng(seed);
    for _ in 0..20 {
        let g = gen_graph(&mut rng);
        let q = gen_query(&mut rng);
        let Some(want) = reference_rows(&g, &q) else {
            continue;
        };
        let text = query_text(&q);
        let parsed = parse_cypher(&text).map_err(|e| format!("{text}: {e}"))?;
        let limits = EvalLimits {
            max_steps: u64::MAX,
            ..EvalLimits::default()
        };
        let got = eval_query_with(&g, &parsed, &limits).map_err(|e| format!("{text}: {e}"))?;
        if multiset(&got.table.rows) != multiset(&want) {
            return Err(format!(
                "{text}\nwant {} rows, got {} rows\nwant {:?}\ngot  {:?}",
                want.len(),
                got.table.rows.len(),
                multiset(&want).into_iter().take(10).collect::<Vec<_>>(),
                multiset(&got.table.rows).into_iter().take(10).collect::<Vec<_>>()
            ));
        }
        return Ok(());
    }
    Err("no enumerable case in 20 draws".into())
}

/// Printing a parsed query and parsing it again gives the same tree.
pub fn check_roundtrip(seed: u64) -> Result<(), String> {
    let mut rng = super::rng(seed);
    let text = query_text(&gen_query(&mut rng));
    let q = parse_cypher(&text).map_err(|e| format!("{text}: {e}"))?;
    let printed = q.to_string();
    let again = parse_cypher(&printed).map_err(|e| format!("{printed}: {e}"))?;
    if again != q {
        return Err(format!("{text}\nprinted {printed}\nreparsed differently"));
    }
    Ok(())
}
