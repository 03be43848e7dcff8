//! Query syntax tree for the read-only Cypher subset, with a canonical
//! printer whose output parses back to an equal tree.

use std::fmt;

use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Out,
    In,
    Any,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodePattern {
    pub var: Option<String>,
    pub label: Option<String>,
    pub props: Vec<(String, Value)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgePattern {
    pub var: Option<String>,
    pub rel_type: Option<String>,
    pub direction: Direction,
    /// Inclusive hop range for variable-length edges.
    pub hops: Option<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathPattern {
    pub start: NodePattern,
    pub steps: Vec<(EdgePattern, NodePattern)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Gt,
    Le,
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "<>",
            CmpOp::Lt => "<",
            CmpOp::Gt => ">",
            CmpOp::Le => "<=",
            CmpOp::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrOp {
    Contains,
    StartsWith,
    EndsWith,
}

impl StrOp {
    pub fn keyword(self) -> &'static str {
        match self {
            StrOp::Contains => "CONTAINS",
            StrOp::StartsWith => "STARTS WITH",
            StrOp::EndsWith => "ENDS WITH",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggFunc {
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

impl AggFunc {
    pub fn name(self) -> &'static str {
        match self {
            AggFunc::Count => "count",
            AggFunc::Sum => "sum",
            AggFunc::Avg => "avg",
            AggFunc::Min => "min",
            AggFunc::Max => "max",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name.to_ascii_lowercase().as_str() {
            "count" => AggFunc::Count,
            "sum" => AggFunc::Sum,
            "avg" => AggFunc::Avg,
            "min" => AggFunc::Min,
            "max" => AggFunc::Max,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Lit(Value),
    Var(String),
    Prop(String, String),
    Cmp(Box<Expr>, CmpOp, Box<Expr>),
    Str(Box<Expr>, StrOp, Box<Expr>),
    IsNull(Box<Expr>, bool),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    /// `arg == None` is `count(*)`.
    Agg {
        func: AggFunc,
        distinct: bool,
        arg: Option<Box<Expr>>,
    },
}

impl Expr {
    pub fn is_aggregate(&self) -> bool {
        matches!(self, Expr::Agg { .. })
    }

    pub fn contains_aggregate(&self) -> bool {
        match self {
            Expr::Agg { .. } => true,
            Expr::Lit(_) | Expr::Var(_) | Expr::Prop(..) => false,
            Expr::Cmp(a, _, b) | Expr::Str(a, _, b) | Expr::And(a, b) | Expr::Or(a, b) => {
                a.contains_aggregate() || b.contains_aggregate()
            }
            Expr::IsNull(a, _) | Expr::Not(a) => a.contains_aggregate(),
        }
    }

    /// Variables referenced anywhere in the expression.
    pub fn vars<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Expr::Lit(_) => {}
            Expr::Var(v) | Expr::Prop(v, _) => out.push(v),
            Expr::Cmp(a, _, b) | Expr::Str(a, _, b) | Expr::And(a, b) | Expr::Or(a, b) => {
                a.vars(out);
                b.vars(out);
            }
            Expr::IsNull(a, _) | Expr::Not(a) => a.vars(out),
            Expr::Agg { arg, .. } => {
                if let Some(a) = arg {
                    a.vars(out);
                }
            }
        }
    }

    fn is_atom(&self) -> bool {
        matches!(self, Expr::Lit(_) | Expr::Var(_) | Expr::Prop(..) | Expr::Agg { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnItem {
    pub expr: Expr,
    pub alias: Option<String>,
}

impl ReturnItem {
    pub fn column_name(&self) -> String {
        self.alias.clone().unwrap_or_else(|| self.expr.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SortItem {
    pub expr: Expr,
    pub descending: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub paths: Vec<PathPattern>,
    pub where_clause: Option<Expr>,
    pub distinct: bool,
    pub returns: Vec<ReturnItem>,
    pub order_by: Vec<SortItem>,
    pub limit: Option<u64>,
}

const RESERVED: &[&str] = &[
    "match",
    "where",
    "return",
    "order",
    "by",
    "asc",
    "desc",
    "ascending",
    "descending",
    "limit",
    "and",
    "or",
    "not",
    "xor",
    "is",
    "null",
    "true",
    "false",
    "distinct",
    "as",
    "contains",
    "starts",
    "ends",
    "with",
    "create",
    "merge",
    "delete",
    "detach",
    "set",
    "remove",
    "optional",
    "unwind",
    "call",
    "skip",
    "union",
    "foreach",
    "load",
    "in",
    "count",
    "sum",
    "avg",
    "min",
    "max",
];

pub fn is_reserved(word: &str) -> bool {
    RESERVED.iter().any(|k| k.eq_ignore_ascii_case(word))
}

/// Prints an identifier, backtick-quoting it when needed.
pub fn ident(name: &str) -> String {
    let mut chars = name.chars();
    let plain = matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !is_reserved(name);
    if plain {
        name.to_string()
    } else {
        format!("`{}`", name.replace('`', "``"))
    }
}

pub fn quote_string(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('\'');
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\'' => out.push_str("\\'"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out.push('\'');
    out
}

pub fn literal(v: &Value) -> String {
    match v {
        Value::Null => "null".into(),
        Value::Bool(b) => b.to_string(),
        Value::Int(i) => i.to_string(),
        Value::Real(r) => format!("{r:?}"),
        Value::Text(s) => quote_string(s),
        Value::List(items) => {
            let parts: Vec<String> = items.iter().map(literal).collect();
            format!("[{}]", parts.join(", "))
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let atomic = |e: &Expr| {
            if e.is_atom() {
                e.to_string()
            } else {
                format!("({e})")
            }
        };
        match self {
            Expr::Lit(v) => f.write_str(&literal(v)),
            Expr::Var(v) => f.write_str(&ident(v)),
            Expr::Prop(v, p) => write!(f, "{}.{}", ident(v), ident(p)),
            Expr::Cmp(a, op, b) => write!(f, "{} {} {}", atomic(a), op.symbol(), atomic(b)),
            Expr::Str(a, op, b) => write!(f, "{} {} {}", atomic(a), op.keyword(), atomic(b)),
            Expr::IsNull(a, negated) => {
                write!(f, "{} IS {}NULL", atomic(a), if *negated { "NOT " } else { "" })
            }
            Expr::Not(a) => write!(f, "NOT {}", atomic(a)),
            Expr::And(a, b) => write!(f, "{} AND {}", atomic(a), atomic(b)),
            Expr::Or(a, b) => write!(f, "{} OR {}", atomic(a), atomic(b)),
            Expr::Agg { func, distinct, arg } => {
                let inner = match arg {
                    None => "*".to_string(),
                    Some(a) => a.to_string(),
                };
                write!(
                    f,
                    "{}({}{})",
                    func.name(),
                    if *distinct { "DISTINCT " } else { "" },
                    inner
                )
            }
        }
    }
}

impl fmt::Display for NodePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        if let Some(v) = &self.var {
            f.write_str(&ident(v))?;
        }
        if let Some(l) = &self.label {
            write!(f, ":{}", ident(l))?;
        }
        if !self.props.is_empty() {
            let parts: Vec<String> = self
                .props
                .iter()
                .map(|(k, v)| format!("{}: {}", ident(k), literal(v)))
                .collect();
            if self.var.is_some() || self.label.is_some() {
                f.write_str(" ")?;
            }
            write!(f, "{{{}}}", parts.join(", "))?;
        }
        f.write_str(")")
    }
}

impl fmt::Display for EdgePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut inner = String::new();
        if let Some(v) = &self.var {
            inner.push_str(&ident(v));
        }
        if let Some(t) = &self.rel_type {
            inner.push(':');
            inner.push_str(&ident(t));
        }
        if let Some((lo, hi)) = self.hops {
            inner.push_str(&format!("*{lo}..{hi}"));
        }
        match self.direction {
            Direction::Out => write!(f, "-[{inner}]->"),
            Direction::In => write!(f, "<-[{inner}]-"),
            Direction::Any => write!(f, "-[{inner}]-"),
        }
    }
}

impl fmt::Display for PathPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.start)?;
        for (e, n) in &self.steps {
            write!(f, "{e}{n}")?;
        }
        Ok(())
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let paths: Vec<String> = self.paths.iter().map(|p| p.to_string()).collect();
        write!(f, "MATCH {}", paths.join(", "))?;
        if let Some(w) = &self.where_clause {
            write!(f, " WHERE {w}")?;
        }
        let items: Vec<String> = self
            .returns
            .iter()
            .map(|r| match &r.alias {
                Some(a) => format!("{} AS {}", r.expr, ident(a)),
                None => r.expr.to_string(),
            })
            .collect();
        write!(
            f,
            " RETURN {}{}",
            if self.distinct { "DISTINCT " } else { "" },
            items.join(", ")
        )?;
        if !self.order_by.is_empty() {
            let keys: Vec<String> = self
                .order_by
                .iter()
                .map(|s| format!("{}{}", s.expr, if s.descending { " DESC" } else { "" }))
                .collect();
            write!(f, " ORDER BY {}", keys.join(", "))?;
        }
        if let Some(n) = self.limit {
            write!(f, " LIMIT {n}")?;
        }
        Ok(())
    }
}
