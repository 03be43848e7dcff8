//! Lexer and recursive-descent parser for the Cypher subset.

use super::ast::*;
use super::QueryError;
use crate::value::Value;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Tok {
    Ident(String),
    /// Backtick-quoted identifier; never a keyword.
    Quoted(String),
    Str(String),
    /// Unsigned integer digits; the sign is applied by the parser.
    Int(String),
    Real(f64),
    Sym(&'static str),
    Eof,
}

#[derive(Debug, Clone)]
pub(crate) struct Token {
    pub tok: Tok,
    pub start: usize,
}

const SYMBOLS: &[&str] = &[
    "<>", "<=", ">=", "!=", "=~", "..", "(", ")", "[", "]", "{", "}", ":", ",", ".", "-", ">", "<", "=", "*", ";", "|",
];

pub(crate) fn lex(src: &str) -> Result<Vec<Token>, QueryError> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'/') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            toks.push(Token {
                tok: Tok::Ident(src[start..i].to_string()),
                start,
            });
        } else if c == b'`' {
            let mut s = String::new();
            i += 1;
            loop {
                match src[i..].chars().next() {
                    None => return Err(QueryError::syntax(start, "closing '`'", "end of input")),
                    Some('`') if bytes.get(i + 1) == Some(&b'`') => {
                        s.push('`');
                        i += 2;
                    }
                    Some('`') => {
                        i += 1;
                        break;
                    }
                    Some(ch) => {
                        s.push(ch);
                        i += ch.len_utf8();
                    }
                }
            }
            toks.push(Token {
                tok: Tok::Quoted(s),
                start,
            });
        } else if c == b'\'' || c == b'"' {
            let quote = c as char;
            let mut s = String::new();
            i += 1;
            loop {
                match src[i..].chars().next() {
                    None => return Err(QueryError::syntax(start, "closing quote", "end of input")),
                    Some('\\') => {
                        let esc = src[i + 1..]
                            .chars()
                            .next()
                            .ok_or_else(|| QueryError::syntax(i, "escape character", "end of input"))?;
                        s.push(match esc {
                            'n' => '\n',
                            't' => '\t',
                            'r' => '\r',
                            other => other,
                        });
                        i += 1 + esc.len_utf8();
                    }
                    Some(ch) if ch == quote => {
                        i += 1;
                        break;
                    }
                    Some(ch) => {
                        s.push(ch);
                        i += ch.len_utf8();
                    }
                }
            }
            toks.push(Token {
                tok: Tok::Str(s),
                start,
            });
        } else if c.is_ascii_digit() {
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let mut real = false;
            if bytes.get(i) == Some(&b'.') && bytes.get(i + 1).is_some_and(u8::is_ascii_digit) {
                real = true;
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if matches!(bytes.get(i), Some(b'e' | b'E')) {
                let mut j = i + 1;
                if matches!(bytes.get(j), Some(b'+' | b'-')) {
                    j += 1;
                }
                if bytes.get(j).is_some_and(u8::is_ascii_digit) {
                    real = true;
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let tok = if real {
                Tok::Real(text.parse().map_err(|_| QueryError::syntax(start, "number", text))?)
            } else {
                Tok::Int(text.to_string())
            };
            toks.push(Token { tok, start });
        } else if let Some(sym) = SYMBOLS.iter().find(|s| src[i..].starts_with(**s)) {
            i += sym.len();
            toks.push(Token {
                tok: Tok::Sym(sym),
                start,
            });
        } else {
            let ch = src[i..].chars().next().unwrap_or('?');
            return Err(QueryError::syntax(start, "a token", &ch.to_string()));
        }
    }
    toks.push(Token {
        tok: Tok::Eof,
        start: src.len(),
    });
    Ok(toks)
}

const WRITE_CLAUSES: &[&str] = &[
    "create", "merge", "delete", "detach", "set", "remove", "foreach", "load", "call",
];
const OTHER_CLAUSES: &[&str] = &["optional", "with", "unwind", "union", "skip", "match"];

pub(crate) struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => format!("'{s}'"),
        Tok::Quoted(s) => format!("`{s}`"),
        Tok::Str(s) => format!("string {}", quote_string(s)),
        Tok::Int(s) => s.clone(),
        Tok::Real(r) => r.to_string(),
        Tok::Sym(s) => format!("'{s}'"),
        Tok::Eof => "end of input".into(),
    }
}

impl Parser {
    pub(crate) fn new(src: &str) -> Result<Self, QueryError> {
        Ok(Self {
            toks: lex(src)?,
            pos: 0,
        })
    }

    pub(crate) fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, n: usize) -> &Tok {
        &self.toks[(self.pos + n).min(self.toks.len() - 1)].tok
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].start
    }

    pub(crate) fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    pub(crate) fn err(&self, expected: &str) -> QueryError {
        QueryError::syntax(self.offset(), expected, &describe(self.peek()))
    }

    pub(crate) fn at_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Sym(x) if *x == s)
    }

    pub(crate) fn eat_sym(&mut self, s: &str) -> bool {
        if self.at_sym(s) {
            self.bump();
            true
        } else {
            false
        }
    }

    pub(crate) fn expect_sym(&mut self, s: &str) -> Result<(), QueryError> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            Err(self.err(&format!("'{s}'")))
        }
    }

    pub(crate) fn at_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(x) if x.eq_ignore_ascii_case(kw))
    }

    pub(crate) fn eat_kw(&mut self, kw: &str) -> bool {
        if self.at_kw(kw) {
            self.bump();
            true
        } else {
            false
        }
    }

    pub(crate) fn expect_kw(&mut self, kw: &str) -> Result<(), QueryError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(self.err(kw))
        }
    }

    fn check_clause(&self) -> Result<(), QueryError> {
        if let Tok::Ident(w) = self.peek() {
            let lower = w.to_ascii_lowercase();
            if WRITE_CLAUSES.contains(&lower.as_str()) {
                return Err(QueryError::UnsupportedFeature(format!(
                    "{} clauses (the query language is read-only)",
                    w.to_uppercase()
                )));
            }
            if OTHER_CLAUSES.contains(&lower.as_str()) {
                let hint = if lower == "match" {
                    "; combine patterns in one MATCH with commas"
                } else {
                    ""
                };
                return Err(QueryError::UnsupportedFeature(format!(
                    "{} clause at byte {}{hint}",
                    w.to_uppercase(),
                    self.offset()
                )));
            }
        }
        Ok(())
    }

    /// Identifier in name position (variable, label, property key).
    pub(crate) fn name(&mut self, what: &str) -> Result<String, QueryError> {
        match self.peek().clone() {
            Tok::Ident(s) | Tok::Quoted(s) => {
                self.bump();
                Ok(s)
            }
            _ => Err(self.err(what)),
        }
    }

    pub(crate) fn is_name(&self) -> bool {
        matches!(self.peek(), Tok::Ident(_) | Tok::Quoted(_))
    }

    pub(crate) fn parse_query(&mut self) -> Result<Query, QueryError> {
        self.check_clause_start()?;
        self.expect_kw("match")?;
        let mut paths = vec![self.path()?];
        while self.eat_sym(",") {
            paths.push(self.path()?);
        }
        self.check_clause()?;
        let where_clause = if self.eat_kw("where") { Some(self.expr()?) } else { None };
        self.check_clause()?;
        self.expect_kw("return")?;
        let distinct = self.eat_kw("distinct");
        let mut returns = vec![self.return_item()?];
        while self.eat_sym(",") {
            returns.push(self.return_item()?);
        }
        let mut order_by = Vec::new();
        if self.eat_kw("order") {
            self.expect_kw("by")?;
            loop {
                let expr = self.expr()?;
                let descending = if self.eat_kw("desc") || self.eat_kw("descending") {
                    true
                } else {
                    let _ = self.eat_kw("asc") || self.eat_kw("ascending");
                    false
                };
                order_by.push(SortItem { expr, descending });
                if !self.eat_sym(",") {
                    break;
                }
            }
        }
        self.check_clause()?;
        let limit = if self.eat_kw("limit") {
            let Tok::Int(d) = self.peek().clone() else {
                return Err(self.err("non-negative integer"));
            };
            let n = d
                .parse::<u64>()
                .map_err(|_| QueryError::syntax(self.offset(), "LIMIT count", &d))?;
            self.bump();
            Some(n)
        } else {
            None
        };
        self.check_clause()?;
        self.eat_sym(";");
        if !matches!(self.peek(), Tok::Eof) {
            return Err(self.err("end of query"));
        }
        Ok(Query {
            paths,
            where_clause,
            distinct,
            returns,
            order_by,
            limit,
        })
    }

    fn check_clause_start(&self) -> Result<(), QueryError> {
        if self.at_kw("match") {
            return Ok(());
        }
        self.check_clause()
    }

    fn path(&mut self) -> Result<PathPattern, QueryError> {
        let start = self.node()?;
        let mut steps = Vec::new();
        while self.at_sym("-") || self.at_sym("<") {
            let e = self.edge()?;
            steps.push((e, self.node()?));
        }
        Ok(PathPattern { start, steps })
    }

    pub(crate) fn node(&mut self) -> Result<NodePattern, QueryError> {
        self.expect_sym("(")?;
        let var = if self.is_name() {
            Some(self.name("variable")?)
        } else {
            None
        };
        let label = if self.eat_sym(":") {
            Some(self.name("label")?)
        } else {
            None
        };
        if self.at_sym(":") {
            return Err(QueryError::UnsupportedFeature("multiple labels on one node".into()));
        }
        let props = if self.at_sym("{") { self.prop_map()? } else { Vec::new() };
        self.expect_sym(")")?;
        Ok(NodePattern { var, label, props })
    }

    pub(crate) fn prop_map(&mut self) -> Result<Vec<(String, Value)>, QueryError> {
        self.expect_sym("{")?;
        let mut props = Vec::new();
        if !self.at_sym("}") {
            loop {
                let k = self.name("property key")?;
                self.expect_sym(":")?;
                props.push((k, self.literal()?));
                if !self.eat_sym(",") {
                    break;
                }
            }
        }
        self.expect_sym("}")?;
        Ok(props)
    }

    fn edge(&mut self) -> Result<EdgePattern, QueryError> {
        let left = self.eat_sym("<");
        self.expect_sym("-")?;
        let mut var = None;
        let mut rel_type = None;
        let mut hops = None;
        if self.eat_sym("[") {
            if self.is_name() {
                var = Some(self.name("variable")?);
            }
            if self.eat_sym(":") {
                rel_type = Some(self.name("relationship type")?);
                if self.at_sym("|") {
                    return Err(QueryError::UnsupportedFeature("alternative relationship types".into()));
                }
            }
            if self.at_sym("*") {
                let at = self.offset();
                self.bump();
                hops = Some(self.hop_range(at)?);
            }
            if self.at_sym("{") {
                return Err(QueryError::UnsupportedFeature("relationship property maps".into()));
            }
            self.expect_sym("]")?;
        }
        self.expect_sym("-")?;
        let right = self.eat_sym(">");
        let direction = match (left, right) {
            (true, true) => return Err(self.err("a single arrow direction")),
            (true, false) => Direction::In,
            (false, true) => Direction::Out,
            (false, false) => Direction::Any,
        };
        if hops.is_some() && var.is_some() {
            return Err(QueryError::UnsupportedFeature(
                "variables on variable-length relationships".into(),
            ));
        }
        Ok(EdgePattern {
            var,
            rel_type,
            direction,
            hops,
        })
    }

    fn hop_int(&mut self) -> Option<u32> {
        if let Tok::Int(d) = self.peek().clone() {
            self.bump();
            Some(d.parse().unwrap_or(u32::MAX))
        } else {
            None
        }
    }

    fn hop_range(&mut self, at: usize) -> Result<(u32, u32), QueryError> {
        let lo = self.hop_int();
        let (lo, hi) = if self.eat_sym("..") {
            (lo.unwrap_or(1), self.hop_int())
        } else {
            (lo.unwrap_or(0), lo)
        };
        let Some(hi) = hi else {
            return Err(QueryError::UnsupportedFeature(
                "unbounded variable-length relationships; give an upper bound such as *1..3".into(),
            ));
        };
        if lo < 1 || lo > hi || hi > 8 {
            return Err(QueryError::syntax(
                at,
                "hop range with 1 <= min <= max <= 8",
                &format!("*{lo}..{hi}"),
            ));
        }
        Ok((lo, hi))
    }

    fn return_item(&mut self) -> Result<ReturnItem, QueryError> {
        let expr = self.expr()?;
        let alias = if self.eat_kw("as") {
            Some(self.name("alias")?)
        } else {
            None
        };
        Ok(ReturnItem { expr, alias })
    }

    pub(crate) fn expr(&mut self) -> Result<Expr, QueryError> {
        let mut left = self.and_expr()?;
        while self.eat_kw("or") {
            left = Expr::Or(Box::new(left), Box::new(self.and_expr()?));
        }
        if self.at_kw("xor") {
            return Err(QueryError::UnsupportedFeature("XOR".into()));
        }
        Ok(left)
    }

    fn and_expr(&mut self) -> Result<Expr, QueryError> {
        let mut left = self.not_expr()?;
        while self.eat_kw("and") {
            left = Expr::And(Box::new(left), Box::new(self.not_expr()?));
        }
        Ok(left)
    }

    fn not_expr(&mut self) -> Result<Expr, QueryError> {
        if self.eat_kw("not") {
            return Ok(Expr::Not(Box::new(self.not_expr()?)));
        }
        self.cmp_expr()
    }

    fn cmp_expr(&mut self) -> Result<Expr, QueryError> {
        let left = self.atom()?;
        let op = match self.peek() {
            Tok::Sym("=") => Some(CmpOp::Eq),
            Tok::Sym("<>") | Tok::Sym("!=") => Some(CmpOp::Ne),
            Tok::Sym("<") => Some(CmpOp::Lt),
            Tok::Sym(">") => Some(CmpOp::Gt),
            Tok::Sym("<=") => Some(CmpOp::Le),
            Tok::Sym(">=") => Some(CmpOp::Ge),
            _ => None,
        };
        if let Some(op) = op {
            self.bump();
            return Ok(Expr::Cmp(Box::new(left), op, Box::new(self.atom()?)));
        }
        if self.eat_kw("is") {
            let negated = self.eat_kw("not");
            self.expect_kw("null")?;
            return Ok(Expr::IsNull(Box::new(left), negated));
        }
        let str_op = if self.eat_kw("contains") {
            Some(StrOp::Contains)
        } else if self.eat_kw("starts") {
            self.expect_kw("with")?;
            Some(StrOp::StartsWith)
        } else if self.eat_kw("ends") {
            self.expect_kw("with")?;
            Some(StrOp::EndsWith)
        } else {
            None
        };
        if let Some(op) = str_op {
            return Ok(Expr::Str(Box::new(left), op, Box::new(self.atom()?)));
        }
        if self.at_kw("in") || self.at_sym("=~") {
            return Err(QueryError::UnsupportedFeature("IN and regex predicates".into()));
        }
        Ok(left)
    }

    pub(crate) fn literal(&mut self) -> Result<Value, QueryError> {
        let negative = self.eat_sym("-");
        match self.peek().clone() {
            Tok::Int(d) => {
                self.bump();
                let text = if negative { format!("-{d}") } else { d };
                text.parse::<i64>()
                    .map(Value::Int)
                    .map_err(|_| QueryError::syntax(self.offset(), "64-bit integer", &text))
            }
            Tok::Real(r) => {
                self.bump();
                Ok(Value::Real(if negative { -r } else { r }))
            }
            _ if negative => Err(self.err("number")),
            Tok::Str(s) => {
                self.bump();
                Ok(Value::Text(s))
            }
            Tok::Ident(w) if w.eq_ignore_ascii_case("true") => {
                self.bump();
                Ok(Value::Bool(true))
            }
            Tok::Ident(w) if w.eq_ignore_ascii_case("false") => {
                self.bump();
                Ok(Value::Bool(false))
            }
            Tok::Ident(w) if w.eq_ignore_ascii_case("null") => {
                self.bump();
                Ok(Value::Null)
            }
            Tok::Sym("[") => {
                self.bump();
                let mut items = Vec::new();
                if !self.at_sym("]") {
                    loop {
                        items.push(self.literal()?);
                        if !self.eat_sym(",") {
                            break;
                        }
                    }
                }
                self.expect_sym("]")?;
                Ok(Value::List(items))
            }
            _ => Err(self.err("literal")),
        }
    }

    fn atom(&mut self) -> Result<Expr, QueryError> {
        match self.peek().clone() {
            Tok::Sym("(") => {
                self.bump();
                let e = self.expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Tok::Sym("-") | Tok::Sym("[") | Tok::Int(_) | Tok::Real(_) | Tok::Str(_) => Ok(Expr::Lit(self.literal()?)),
            Tok::Ident(w) if ["true", "false", "null"].iter().any(|k| w.eq_ignore_ascii_case(k)) => {
                Ok(Expr::Lit(self.literal()?))
            }
            Tok::Ident(w) if matches!(self.peek_at(1), Tok::Sym("(")) => {
                let Some(func) = AggFunc::from_name(&w) else {
                    return Err(QueryError::UnsupportedFeature(format!("function {w}()")));
                };
                self.bump();
                self.bump();
                if func == AggFunc::Count && self.eat_sym("*") {
                    self.expect_sym(")")?;
                    return Ok(Expr::Agg {
                        func,
                        distinct: false,
                        arg: None,
                    });
                }
                let distinct = self.eat_kw("distinct");
                let arg = self.expr()?;
                self.expect_sym(")")?;
                Ok(Expr::Agg {
                    func,
                    distinct,
                    arg: Some(Box::new(arg)),
                })
            }
            Tok::Ident(w) if is_reserved(&w) => Err(self.err("expression")),
            Tok::Ident(_) | Tok::Quoted(_) => {
                let var = self.name("variable")?;
                if self.eat_sym(".") {
                    let key = self.name("property key")?;
                    Ok(Expr::Prop(var, key))
                } else {
                    Ok(Expr::Var(var))
                }
            }
            Tok::Sym("{") => Err(QueryError::UnsupportedFeature("map literals".into())),
            _ => Err(self.err("expression")),
        }
    }
}
