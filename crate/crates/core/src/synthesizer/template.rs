//! Matching templates mined from documentation code blocks.
//!
//! A code block qualifies when it reduces to one expression (optionally the
//! right-hand side of a single assignment) built from calls, attribute
//! accesses, literals and the documented API's own argument names. Argument
//! names become `#i` placeholders (1-based, by position). Anything outside
//! that grammar is skipped.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::{ApiEntry, CorpusDb};
use crate::value::ValueRepr;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("cannot parse expression at byte {offset}: {reason}")]
pub struct ParseError {
    pub offset: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Int(i64),
    Float(f64),
    Str(String),
    Bool(bool),
    None,
}

impl Literal {
    pub fn to_value(&self) -> ValueRepr {
        match self {
            Literal::Int(v) => ValueRepr::int(*v),
            Literal::Float(v) => ValueRepr::float(*v),
            Literal::Str(s) => ValueRepr::str(s.clone()),
            Literal::Bool(b) => ValueRepr::bool(*b),
            Literal::None => ValueRepr::None,
        }
    }
}

/// Expression tree over placeholders.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    /// `#i`, 1-based source argument index.
    Placeholder(usize),
    Name(String),
    Attr {
        base: Box<Expr>,
        attr: String,
    },
    Call {
        func: Box<Expr>,
        args: Vec<Expr>,
        kwargs: Vec<(String, Expr)>,
    },
    Lit(Literal),
    List(Vec<Expr>),
}

impl Expr {
    /// Dotted name for `Name`/`Attr` chains such as `tf.math.add`.
    pub fn dotted_path(&self) -> Option<String> {
        match self {
            Expr::Name(n) => Some(n.clone()),
            Expr::Attr { base, attr } => base.dotted_path().map(|p| format!("{p}.{attr}")),
            _ => None,
        }
    }

    /// Highest placeholder index referenced, 0 if none.
    pub fn max_placeholder(&self) -> usize {
        match self {
            Expr::Placeholder(i) => *i,
            Expr::Name(_) | Expr::Lit(_) => 0,
            Expr::Attr { base, .. } => base.max_placeholder(),
            Expr::Call { func, args, kwargs } => func
                .max_placeholder()
                .max(args.iter().map(Expr::max_placeholder).max().unwrap_or(0))
                .max(kwargs.iter().map(|(_, e)| e.max_placeholder()).max().unwrap_or(0)),
            Expr::List(items) => items.iter().map(Expr::max_placeholder).max().unwrap_or(0),
        }
    }

    /// Dotted callee names of every call, outermost first.
    pub fn called_paths(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_calls(&mut out);
        out
    }

    fn collect_calls(&self, out: &mut Vec<String>) {
        match self {
            Expr::Call { func, args, kwargs } => {
                if let Some(p) = func.dotted_path() {
                    out.push(p);
                } else {
                    func.collect_calls(out);
                }
                for a in args {
                    a.collect_calls(out);
                }
                for (_, e) in kwargs {
                    e.collect_calls(out);
                }
            }
            Expr::Attr { base, .. } => base.collect_calls(out),
            Expr::List(items) => items.iter().for_each(|e| e.collect_calls(out)),
            _ => {}
        }
    }

    fn rewrite_names(self, params: &[String]) -> Expr {
        match self {
            Expr::Name(n) => match params.iter().position(|p| *p == n) {
                Some(i) => Expr::Placeholder(i + 1),
                None => Expr::Name(n),
            },
            Expr::Attr { base, attr } => Expr::Attr {
                base: Box::new(base.rewrite_names(params)),
                attr,
            },
            Expr::Call { func, args, kwargs } => Expr::Call {
                // callee chains keep their names; `x.method()` still rewrites x
                func: Box::new(match *func {
                    Expr::Name(n) => Expr::Name(n),
                    other => other.rewrite_names(params),
                }),
                args: args.into_iter().map(|a| a.rewrite_names(params)).collect(),
                kwargs: kwargs.into_iter().map(|(k, e)| (k, e.rewrite_names(params))).collect(),
            },
            Expr::List(items) => Expr::List(items.into_iter().map(|e| e.rewrite_names(params)).collect()),
            other => other,
        }
    }

    /// True when a bare identifier is used as a value, i.e. a variable that
    /// the template cannot bind.
    fn has_free_variable(&self) -> bool {
        match self {
            Expr::Name(_) => true,
            Expr::Placeholder(_) | Expr::Lit(_) => false,
            // `mod.attr` constants are fine; `#1.attr` is fine
            Expr::Attr { base, .. } => match base.as_ref() {
                Expr::Name(_) => false,
                other => other.has_free_variable(),
            },
            Expr::Call { func, args, kwargs } => {
                let callee_free = match func.as_ref() {
                    Expr::Name(_) => false,
                    other => other.has_free_variable(),
                };
                callee_free
                    || args.iter().any(Expr::has_free_variable)
                    || kwargs.iter().any(|(_, e)| e.has_free_variable())
            }
            Expr::List(items) => items.iter().any(Expr::has_free_variable),
        }
    }

    /// Parses one expression. Accepts `#i` placeholders.
    pub fn parse(text: &str) -> Result<Expr, ParseError> {
        let tokens = lex(text)?;
        let mut p = Parser { tokens, pos: 0 };
        let e = p.expr()?;
        p.expect_end()?;
        Ok(e)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Placeholder(i) => write!(f, "#{i}"),
            Expr::Name(n) => f.write_str(n),
            Expr::Attr { base, attr } => write!(f, "{base}.{attr}"),
            Expr::Call { func, args, kwargs } => {
                write!(f, "{func}(")?;
                let mut first = true;
                for a in args {
                    if !first {
                        f.write_str(", ")?;
                    }
                    first = false;
                    write!(f, "{a}")?;
                }
                for (k, e) in kwargs {
                    if !first {
                        f.write_str(", ")?;
                    }
                    first = false;
                    write!(f, "{k}={e}")?;
                }
                f.write_str(")")
            }
            Expr::Lit(l) => f.write_str(&l.to_value().render()),
            Expr::List(items) => {
                f.write_str("[")?;
                for (i, e) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{e}")?;
                }
                f.write_str("]")
            }
        }
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Expr::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// A documented rewrite: calling `invoked` via `expr` behaves like calling
/// `owner` with arguments `#1..#n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingTemplate {
    pub owner: String,
    pub invoked: String,
    pub expr: Expr,
}

/// Mines templates from the code blocks of `entry`.
pub fn extract_templates(entry: &ApiEntry, corpus: &CorpusDb) -> Vec<MatchingTemplate> {
    let params: Vec<String> = entry.args.iter().map(|a| a.name.clone()).collect();
    let mut out: Vec<MatchingTemplate> = Vec::new();
    for block in &entry.code_blocks {
        let Some(stmt) = single_statement(block) else {
            continue;
        };
        let Ok(expr) = parse_statement(&stmt) else {
            log::debug!("{}: skipping unparsable code block", entry.name);
            continue;
        };
        let expr = expr.rewrite_names(&params);
        if expr.has_free_variable() || expr.max_placeholder() == 0 {
            continue;
        }
        let calls = expr.called_paths();
        if calls.contains(&entry.name) {
            continue;
        }
        let Some(invoked) = calls.into_iter().find(|c| corpus.contains(c)) else {
            continue;
        };
        let template = MatchingTemplate {
            owner: entry.name.clone(),
            invoked,
            expr,
        };
        if !out.contains(&template) {
            out.push(template);
        }
    }
    out
}

/// Reduces a doc block to one logical statement, or `None`.
fn single_statement(block: &str) -> Option<String> {
    let lines: Vec<&str> = block.lines().collect();
    let doctest = lines.iter().any(|l| l.trim_start().starts_with(">>>"));
    let mut statements: Vec<String> = Vec::new();
    for raw in lines {
        let line = raw.trim();
        if doctest {
            if let Some(rest) = line.strip_prefix(">>>") {
                statements.push(rest.trim().to_string());
            } else if let Some(rest) = line.strip_prefix("...") {
                if let Some(last) = statements.last_mut() {
                    last.push(' ');
                    last.push_str(rest.trim());
                }
            }
            continue;
        }
        if line.is_empty() || is_comment(line) {
            continue;
        }
        statements.push(line.to_string());
    }
    statements.retain(|s| !s.is_empty() && !is_comment(s));
    if statements.len() == 1 {
        statements.pop()
    } else {
        None
    }
}

fn is_comment(line: &str) -> bool {
    line.starts_with('#') && !line[1..].starts_with(|c: char| c.is_ascii_digit())
}

/// `name = expr` or `expr`; the right-hand side is returned.
fn parse_statement(stmt: &str) -> Result<Expr, ParseError> {
    let tokens = lex(stmt)?;
    let start = match tokens.as_slice() {
        [(_, Tok::Ident(_)), (_, Tok::Assign), ..] => 2,
        _ => 0,
    };
    let mut p = Parser { tokens, pos: start };
    let e = p.expr()?;
    p.expect_end()?;
    Ok(e)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Float(f64),
    Str(String),
    Placeholder(usize),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Dot,
    Assign,
    Minus,
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |offset: usize, reason: &str| ParseError {
        offset,
        reason: reason.to_string(),
    };
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        match c {
            ' ' | '\t' => {
                i += 1;
                continue;
            }
            '(' => out.push((start, Tok::LParen)),
            ')' => out.push((start, Tok::RParen)),
            '[' => out.push((start, Tok::LBracket)),
            ']' => out.push((start, Tok::RBracket)),
            ',' => out.push((start, Tok::Comma)),
            '-' => out.push((start, Tok::Minus)),
            '=' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    return Err(err(start, "comparison operators are not supported"));
                }
                out.push((start, Tok::Assign));
            }
            '.' if !bytes.get(i + 1).is_some_and(u8::is_ascii_digit) => out.push((start, Tok::Dot)),
            '#' => {
                let mut j = i + 1;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                let n: usize = text[i + 1..j]
                    .parse()
                    .map_err(|_| err(start, "placeholder needs an index"))?;
                if n == 0 {
                    return Err(err(start, "placeholders are 1-based"));
                }
                out.push((start, Tok::Placeholder(n)));
                i = j;
                continue;
            }
            '\'' | '"' => {
                let quote = bytes[i];
                let mut j = i + 1;
                let mut s = String::new();
                while j < bytes.len() && bytes[j] != quote {
                    if bytes[j] == b'\\' && j + 1 < bytes.len() {
                        j += 1;
                    }
                    let ch = text[j..].chars().next().unwrap();
                    s.push(ch);
                    j += ch.len_utf8();
                }
                if j >= bytes.len() {
                    return Err(err(start, "unterminated string"));
                }
                out.push((start, Tok::Str(s)));
                i = j + 1;
                continue;
            }
            c if c.is_ascii_digit() || c == '.' => {
                let mut j = i;
                while j < bytes.len()
                    && (bytes[j].is_ascii_digit()
                        || bytes[j] == b'.'
                        || bytes[j] == b'e'
                        || bytes[j] == b'E'
                        || bytes[j] == b'_'
                        || ((bytes[j] == b'-' || bytes[j] == b'+') && matches!(bytes[j - 1], b'e' | b'E')))
                {
                    j += 1;
                }
                let lit: String = text[i..j].chars().filter(|c| *c != '_').collect();
                if lit.contains(['.', 'e', 'E']) {
                    let v: f64 = lit.parse().map_err(|_| err(start, "bad float literal"))?;
                    out.push((start, Tok::Float(v)));
                } else {
                    let v: i64 = lit.parse().map_err(|_| err(start, "bad int literal"))?;
                    out.push((start, Tok::Int(v)));
                }
                i = j;
                continue;
            }
            c if c.is_alphabetic() || c == '_' => {
                let mut j = i;
                while j < bytes.len() {
                    let ch = text[j..].chars().next().unwrap();
                    if ch.is_alphanumeric() || ch == '_' {
                        j += ch.len_utf8();
                    } else {
                        break;
                    }
                }
                out.push((start, Tok::Ident(text[i..j].to_string())));
                i = j;
                continue;
            }
            _ => return Err(err(start, &format!("unsupported character {c:?}"))),
        }
        i += 1;
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(usize::MAX, |(o, _)| *o)
    }

    fn fail<T>(&self, reason: &str) -> Result<T, ParseError> {
        Err(ParseError {
            offset: self.offset(),
            reason: reason.to_string(),
        })
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == Some(tok) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_end(&self) -> Result<(), ParseError> {
        if self.pos < self.tokens.len() {
            return self.fail("trailing tokens");
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        if self.eat(&Tok::Minus) {
            return match self.bump() {
                Some(Tok::Int(v)) => Ok(Expr::Lit(Literal::Int(-v))),
                Some(Tok::Float(v)) => Ok(Expr::Lit(Literal::Float(-v))),
                _ => self.fail("unary minus only applies to numeric literals"),
            };
        }
        let mut e = self.primary()?;
        loop {
            if self.eat(&Tok::Dot) {
                match self.bump() {
                    Some(Tok::Ident(attr)) => {
                        e = Expr::Attr {
                            base: Box::new(e),
                            attr,
                        }
                    }
                    _ => return self.fail("expected attribute name"),
                }
            } else if self.eat(&Tok::LParen) {
                let (args, kwargs) = self.call_args()?;
                e = Expr::Call {
                    func: Box::new(e),
                    args,
                    kwargs,
                };
            } else {
                return Ok(e);
            }
        }
    }

    fn call_args(&mut self) -> Result<(Vec<Expr>, Vec<(String, Expr)>), ParseError> {
        let mut args = Vec::new();
        let mut kwargs = Vec::new();
        loop {
            if self.eat(&Tok::RParen) {
                return Ok((args, kwargs));
            }
            let keyword = match (self.tokens.get(self.pos), self.tokens.get(self.pos + 1)) {
                (Some((_, Tok::Ident(k))), Some((_, Tok::Assign))) => Some(k.clone()),
                _ => None,
            };
            if let Some(k) = keyword {
                self.pos += 2;
                kwargs.push((k, self.expr()?));
            } else {
                if !kwargs.is_empty() {
                    return self.fail("positional argument after keyword argument");
                }
                args.push(self.expr()?);
            }
            if !self.eat(&Tok::Comma) && self.peek() != Some(&Tok::RParen) {
                return self.fail("expected ',' or ')'");
            }
        }
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.bump() {
            Some(Tok::Ident(name)) => Ok(match name.as_str() {
                "True" => Expr::Lit(Literal::Bool(true)),
                "False" => Expr::Lit(Literal::Bool(false)),
                "None" => Expr::Lit(Literal::None),
                _ => Expr::Name(name),
            }),
            Some(Tok::Int(v)) => Ok(Expr::Lit(Literal::Int(v))),
            Some(Tok::Float(v)) => Ok(Expr::Lit(Literal::Float(v))),
            Some(Tok::Str(s)) => Ok(Expr::Lit(Literal::Str(s))),
            Some(Tok::Placeholder(i)) => Ok(Expr::Placeholder(i)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                if !self.eat(&Tok::RParen) {
                    return self.fail("expected ')'");
                }
                Ok(e)
            }
            Some(Tok::LBracket) => {
                let mut items = Vec::new();
                loop {
                    if self.eat(&Tok::RBracket) {
                        return Ok(Expr::List(items));
                    }
                    items.push(self.expr()?);
                    if !self.eat(&Tok::Comma) && self.peek() != Some(&Tok::RBracket) {
                        return self.fail("expected ',' or ']'");
                    }
                }
            }
            _ => {
                self.pos = self.pos.saturating_sub(1);
                self.fail("expected an expression")
            }
        }
    }
}
